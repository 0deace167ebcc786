#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "scam/models.hpp"

namespace scam {

/// On-disk layout: the 8-byte magic "SCAMCKPT", a little-endian uint64 header
/// length, a JSON header {meta, blocks: [{name, shape}]}, then each block's
/// values as little-endian float64 in header order.
struct CheckpointBlock {
  std::string name;
  Array value;
};

struct Checkpoint {
  nlohmann::json meta;
  std::vector<CheckpointBlock> blocks;

  const Array& block(const std::string& name) const;
};

struct BlockRef {
  std::string name;
  const Array* value;
};

std::vector<BlockRef> checkpoint_blocks(const std::vector<NamedTensor>& params,
                                        const std::vector<NamedBuffer>& buffers);

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const std::vector<BlockRef>& blocks);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies blocks into the given parameters and buffers by name. Every target
/// must be present with a matching shape.
void restore(const Checkpoint& ckpt, const std::vector<NamedTensor>& params,
             const std::vector<NamedBuffer>& buffers);

}  // namespace scam
