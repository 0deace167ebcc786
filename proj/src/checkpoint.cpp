#include "scam/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "scam/errors.hpp"

namespace scam {

namespace {

constexpr char kMagic[8] = {'S', 'C', 'A', 'M', 'C', 'K', 'P', 'T'};

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

void write_u64(std::ostream& os, std::uint64_t v) {
  v = to_little(v);
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_f64(std::ostream& os, double d) {
  auto bits = to_little(std::bit_cast<std::uint64_t>(d));
  os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
}

}  // namespace

const Array& Checkpoint::block(const std::string& name) const {
  for (const auto& b : blocks) {
    if (b.name == name) return b.value;
  }
  throw LoadError("checkpoint has no block '" + name + "'");
}

std::vector<BlockRef> checkpoint_blocks(const std::vector<NamedTensor>& params,
                                        const std::vector<NamedBuffer>& buffers) {
  std::vector<BlockRef> out;
  for (const auto& p : params) out.push_back({p.name, &p.tensor->value});
  for (const auto& b : buffers) out.push_back({b.name, b.buffer});
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta,
                     const std::vector<BlockRef>& blocks) {
  nlohmann::json header;
  header["meta"] = meta;
  header["blocks"] = nlohmann::json::array();
  for (const auto& b : blocks) header["blocks"].push_back({{"name", b.name}, {"shape", b.value->shape()}});
  const std::string text = header.dump();

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw LoadError("cannot write checkpoint " + tmp.string());
    os.write(kMagic, sizeof kMagic);
    write_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& b : blocks) {
      for (double v : b.value->data()) write_f64(os, v);
    }
    if (!os) throw LoadError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw LoadError(path.string() + " is not a checkpoint");
  }
  std::uint64_t len = 0;
  if (!is.read(reinterpret_cast<char*>(&len), sizeof len)) throw LoadError(path.string() + ": truncated header");
  len = to_little(len);
  if (len > (std::uint64_t{1} << 30)) throw LoadError(path.string() + ": implausible header length");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw LoadError(path.string() + ": truncated header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": bad header: " + e.what());
  }
  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("blocks")) {
    Shape shape = entry.at("shape").get<Shape>();
    Array a(shape);
    for (auto& v : a.data()) {
      std::uint64_t bits = 0;
      if (!is.read(reinterpret_cast<char*>(&bits), sizeof bits)) {
        throw LoadError(path.string() + ": truncated block '" + entry.at("name").get<std::string>() + "'");
      }
      v = std::bit_cast<double>(to_little(bits));
    }
    ck.blocks.push_back({entry.at("name").get<std::string>(), std::move(a)});
  }
  return ck;
}

void restore(const Checkpoint& ckpt, const std::vector<NamedTensor>& params,
             const std::vector<NamedBuffer>& buffers) {
  auto copy = [&](const std::string& name, Array& dst) {
    const Array& src = ckpt.block(name);
    if (src.shape() != dst.shape()) {
      throw LoadError("checkpoint block '" + name + "' has shape " + shape_string(src.shape()) + ", expected " +
                      shape_string(dst.shape()));
    }
    dst = src;
  };
  for (const auto& p : params) copy(p.name, p.tensor->value);
  for (const auto& b : buffers) copy(b.name, *b.buffer);
}

}  // namespace scam
