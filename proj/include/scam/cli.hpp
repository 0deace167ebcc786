#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "scam/data.hpp"
#include "scam/models.hpp"
#include "scam/training.hpp"

namespace scam::cli {

inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kRuntimeFailure = 1, kConfigError = 2 };

struct DataSettings {
  std::string source = "synthetic";  // "csv" or "synthetic"
  std::filesystem::path path;
  bool date_column = true;
  SplitSpec split;
  std::size_t lookback = 96;
  std::size_t horizon = 96;
  std::size_t stride = 1;
  SyntheticConfig synthetic;
};

/// Everything one experiment needs. Parsed from an INI file; unknown sections
/// or keys are rejected.
struct ExperimentConfig {
  DataSettings data;
  PredictorConfig model;
  ReconstructionConfig reconstruction;
  TrainConfig train;
  std::filesystem::path out = "runs";
  std::string run_id;  // empty: derived from the config hash
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path synth_output;
  std::size_t mask_channels = 1;  // channels dumped by diagnose

  void validate() const;
  nlohmann::json to_json() const;
};

/// Flags given on the command line; each set field replaces the config value.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::optional<std::string> mode;
  std::optional<std::string> snr;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
void apply_overrides(ExperimentConfig& cfg, const Overrides& o);

/// Hex SHA-1 of "blob <size>\0<content>", as git hashes file contents.
std::string git_blob_hash(std::string_view content);
std::string config_hash(const ExperimentConfig& cfg);

RawSeries load_series(const ExperimentConfig& cfg);
std::string input_hash(const ExperimentConfig& cfg, const RawSeries& raw);
PreparedData prepare_data(const ExperimentConfig& cfg, const RawSeries& raw);

std::filesystem::path run_dir(const ExperimentConfig& cfg);
std::filesystem::path seed_dir(const ExperimentConfig& cfg, std::uint64_t seed);

/// Writes `content` to a sibling temporary file and renames it into place.
void write_atomic(const std::filesystem::path& path, const std::string& content);

/// Runs job(0..n-1) on at most `threads` workers. The first exception thrown
/// by any job is rethrown after every worker has joined.
void run_pool(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job);
std::size_t default_threads();

nlohmann::json to_json(const PredictorConfig& m);
nlohmann::json to_json(const ReconstructionConfig& r);
PredictorConfig predictor_from_json(const nlohmann::json& j);
ReconstructionConfig reconstruction_from_json(const nlohmann::json& j);

/// A predictor (and reconstruction net, if saved) rebuilt from a checkpoint.
struct LoadedModels {
  std::unique_ptr<Predictor> predictor;
  std::unique_ptr<ReconstructionNet> reconstruction;
  nlohmann::json meta;
};

void save_models(const std::filesystem::path& path, const nlohmann::json& meta, Predictor& f,
                 ReconstructionNet* g);
LoadedModels load_models(const std::filesystem::path& path);

struct CommandOptions {
  std::filesystem::path config;
  Overrides overrides;
  std::size_t threads = 0;  // 0: default_threads()
  std::filesystem::path checkpoint;
};

// Each command returns an exit code and reports failures on `err`.
int cmd_train(const CommandOptions& opt, std::ostream& out, std::ostream& err);
int cmd_grid_search(const CommandOptions& opt, std::ostream& out, std::ostream& err);
int cmd_diagnose(const CommandOptions& opt, std::ostream& out, std::ostream& err);
int cmd_synth(const CommandOptions& opt, std::ostream& out, std::ostream& err);
int cmd_eval(const CommandOptions& opt, std::ostream& out, std::ostream& err);

}  // namespace scam::cli
