#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "scam/data.hpp"
#include "scam/models.hpp"
#include "scam/scam_loss.hpp"
#include "scam/sharpness.hpp"

namespace scam {

/// Stream `stream` of a run seeded with `seed` (splitmix64 mixing).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

// ---- optimizers ---------------------------------------------------------

class Optimizer {
 public:
  explicit Optimizer(std::vector<TensorPtr> params) : params_(std::move(params)) {}
  virtual ~Optimizer() = default;

  /// Applies one update from the accumulated gradients. Returns false and
  /// leaves every parameter untouched if any gradient is non-finite.
  bool step();
  void zero_grad();
  std::size_t skipped() const { return skipped_; }
  const std::vector<TensorPtr>& params() const { return params_; }

 protected:
  virtual void apply() = 0;

  std::vector<TensorPtr> params_;
  std::size_t skipped_ = 0;
};

class Adam : public Optimizer {
 public:
  Adam(std::vector<TensorPtr> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  std::size_t steps() const { return t_; }

 private:
  void apply() override;

  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Array> m_, v_;
};

class Sgd : public Optimizer {
 public:
  Sgd(std::vector<TensorPtr> params, double lr) : Optimizer(std::move(params)), lr_(lr) {}

 private:
  void apply() override;
  double lr_;
};

std::unique_ptr<Optimizer> make_optimizer(const std::string& kind, std::vector<TensorPtr> params, double lr);

// ---- configuration and records -------------------------------------------

enum class TrainMode { supervised, grid_search, co_objective, scam };
std::string to_string(TrainMode m);
TrainMode parse_mode(const std::string& s);

struct TrainConfig {
  TrainMode mode = TrainMode::supervised;
  double lr = 1e-3;
  std::size_t batch_size = 32;  // windows; each contributes one row per channel
  std::size_t patience = 20;
  std::size_t max_epochs = 100;
  std::uint64_t seed = 0;
  std::string optimizer = "adam";
  std::size_t max_batches_per_epoch = 0;  // 0 = full pass
  bool raw_metrics = false;               // report metrics in original units
  bool identity_reconstruction = false;   // rec = y, no reconstruction parameters
  bool track_sharpness = false;           // lambda_max column in the epoch log
  std::size_t sharpness_windows = 512;

  // grid search
  std::size_t candidates = 5;
  std::size_t inner_max_steps = 2000;
  double inner_grad_threshold = 1e-3;
  double outer_lr = 1e-2;
  std::string inner_optimizer = "adam";

  void validate() const;
};

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  Metrics train;
  Metrics val;
  Metrics test;
  LossBreakdown breakdown;      // per-batch means over the epoch
  double in_mask_rate = 0.0;    // fraction of points with M = 1
  double corrected_rate = 0.0;  // fraction with M = 1 and M_lt = 0
  double lambda_max = 0.0;      // NaN unless tracked
  std::size_t skipped_steps = 0;
  double wall_time = 0.0;  // seconds since training start
};

void write_epochs_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& records);

// ---- training -------------------------------------------------------------

struct TrainResult {
  std::vector<EpochRecord> records;
  std::size_t best_epoch = 0;
  Metrics val;
  Metrics test;
  std::unique_ptr<Predictor> predictor;
  std::unique_ptr<ReconstructionNet> reconstruction;  // null for supervised runs

  nlohmann::json summary() const;
};

Metrics evaluate(Predictor& f, const WindowDataset& split, const Scaler* raw_units = nullptr,
                 std::size_t chunk_windows = 256);

TrainResult train_supervised(const PreparedData& data, const PredictorConfig& model, const TrainConfig& cfg);
TrainResult train_co_objective(const PreparedData& data, const PredictorConfig& model,
                               const ReconstructionConfig& recon, const TrainConfig& cfg);
TrainResult train_scam(const PreparedData& data, const PredictorConfig& model, const ReconstructionConfig& recon,
                       const TrainConfig& cfg);
/// Dispatches on cfg.mode (grid search excluded).
TrainResult train(const PreparedData& data, const PredictorConfig& model, const ReconstructionConfig& recon,
                  const TrainConfig& cfg);

struct GridRecord {
  std::size_t candidate = 0;
  double l_rec = 0.0;     // mean |rec - y| over the training windows
  double l_pred = 0.0;    // mean |pred - rec| after the inner loop
  double l_target = 0.0;  // mean |pred - y| after the inner loop
  Metrics test;
  std::size_t inner_steps = 0;
  double final_grad_norm = 0.0;
};

struct GridSearchResult {
  std::vector<GridRecord> records;
  std::unique_ptr<ReconstructionNet> reconstruction;
};

GridSearchResult train_grid_search(const PreparedData& data, const PredictorConfig& model,
                                   const ReconstructionConfig& recon, const TrainConfig& cfg);
void write_grid_csv(const std::filesystem::path& path, const std::vector<GridRecord>& records);

// ---- diagnostics ------------------------------------------------------------

/// Candidate reconstructions (R x S x H) for a batch; the identity when g is null.
Array reconstruct(const ReconstructionNet* g, const Array& y);

/// Mask counts per absolute series row, summed over windows and candidates.
struct MaskTally {
  std::vector<double> total;
  std::vector<double> in_mask;
  std::vector<double> corrected;
};

MaskTally tally_masks(Predictor& f, const ReconstructionNet* g, const WindowDataset& split,
                      std::size_t chunk_windows = 256);

/// Windows spread evenly over a split, at most `count` of them.
Batch spread_batch(const WindowDataset& split, std::size_t count);

/// Sharpness of mean(|y - pred| * w) over the predictor parameters, w fixed.
SharpnessReport weighted_target_sharpness(Predictor& f, const Batch& batch, const Array& weights,
                                          const LanczosOptions& opt = {});

/// Average over candidates of the in-mask indicator M for every (row, step).
Array mean_in_mask(const MaskSet& masks, std::size_t rows, std::size_t series, std::size_t horizon);

}  // namespace scam
