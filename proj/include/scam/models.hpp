#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "scam/autodiff.hpp"

namespace scam {

struct NamedTensor {
  std::string name;
  TensorPtr tensor;
};

/// Non-trainable state that still has to survive a checkpoint.
struct NamedBuffer {
  std::string name;
  Array* buffer;
};

std::size_t parameter_count(const std::vector<NamedTensor>& params);

// ---- spectral norm ------------------------------------------------------

/// Largest singular value of a matrix by power iteration on W^T W from a
/// seeded random start. A zero matrix yields the floor value.
double spectral_norm(const Array& w, int iterations = 100, std::uint64_t seed = 0);

inline constexpr double kSigmaFloor = 1e-12;
inline constexpr int kInitialPowerIterations = 50;
// After the minimum count, the tracked power iteration keeps going until
// sigma moves by less than this relative amount, up to the cap.
inline constexpr double kPowerIterationTol = 1e-10;
inline constexpr int kMaxPowerIterations = 5000;

// ---- layers -------------------------------------------------------------

/// y = x W^T + b. With spectral normalisation the weight used in the forward
/// pass is gamma * W / sigma_max(W), where sigma_max is tracked by a persistent
/// power iteration that advances at least once per training forward pass and
/// continues from the previous singular vectors until sigma has settled.
class LinearLayer {
 public:
  LinearLayer() = default;
  LinearLayer(std::string name, std::size_t in_features, std::size_t out_features, bool spectral_norm,
              std::mt19937_64& rng);

  /// x: R x in -> R x out.
  Var forward(Tape& tape, const Var& x, bool training);
  /// The weight as seen by forward(); advances the power iteration when training.
  Var effective_weight(Tape& tape, bool training);
  Array effective_weight_value() const;

  /// Runs `min_iterations` steps, then more until sigma settles (see kPowerIterationTol).
  void power_iterate(int min_iterations);
  double sigma_estimate() const;

  bool spectral_normalized() const { return snr_; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  const TensorPtr& weight() const { return weight_; }
  const TensorPtr& bias() const { return bias_; }
  const TensorPtr& gamma() const { return gamma_; }

  void collect(std::vector<NamedTensor>& params, std::vector<NamedBuffer>& buffers);
  std::vector<NamedTensor> parameters() const;

 private:
  std::string name_;
  std::size_t in_ = 0;
  std::size_t out_ = 0;
  bool snr_ = false;
  TensorPtr weight_;
  TensorPtr bias_;
  TensorPtr gamma_;
  Array u_;  // left singular vector estimate (out)
  Array v_;  // right singular vector estimate (in)
};

// ---- RevIN --------------------------------------------------------------

struct RevInStats {
  std::vector<double> mean;
  std::vector<double> stdev;
};

/// Reversible per-window instance normalisation. Statistics come from the
/// input rows only, so they enter the graph as constants.
class RevIn {
 public:
  RevIn() = default;
  RevIn(std::size_t channels, bool affine, double eps = 1e-5);

  RevInStats statistics(const Array& x) const;
  Var normalize(Tape& tape, const Array& x, const RevInStats& stats, std::span<const std::size_t> channel) const;
  Var denormalize(Tape& tape, const Var& y, const RevInStats& stats, std::span<const std::size_t> channel) const;

  bool affine() const { return affine_; }
  double eps() const { return eps_; }
  void collect(std::vector<NamedTensor>& params) const;

 private:
  Var expand_channel_param(Tape& tape, const TensorPtr& p, std::span<const std::size_t> channel,
                           std::size_t rows, std::size_t width) const;

  std::size_t channels_ = 1;
  bool affine_ = false;
  double eps_ = 1e-5;
  TensorPtr weight_;
  TensorPtr bias_;
};

// ---- predictor f(.; theta) ----------------------------------------------

enum class Backbone { mlp, linear };
enum class SnrPlacement { none, pre, post, both };

std::string to_string(Backbone b);
std::string to_string(SnrPlacement p);
Backbone parse_backbone(const std::string& s);
SnrPlacement parse_snr(const std::string& s);

struct PredictorConfig {
  Backbone backbone = Backbone::mlp;
  std::size_t lookback = 96;
  std::size_t horizon = 96;
  std::size_t hidden = 512;
  SnrPlacement snr = SnrPlacement::both;
  bool revin_affine = false;
  std::size_t channels = 1;

  void validate() const;
};

/// A named slice of the flattened parameter vector (embedding / hidden / projector).
struct ParameterGroup {
  std::string name;
  std::vector<NamedTensor> params;
};

/// RevIN -> Linear -> ReLU -> Linear -> RevIN^-1 (mlp), or RevIN -> Linear -> RevIN^-1 (linear).
/// Channels are handled independently: every input row is one univariate window.
class Predictor {
 public:
  Predictor(const PredictorConfig& cfg, std::uint64_t seed);

  /// x: R x L -> R x H. `channel` gives each row's channel (used only by affine RevIN).
  Var forward(Tape& tape, const Array& x, std::span<const std::size_t> channel, bool training);
  Array predict(const Array& x, std::span<const std::size_t> channel);

  const PredictorConfig& config() const { return cfg_; }
  std::vector<NamedTensor> parameters() const;
  std::vector<NamedBuffer> buffers();
  std::vector<ParameterGroup> components() const;
  std::vector<LinearLayer*> layers();

 private:
  PredictorConfig cfg_;
  RevIn revin_;
  LinearLayer first_;
  LinearLayer second_;  // unused for the linear backbone
};

// ---- reconstruction network g(.; phi) ------------------------------------

struct ReconstructionConfig {
  std::size_t horizon = 96;
  std::size_t conv_layers = 4;
  std::size_t dim_multiplier = 4;
  std::size_t hidden_dim = 128;
  std::size_t series = 8;

  void validate() const;
  /// Features each conv layer contributes per output position.
  std::size_t features_per_layer() const { return dim_multiplier / 2; }
  std::size_t feature_dim() const { return conv_layers * features_per_layer(); }
  std::size_t conv_channels(std::size_t layer) const { return dim_multiplier << layer; }
  std::size_t conv_length(std::size_t layer) const { return horizon >> (layer + 1); }
};

struct ConvLayer {
  TensorPtr weight;  // C_out x C_in x 3
  TensorPtr bias;    // C_out
};

/// Conv-concat encoder (kernel 3, stride 2, padding 1, channels doubling), a
/// point-wise FFN, and S parallel point-wise heads producing S candidate
/// reconstructions of the same label window.
class ReconstructionNet {
 public:
  ReconstructionNet(const ReconstructionConfig& cfg, std::uint64_t seed);

  struct Outputs {
    Var features;        // B x H x d_feat
    Var reconstruction;  // B x S x H
  };

  /// y: B x H -> B x H x d_feat. Layer l's features occupy columns
  /// [l * m/2, (l+1) * m/2); output position j reads conv position floor(j * T_l / H).
  Var encode(Tape& tape, const Var& y) const;
  Outputs forward(Tape& tape, const Var& y) const;
  /// Diagnostic readout applied straight to the encoder features, bypassing the FFN.
  /// Features are detached, so training this readout never moves phi.
  Var intermediate(Tape& tape, const Var& features) const;

  /// Copies the first head's weights into every other head.
  void tie_heads();

  const ReconstructionConfig& config() const { return cfg_; }
  std::vector<NamedTensor> parameters() const;  // phi (excludes the diagnostic readout)
  std::vector<NamedTensor> readout_parameters() const;
  std::vector<NamedBuffer> buffers();

 private:
  ReconstructionConfig cfg_;
  std::vector<ConvLayer> convs_;
  LinearLayer ffn_in_;
  LinearLayer heads_;
  LinearLayer readout_;
};

}  // namespace scam
