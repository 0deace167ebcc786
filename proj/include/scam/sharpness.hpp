#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "scam/models.hpp"

namespace scam {

/// Half-open slice [begin, end) of the flattened parameter vector.
struct ParameterSegment {
  std::string name;
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
};

/// Loss curvature probe around a fixed parameter vector. Hessian-vector
/// products come from central differences of first-order gradients.
class HvpContext {
 public:
  using GradientFn = std::function<std::vector<double>(std::span<const double> theta)>;

  HvpContext(std::vector<double> theta, GradientFn gradient, std::vector<ParameterSegment> segments = {});

  std::vector<double> hvp(std::span<const double> v) const;
  double epsilon() const;

  std::size_t dim() const { return theta_.size(); }
  const std::vector<double>& theta() const { return theta_; }
  const std::vector<ParameterSegment>& segments() const { return segments_; }
  ParameterSegment whole() const { return {"total", 0, theta_.size()}; }

 private:
  std::vector<double> theta_;
  GradientFn gradient_;
  std::vector<ParameterSegment> segments_;
};

/// Builds a context over model parameters. The loss closure must rebuild the
/// scalar from the current tensor values; the tensors are restored afterwards.
HvpContext make_hvp_context(const std::vector<ParameterGroup>& groups, std::function<Var(Tape&)> loss);

struct SharpnessResult {
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
  std::vector<double> history;  // largest Ritz value after each iteration
};

struct LanczosOptions {
  int max_iterations = 100;
  double tolerance = 1e-4;
  std::uint64_t seed = 0;
};

/// Largest Hessian eigenvalue by Lanczos with full reorthogonalisation. Stops
/// once the Ritz residual |beta_k s_k| falls below tolerance * |value|.
SharpnessResult lambda_max(const HvpContext& ctx, const LanczosOptions& opt = {});
/// Same, with probe vectors confined to one segment.
SharpnessResult component_sharpness(const HvpContext& ctx, const ParameterSegment& segment,
                                    const LanczosOptions& opt = {});

struct SharpnessReport {
  SharpnessResult total;
  std::vector<std::pair<std::string, SharpnessResult>> per_component;

  nlohmann::json to_json() const;
};

SharpnessReport sharpness_report(const HvpContext& ctx, const LanczosOptions& opt = {});

/// Probability masses over shared bins, floored at kMassFloor and renormalised.
struct ChannelHistogram {
  std::vector<double> edges;
  std::vector<double> masses;

  static constexpr double kMassFloor = 1e-10;
  static ChannelHistogram from_masses(std::vector<double> edges, std::vector<double> masses);
};

/// One histogram per sample set over kBins uniform bins spanning their pooled range.
inline constexpr std::size_t kHistogramBins = 64;
std::vector<ChannelHistogram> shared_histograms(const std::vector<std::vector<double>>& samples,
                                                std::size_t bins = kHistogramBins);

/// Symmetrised KL divergence, (KL(a||b) + KL(b||a)) / 2.
double kl_alignment(const ChannelHistogram& a, const ChannelHistogram& b);

}  // namespace scam
