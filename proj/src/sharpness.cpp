#include "scam/sharpness.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "scam/errors.hpp"

namespace scam {

namespace {

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

HvpContext::HvpContext(std::vector<double> theta, GradientFn gradient, std::vector<ParameterSegment> segments)
    : theta_(std::move(theta)), gradient_(std::move(gradient)), segments_(std::move(segments)) {
  for (double v : theta_) {
    if (!std::isfinite(v)) throw ContractError("parameter vector is not finite");
  }
  for (const auto& s : segments_) {
    if (s.begin > s.end || s.end > theta_.size()) throw ContractError("segment '" + s.name + "' out of range");
  }
}

double HvpContext::epsilon() const { return 1e-4 * std::max(1.0, norm(theta_)); }

std::vector<double> HvpContext::hvp(std::span<const double> v) const {
  if (v.size() != theta_.size()) throw DimensionError("hvp: probe vector has the wrong length");
  const double vn = norm(v);
  if (!(vn > 0.0)) throw ContractError("hvp: probe vector must be non-zero");
  const double eps = epsilon();
  std::vector<double> plus(theta_), minus(theta_);
  for (std::size_t i = 0; i < v.size(); ++i) {
    plus[i] += eps * v[i] / vn;
    minus[i] -= eps * v[i] / vn;
  }
  const auto gp = gradient_(plus);
  const auto gm = gradient_(minus);
  if (gp.size() != theta_.size() || gm.size() != theta_.size()) throw DimensionError("hvp: gradient length");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = (gp[i] - gm[i]) * vn / (2.0 * eps);
    if (!std::isfinite(out[i])) throw ContractError("hvp: non-finite gradient");
  }
  return out;
}

HvpContext make_hvp_context(const std::vector<ParameterGroup>& groups, std::function<Var(Tape&)> loss) {
  std::vector<TensorPtr> params;
  std::vector<ParameterSegment> segments;
  std::vector<double> theta;
  for (const auto& g : groups) {
    ParameterSegment seg{g.name, theta.size(), theta.size()};
    for (const auto& p : g.params) {
      params.push_back(p.tensor);
      for (double v : p.tensor->value.data()) theta.push_back(v);
    }
    seg.end = theta.size();
    segments.push_back(seg);
  }
  auto gradient = [params, loss](std::span<const double> th) {
    std::vector<Array> saved;
    std::size_t k = 0;
    for (const auto& p : params) {
      saved.push_back(p->value);
      for (auto& v : p->value.data()) v = th[k++];
      p->zero_grad();
    }
    {
      Tape tape;
      tape.backward(loss(tape));
    }
    std::vector<double> g;
    g.reserve(th.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& p = params[i];
      if (p->has_grad) {
        for (double v : p->grad.data()) g.push_back(v);
      } else {
        g.insert(g.end(), p->value.size(), 0.0);
      }
      p->value = std::move(saved[i]);
      p->zero_grad();
    }
    return g;
  };
  return HvpContext(std::move(theta), gradient, std::move(segments));
}

SharpnessResult component_sharpness(const HvpContext& ctx, const ParameterSegment& seg, const LanczosOptions& opt) {
  if (seg.size() == 0) throw ContractError("component_sharpness: empty segment '" + seg.name + "'");
  if (seg.end > ctx.dim()) throw ContractError("component_sharpness: segment '" + seg.name + "' out of range");
  const std::size_t n = seg.size();
  const int max_k = std::min<int>(opt.max_iterations, static_cast<int>(n));

  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<std::vector<double>> q;
  std::vector<double> start(n);
  for (auto& v : start) v = g(rng);
  const double sn = norm(start);
  for (auto& v : start) v /= sn;
  q.push_back(start);

  std::vector<double> alpha, beta;
  std::vector<double> full(ctx.dim(), 0.0);
  SharpnessResult res;
  for (int k = 0; k < max_k; ++k) {
    std::fill(full.begin(), full.end(), 0.0);
    std::copy(q[k].begin(), q[k].end(), full.begin() + static_cast<long>(seg.begin));
    const auto hv = ctx.hvp(full);
    std::vector<double> w(hv.begin() + static_cast<long>(seg.begin), hv.begin() + static_cast<long>(seg.end));
    alpha.push_back(dot(w, q[k]));
    // full reorthogonalisation, twice for stability
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& qi : q) {
        const double c = dot(w, qi);
        for (std::size_t i = 0; i < n; ++i) w[i] -= c * qi[i];
      }
    }
    const double b = norm(w);

    const int m = k + 1;
    Eigen::VectorXd diag(m), off(std::max(m - 1, 0));
    for (int i = 0; i < m; ++i) diag(i) = alpha[i];
    for (int i = 0; i + 1 < m; ++i) off(i) = beta[i];
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es;
    es.computeFromTridiagonal(diag, off);
    const double theta = es.eigenvalues()(m - 1);
    const double last = es.eigenvectors()(m - 1, m - 1);
    res.value = theta;
    res.iterations = m;
    res.history.push_back(theta);

    const double scale_ref = std::max(std::fabs(theta), 1e-300);
    if (std::fabs(b * last) <= opt.tolerance * scale_ref || b <= 1e-12 * std::max(1.0, std::fabs(theta)) ||
        m == static_cast<int>(n)) {
      res.converged = true;
      break;
    }
    beta.push_back(b);
    for (auto& v : w) v /= b;
    q.push_back(std::move(w));
  }
  return res;
}

SharpnessResult lambda_max(const HvpContext& ctx, const LanczosOptions& opt) {
  return component_sharpness(ctx, ctx.whole(), opt);
}

nlohmann::json SharpnessReport::to_json() const {
  nlohmann::json j;
  j["total"] = total.value;
  j["iterations"] = total.iterations;
  j["converged"] = total.converged;
  nlohmann::json comp = nlohmann::json::object();
  for (const auto& [name, r] : per_component) comp[name] = r.value;
  j["per_component"] = comp;
  return j;
}

SharpnessReport sharpness_report(const HvpContext& ctx, const LanczosOptions& opt) {
  SharpnessReport r;
  r.total = lambda_max(ctx, opt);
  for (const auto& s : ctx.segments()) {
    if (s.size() > 0) r.per_component.emplace_back(s.name, component_sharpness(ctx, s, opt));
  }
  return r;
}

ChannelHistogram ChannelHistogram::from_masses(std::vector<double> edges, std::vector<double> masses) {
  if (edges.size() != masses.size() + 1) throw ContractError("histogram needs one more edge than bins");
  double total = 0.0;
  for (auto& m : masses) {
    if (!(m >= 0.0)) throw ContractError("histogram masses must be non-negative");
    m = std::max(m, kMassFloor);
    total += m;
  }
  for (auto& m : masses) m /= total;
  return {std::move(edges), std::move(masses)};
}

std::vector<ChannelHistogram> shared_histograms(const std::vector<std::vector<double>>& samples, std::size_t bins) {
  if (bins < 1) throw ContractError("need at least one bin");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& s : samples) {
    if (s.empty()) throw ContractError("cannot histogram an empty sample");
    for (double v : s) {
      if (!std::isfinite(v)) throw ContractError("non-finite histogram sample");
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (hi == lo) hi = lo + 1.0;
  std::vector<double> edges(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
  std::vector<ChannelHistogram> out;
  for (const auto& s : samples) {
    std::vector<double> counts(bins, 0.0);
    for (double v : s) {
      auto b = static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(bins));
      counts[std::min(b, bins - 1)] += 1.0;
    }
    for (auto& c : counts) c /= static_cast<double>(s.size());
    out.push_back(ChannelHistogram::from_masses(edges, std::move(counts)));
  }
  return out;
}

double kl_alignment(const ChannelHistogram& a, const ChannelHistogram& b) {
  if (a.edges != b.edges || a.masses.size() != b.masses.size()) {
    throw ContractError("kl_alignment: histograms have different bin edges");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.masses.size(); ++i) {
    const double p = a.masses[i], q = b.masses[i];
    s += (p - q) * (std::log(p) - std::log(q));
  }
  return 0.5 * s;
}

}  // namespace scam
