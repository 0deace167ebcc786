#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "scam/errors.hpp"
#include "scam/scam_loss.hpp"
#include "scam/sharpness.hpp"

using namespace scam;
using scam::testing::random_array;

namespace {

// L = 1/2 theta^T A theta, so the gradient is A theta.
HvpContext quadratic(const Eigen::MatrixXd& a, std::vector<ParameterSegment> segments = {}, double scale = 1.0) {
  std::vector<double> theta(a.rows(), 0.3);
  auto grad = [a, scale](std::span<const double> th) {
    Eigen::VectorXd t = Eigen::Map<const Eigen::VectorXd>(th.data(), static_cast<long>(th.size()));
    Eigen::VectorXd g = scale * (a * t);
    return std::vector<double>(g.data(), g.data() + g.size());
  };
  return HvpContext(theta, grad, std::move(segments));
}

Eigen::MatrixXd random_symmetric(std::mt19937_64& rng, int n) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m(i, j) = g(rng);
  return (m + m.transpose()) / 2.0;
}

double largest_eig(const Eigen::MatrixXd& a) {
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(a).eigenvalues().maxCoeff();
}

}  // namespace

TEST_CASE("hvp on a diagonal quadratic") {
  Eigen::MatrixXd a = Eigen::Vector3d(1, 2, 5).asDiagonal();
  auto ctx = quadratic(a);
  const auto hv = ctx.hvp(std::vector<double>{0, 0, 1});
  CHECK(std::fabs(hv[0]) < 1e-6);
  CHECK(std::fabs(hv[1]) < 1e-6);
  CHECK(std::fabs(hv[2] - 5.0) < 1e-6);
  CHECK_THROWS_AS(ctx.hvp(std::vector<double>{0, 0, 0}), ContractError);

  auto bad = HvpContext({1.0}, [](std::span<const double>) { return std::vector<double>{NAN}; });
  CHECK_THROWS_AS(bad.hvp(std::vector<double>{1.0}), ContractError);
}

TEST_CASE("hvp is linear and symmetric on a model loss") {
  PredictorConfig cfg;
  cfg.lookback = 8;
  cfg.horizon = 4;
  cfg.hidden = 6;
  Predictor f(cfg, 2);
  std::mt19937_64 rng(3);
  const Array x = random_array({5, 8}, rng), y = random_array({5, 4}, rng);
  const std::vector<std::size_t> ch(5, 0);
  // a smooth loss so that finite differences are well conditioned
  auto ctx = make_hvp_context(f.components(), [&](Tape& t) {
    Var d = sub(f.forward(t, x, ch, false), t.constant(y));
    return mean(mul(d, d));
  });
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> u(ctx.dim()), v(ctx.dim());
  for (auto& e : u) e = g(rng);
  for (auto& e : v) e = g(rng);

  const auto hv = ctx.hvp(v);
  std::vector<double> v3(v);
  for (auto& e : v3) e *= 3.0;
  const auto h3 = ctx.hvp(v3);
  for (std::size_t i = 0; i < hv.size(); ++i) CHECK(std::fabs(h3[i] - 3.0 * hv[i]) <= 1e-5 * (std::fabs(3.0 * hv[i]) + 1e-8));

  const auto hu = ctx.hvp(u);
  double uhv = 0, vhu = 0;
  for (std::size_t i = 0; i < u.size(); ++i) uhv += u[i] * hv[i], vhu += v[i] * hu[i];
  CHECK(std::fabs(uhv - vhu) / std::max(std::fabs(uhv), std::fabs(vhu)) < 1e-4);

  // the model parameters are left untouched
  auto before = f.parameters()[0].tensor->value;
  ctx.hvp(u);
  CHECK(f.parameters()[0].tensor->value == before);
}

TEST_CASE("lambda_max on quadratics") {
  Eigen::MatrixXd a = Eigen::Vector3d(1, 2, 5).asDiagonal();
  auto r = lambda_max(quadratic(a));
  CHECK(std::fabs(r.value - 5.0) / 5.0 < 1e-3);
  CHECK(r.converged);

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = random_symmetric(rng, 20);
    const double oracle = largest_eig(m);
    LanczosOptions opt;
    opt.seed = static_cast<std::uint64_t>(trial);
    const auto res = lambda_max(quadratic(m), opt);
    CHECK(std::fabs(res.value - oracle) / std::fabs(oracle) < 1e-3);
    // Ritz values only grow, so the answer dominates every intermediate one
    for (double h : res.history) CHECK(res.value >= h - 1e-4 * std::fabs(res.value));

    const auto scaled = lambda_max(quadratic(m, {}, 7.5), opt);
    CHECK(std::fabs(scaled.value - 7.5 * res.value) / std::fabs(7.5 * res.value) < 1e-3);
  }
}

TEST_CASE("component sharpness on a block diagonal quadratic") {
  std::mt19937_64 rng(5);
  const auto a1 = random_symmetric(rng, 6);
  const auto a2 = random_symmetric(rng, 9);
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(15, 15);
  a.topLeftCorner(6, 6) = a1;
  a.bottomRightCorner(9, 9) = a2;
  auto ctx = quadratic(a, {{"first", 0, 6}, {"second", 6, 15}});
  CHECK(std::fabs(component_sharpness(ctx, ctx.segments()[0]).value - largest_eig(a1)) < 1e-3 * std::fabs(largest_eig(a1)));
  CHECK(std::fabs(component_sharpness(ctx, ctx.segments()[1]).value - largest_eig(a2)) < 1e-3 * std::fabs(largest_eig(a2)));
  CHECK(component_sharpness(ctx, ctx.whole()).value == lambda_max(ctx).value);
  CHECK_THROWS_AS(component_sharpness(ctx, {"empty", 3, 3}), ContractError);

  auto report = sharpness_report(ctx).to_json();
  CHECK(report["per_component"].contains("second"));
  CHECK(report.contains("converged"));
}

TEST_CASE("component sharpness matches a dense finite-difference Hessian") {
  PredictorConfig cfg;
  cfg.lookback = 8;
  cfg.horizon = 4;
  cfg.hidden = 8;
  cfg.snr = SnrPlacement::none;
  Predictor f(cfg, 6);
  CHECK(parameter_count(f.parameters()) <= 200);
  std::mt19937_64 rng(6);
  const Array x = random_array({6, 8}, rng), y = random_array({6, 4}, rng);
  const std::vector<std::size_t> ch(6, 0);
  auto ctx = make_hvp_context(f.components(), [&](Tape& t) {
    Var d = sub(f.forward(t, x, ch, false), t.constant(y));
    return mean(mul(d, d));
  });
  for (const auto& seg : ctx.segments()) {
    const long n = static_cast<long>(seg.size());
    Eigen::MatrixXd h(n, n);
    for (long j = 0; j < n; ++j) {
      std::vector<double> e(ctx.dim(), 0.0);
      e[seg.begin + static_cast<std::size_t>(j)] = 1.0;
      const auto col = ctx.hvp(e);
      for (long i = 0; i < n; ++i) h(i, j) = col[seg.begin + static_cast<std::size_t>(i)];
    }
    const double oracle = largest_eig((h + h.transpose()) / 2.0);
    const double got = component_sharpness(ctx, seg).value;
    CHECK(std::fabs(got - oracle) / std::fabs(oracle) < 1e-2);
  }
}

TEST_CASE("kl alignment") {
  auto a = ChannelHistogram::from_masses({0, 1, 2}, {0.9, 0.1});
  auto b = ChannelHistogram::from_masses({0, 1, 2}, {0.1, 0.9});
  CHECK(std::fabs(kl_alignment(a, b) - 0.8 * std::log(9.0)) < 1e-9);
  CHECK(kl_alignment(a, b) == kl_alignment(b, a));
  CHECK(kl_alignment(a, a) == 0.0);
  auto c = ChannelHistogram::from_masses({0, 1, 3}, {0.5, 0.5});
  CHECK_THROWS_AS(kl_alignment(a, c), ContractError);

  std::mt19937_64 rng(7);
  std::normal_distribution<double> n1(0, 1), n2(0.5, 2);
  std::vector<std::vector<double>> samples(2);
  for (int i = 0; i < 5000; ++i) samples[0].push_back(n1(rng)), samples[1].push_back(n2(rng));
  auto hs = shared_histograms(samples);
  CHECK(hs[0].masses.size() == kHistogramBins);
  CHECK(hs[0].edges == hs[1].edges);
  double total = 0;
  for (double m : hs[1].masses) {
    total += m;
    CHECK(m >= ChannelHistogram::kMassFloor);
  }
  CHECK(std::fabs(total - 1.0) < 1e-9);
  CHECK(kl_alignment(hs[0], hs[1]) > 0.0);
  CHECK(kl_alignment(hs[0], hs[1]) == kl_alignment(hs[1], hs[0]));
}
