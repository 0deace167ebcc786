#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "scam/errors.hpp"
#include "scam/scam_loss.hpp"

using namespace scam;
using scam::testing::random_array;

namespace {

double eval(double rec, double pred, double y, bool masked) {
  Tape t;
  Var r = t.constant(Array::scalar(rec)), p = t.constant(Array::scalar(pred)), l = t.constant(Array::scalar(y));
  if (!masked) return co_objective_loss(r, p, l).value().item();
  return scam_masked_loss(r, p, l, compute_masks(r.value(), p.value(), l.value())).value().item();
}

// Random triples where a quarter of the points carry an exact tie of some kind.
void random_triples(std::mt19937_64& rng, std::size_t n, Array& rec, Array& pred, Array& y) {
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  rec = Array({n}), pred = Array({n}), y = Array({n});
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = u(rng);
    pred[i] = u(rng);
    rec[i] = u(rng);
    switch (rng() % 8) {
      case 0: rec[i] = pred[i]; break;
      case 1: rec[i] = y[i]; break;
      case 2: pred[i] = y[i]; break;
      case 3: rec[i] = pred[i] = y[i]; break;
      default: break;
    }
  }
}

}  // namespace

TEST_CASE("mask examples") {
  auto one = [](double rec, double pred, double y) {
    return compute_masks(Array::scalar(rec), Array::scalar(pred), Array::scalar(y));
  };
  auto a = one(0.5, 0.0, 1.0);
  CHECK(a.m[0] == -0.25);
  CHECK(a.M[0] == 0.0);
  auto b = one(2.0, 0.0, 1.0);
  CHECK(b.m[0] == 2.0);
  CHECK(b.M[0] == 1.0);
  CHECK(b.M_lt[0] == 0.0);
  auto c = compute_masks(Array::vector({1, 2, 3}), Array::vector({1, 2, 3}), Array::vector({0, 5, -1}));
  for (double v : c.M.data()) CHECK(v == 0.0);
  // equal distances resolve to the reconstruction branch
  auto d = one(1.0, 0.0, 0.0);
  CHECK(d.M[0] == 1.0);
  CHECK(d.M_lt[0] == 0.0);

  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(one(nan, 0.0, 1.0), ContractError);
  CHECK_THROWS_AS(compute_masks(Array({2}), Array({3}), Array({2})), DimensionError);
}

TEST_CASE("co-objective and masked loss examples") {
  CHECK(eval(0.7, 0.7, 0.7, false) == 0.0);
  CHECK(eval(2.0, 0.0, 1.0, false) == 3.0);
  CHECK(eval(2.0, 0.0, 1.0, true) == 2.0);
  CHECK(eval(2.0, 3.0, 0.0, true) == 3.0);

  // vacuous masks: the masked loss is the plain supervised loss
  Tape t;
  std::mt19937_64 rng(1);
  Var y = t.constant(random_array({4, 5}, rng)), p = t.constant(random_array({4, 5}, rng));
  Var r = t.constant(random_array({4, 5}, rng));
  MaskSet none{Array({4, 5}), Array({4, 5}, 0.0), Array({4, 5}, 0.0)};
  CHECK(scam_masked_loss(r, p, y, none).value().item() == supervised_loss(p, y).value().item());
}

TEST_CASE("identity holds pointwise including ties") {
  CHECK(identity_discrepancy(0.5, -0.5) == 0.0);
  CHECK(identity_discrepancy(2.0, 1.0) == 0.0);
  std::mt19937_64 rng(2);
  Array rec, pred, y;
  random_triples(rng, 1000000, rec, pred, y);
  CHECK(loss_identity_check(rec, pred, y) < 1e-12);

  std::uniform_real_distribution<double> u(-3.0, 3.0);
  double worst = 0.0;
  for (int i = 0; i < 1000000; ++i) worst = std::max(worst, identity_discrepancy(u(rng), u(rng)));
  CHECK(worst < 1e-12);
}

TEST_CASE("breakdown components add up to the co-objective") {
  auto single = loss_breakdown(Array::scalar(2.0), Array::scalar(0.0), Array::scalar(1.0),
                               compute_masks(Array::scalar(2.0), Array::scalar(0.0), Array::scalar(1.0)));
  CHECK(single.rec_corrected == 2.0);
  CHECK(single.pred_corrected == 0.0);
  CHECK(single.sup_in_mask == 1.0);
  CHECK(single.sup_out_mask == 0.0);
  CHECK(single.total() == 3.0);

  std::mt19937_64 rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    Array rec, pred, y;
    random_triples(rng, 500, rec, pred, y);
    auto masks = compute_masks(rec, pred, y);
    auto b = loss_breakdown(rec, pred, y, masks);
    Tape t;
    const double co = co_objective_loss(t.constant(rec), t.constant(pred), t.constant(y)).value().item();
    CHECK(std::fabs(b.total() - co) < 1e-10);
    CHECK(std::fabs(b.l_rec + b.l_pred - co) < 1e-10);
    CHECK(b.rec_corrected >= 0.0);
    CHECK(b.pred_corrected >= 0.0);
  }

  // rec = y forces m = 0, so only the out-of-mask supervised part survives
  const Array yy = random_array({30}, rng), pp = random_array({30}, rng);
  auto b = loss_breakdown(yy, pp, yy, compute_masks(yy, pp, yy));
  CHECK(b.rec_corrected == 0.0);
  CHECK(b.pred_corrected == 0.0);
  CHECK(b.sup_in_mask == 0.0);
  CHECK(b.sup_out_mask > 0.0);
}

TEST_CASE("masked loss is bounded by co-objective plus target loss") {
  std::mt19937_64 rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    Array rec, pred, y;
    random_triples(rng, 200, rec, pred, y);
    Tape t;
    Var r = t.constant(rec), p = t.constant(pred), l = t.constant(y);
    const double masked = scam_masked_loss(r, p, l, compute_masks(rec, pred, y)).value().item();
    const double bound = co_objective_loss(r, p, l).value().item() + supervised_loss(p, l).value().item();
    CHECK(masked <= bound + 1e-15);
  }
}

TEST_CASE("masks are scale covariant") {
  std::mt19937_64 rng(5);
  Array rec, pred, y;
  random_triples(rng, 1000, rec, pred, y);
  auto base = compute_masks(rec, pred, y);
  for (double c : {0.5, 3.0, 1e3}) {
    Array r2 = rec, p2 = pred, y2 = y;
    for (auto* a : {&r2, &p2, &y2})
      for (auto& v : a->data()) v *= c;
    auto s = compute_masks(r2, p2, y2);
    CHECK(s.M == base.M);
    CHECK(s.M_lt == base.M_lt);
  }
}

TEST_CASE("masked loss routes gradients by mask") {
  std::mt19937_64 rng(6);
  Array rec = random_array({200}, rng), pred = random_array({200}, rng), y = random_array({200}, rng);
  Tape t;
  Var r = t.leaf(rec), p = t.leaf(pred), l = t.constant(y);
  const auto masks = compute_masks(rec, pred, y);
  t.backward(scam_masked_loss(r, p, l, masks));
  const Array gr = r.grad(), gp = p.grad();

  // finite differences with the masks recomputed at every probe
  auto value = [&](const Array& rv, const Array& pv) {
    Tape u;
    return scam_masked_loss(u.constant(rv), u.constant(pv), u.constant(y), compute_masks(rv, pv, y)).value().item();
  };
  const double h = 1e-7;
  std::size_t checked = 0;
  for (std::size_t i = 0; i < 200; ++i) {
    const double a = std::fabs(rec[i] - pred[i]), b = std::fabs(rec[i] - y[i]);
    const bool near_boundary = a < 1e-3 || b < 1e-3 || std::fabs(a - b) < 1e-3 || std::fabs(y[i] - pred[i]) < 1e-3;
    if (masks.M[i] == 0.0) CHECK(gr[i] == 0.0);
    if (masks.M[i] == 1.0 && masks.M_lt[i] == 0.0) CHECK(gp[i] == 0.0);
    if (near_boundary) continue;
    Array rp = rec, rm = rec, pp = pred, pm = pred;
    rp[i] += h, rm[i] -= h, pp[i] += h, pm[i] -= h;
    CHECK(std::fabs((value(rp, pred) - value(rm, pred)) / (2 * h) - gr[i]) < 1e-6);
    CHECK(std::fabs((value(rec, pp) - value(rec, pm)) / (2 * h) - gp[i]) < 1e-6);
    ++checked;
  }
  CHECK(checked > 150);
}

TEST_CASE("aggregation over candidate series") {
  Tape t;
  std::mt19937_64 rng(7);
  const Array y = random_array({3, 6}, rng), pred = random_array({3, 6}, rng);
  Array rec({3, 2, 6});
  for (auto& v : rec.data()) v = std::uniform_real_distribution<double>(-2, 2)(rng);

  // expanded mean equals the mean of per-candidate losses
  Var expanded = co_objective_loss(t.constant(rec), expand_series(t.constant(pred), 2), expand_series(t.constant(y), 2));
  std::vector<Var> per;
  std::vector<double> values;
  for (std::size_t s = 0; s < 2; ++s) {
    Array one({3, 6});
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t h = 0; h < 6; ++h) one.at(b, h) = rec[(b * 2 + s) * 6 + h];
    per.push_back(co_objective_loss(t.constant(one), t.constant(pred), t.constant(y)));
    values.push_back(per.back().value().item());
  }
  CHECK(std::fabs(aggregate_over_series(per).value().item() - expanded.value().item()) < 1e-14);
  CHECK(aggregate_over_series(values) == (values[0] + values[1]) / 2.0);
  CHECK(aggregate_over_series(std::vector<Var>{per[0]}).value().item() == values[0]);

  // identical candidates reduce to the single-series loss
  Var same = expand_series(t.constant(pred), 8);
  const double eight = co_objective_loss(same, expand_series(t.constant(pred), 8), expand_series(t.constant(y), 8))
                           .value()
                           .item();
  CHECK(std::fabs(eight - co_objective_loss(t.constant(pred), t.constant(pred), t.constant(y)).value().item()) < 1e-14);
  CHECK(expand_series(pred, 3) == expand_series(t.constant(pred), 3).value());
  CHECK_THROWS_AS(aggregate_over_series(std::vector<double>{}), ContractError);
}

TEST_CASE("mask dump") {
  const auto path = std::filesystem::temp_directory_path() / "scam_mask_dump.csv";
  const std::vector<double> y{1.0, 0.0}, pred{0.0, 3.0}, rec{2.0, 2.0};
  write_mask_dump(path, y, pred, rec, 40);
  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == "t,y,y_hat,y_tilde,m,M,M_lt\n40,1,0,2,2,1,0\n41,0,3,2,-2,0,1\n");
}
