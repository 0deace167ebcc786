#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "doctest.h"
#include "scam/checkpoint.hpp"
#include "scam/errors.hpp"
#include "scam/training.hpp"

using namespace scam;
namespace fs = std::filesystem;

namespace {

PreparedData toy_data(double sigma1, double sigma2, std::size_t length = 1200, std::uint64_t seed = 0) {
  SyntheticConfig s;
  s.sigma1 = sigma1;
  s.sigma2 = sigma2;
  s.length = length;
  s.seed = seed;
  return prepare(make_synthetic(s), {0.6, 0.2, 0.2}, 32, 16);
}

PredictorConfig toy_model() {
  PredictorConfig m;
  m.lookback = 32;
  m.horizon = 16;
  m.hidden = 32;
  return m;
}

ReconstructionConfig toy_recon() {
  ReconstructionConfig r;
  r.horizon = 16;
  r.hidden_dim = 16;
  r.series = 2;
  return r;
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig c;
  c.max_epochs = epochs;
  c.patience = 100;
  c.lr = 3e-3;
  return c;
}

std::vector<Array> values(const std::vector<NamedTensor>& params) {
  std::vector<Array> out;
  for (const auto& p : params) out.push_back(p.tensor->value);
  return out;
}

}  // namespace

TEST_CASE("adam update") {
  auto p = make_parameter(Array::scalar(0.5));
  Adam adam({p}, 1e-3);
  p->ensure_grad()[0] = 1.0;
  CHECK(adam.step());
  CHECK(std::fabs(p->value[0] - (0.5 - 1e-3 / (1.0 + 1e-8))) < 1e-15);

  auto q = make_parameter(Array::vector({1.0, -2.0}));
  Adam still({q}, 1e-3);
  q->ensure_grad();
  still.step();
  CHECK(q->value == Array::vector({1.0, -2.0}));

  // two steps with a constant gradient against the written-out recurrence
  auto r = make_parameter(Array::scalar(0.0));
  Adam two({r}, 0.01);
  const double g = 0.3;
  double m = 0, v = 0, x = 0;
  for (int t = 1; t <= 2; ++t) {
    r->zero_grad();
    r->ensure_grad()[0] = g;
    two.step();
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    x -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    CHECK(std::fabs(r->value[0] - x) < 1e-12);
  }

  auto s = make_parameter(Array::scalar(1.0));
  Adam skip({s}, 1e-3);
  s->ensure_grad()[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_FALSE(skip.step());
  CHECK(s->value[0] == 1.0);
  CHECK(skip.skipped() == 1);

  CHECK_THROWS_AS(make_optimizer("rmsprop", {}, 1e-3), ConfigError);
}

TEST_CASE("config validation and seeds") {
  TrainConfig c;
  c.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = TrainConfig{};
  c.patience = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_mode("scam") == TrainMode::scam);
  CHECK_THROWS_AS(parse_mode("magic"), ConfigError);
  CHECK(derive_seed(1, 1) != derive_seed(1, 2));
  CHECK(derive_seed(1, 1) == derive_seed(1, 1));
}

TEST_CASE("evaluate") {
  auto flat = std::make_shared<const Array>(Array({200, 1}, 0.0));
  auto split = make_windows(flat, 0, 200, 32, 16);
  Predictor f(toy_model(), 0);
  for (auto& p : f.parameters()) p.tensor->value.fill(0.0);
  auto m = evaluate(f, split);
  CHECK(m.mse == 0.0);
  CHECK(m.mae == 0.0);

  auto data = toy_data(1.0, 0.1);
  Predictor g(toy_model(), 1);
  for (const auto* s : {&data.train, &data.val, &data.test}) {
    auto e = evaluate(g, *s);
    CHECK(e.mse >= e.mae * e.mae);
    auto raw = evaluate(g, *s, &data.scaler);
    CHECK(std::fabs(raw.mse - e.mse * data.scaler.std[0] * data.scaler.std[0]) < 1e-9 * raw.mse);
  }
}

TEST_CASE("supervised training fits a noiseless sinusoid and is deterministic") {
  auto data = toy_data(0.0, 0.0);
  auto cfg = quick(400);  // runs to convergence, stopped by patience
  cfg.patience = 10;
  auto a = train_supervised(data, toy_model(), cfg);
  CHECK(a.test.mse < 0.01);
  auto b = train_supervised(data, toy_model(), cfg);
  CHECK(values(a.predictor->parameters()) == values(b.predictor->parameters()));
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].val.mse == b.records[i].val.mse);
    CHECK(a.records[i].train_loss == b.records[i].train_loss);
  }
}

TEST_CASE("early stopping halts at best epoch plus patience and restores the best state") {
  auto data = toy_data(1.0, 1.0, 800);
  TrainConfig cfg = quick(200);
  cfg.lr = 0.05;
  cfg.patience = 3;
  auto r = train_supervised(data, toy_model(), cfg);
  REQUIRE(r.records.size() < 200);
  CHECK(r.records.size() == r.best_epoch + 3);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& e : r.records) best = std::min(best, e.val.mse);
  CHECK(r.val.mse == best);
  CHECK(r.records[r.best_epoch - 1].test.mse == r.test.mse);
}

TEST_CASE("co-objective with identity reconstruction matches supervised training") {
  auto data = toy_data(0.5, 0.5, 800);
  auto cfg = quick(3);
  auto sup = train_supervised(data, toy_model(), cfg);
  cfg.identity_reconstruction = true;
  auto co = train_co_objective(data, toy_model(), toy_recon(), cfg);
  CHECK(co.reconstruction == nullptr);
  CHECK(values(co.predictor->parameters()) == values(sup.predictor->parameters()));
  for (const auto& e : co.records) CHECK(e.breakdown.l_rec == 0.0);
}

TEST_CASE("co-objective logs decompose and reconstruction loss falls") {
  auto data = toy_data(1.0, 0.1, 1200);
  auto r = train_co_objective(data, toy_model(), toy_recon(), quick(5));
  REQUIRE(r.reconstruction != nullptr);
  for (const auto& e : r.records) {
    CHECK(std::fabs(e.breakdown.total() - e.train_loss) < 1e-8);
    CHECK(std::fabs(e.breakdown.l_rec + e.breakdown.l_pred - e.train_loss) < 1e-8);
  }
  CHECK(r.records.back().breakdown.l_rec < r.records.front().breakdown.l_rec);
}

TEST_CASE("scam routes predictor and reconstruction gradients by mask") {
  auto data = toy_data(1.0, 0.1);
  Predictor f(toy_model(), 3);
  ReconstructionNet g(toy_recon(), 4);
  std::vector<std::size_t> idx{0, 5, 9, 40, 77, 100};
  const Batch b = data.train.gather(idx);

  auto grads = [&](int variant) {
    for (auto& p : f.parameters()) p.tensor->zero_grad();
    for (auto& p : g.parameters()) p.tensor->zero_grad();
    Tape t;
    Var pred = expand_series(f.forward(t, b.x, b.channel, false), 2);
    Var y = expand_series(t.constant(b.y), 2);
    Var rec = g.forward(t, t.constant(b.y)).reconstruction;
    const auto masks = compute_masks(rec.value(), pred.value(), y.value());
    Var loss;
    if (variant == 0) {
      loss = scam_masked_loss(rec, pred, y, masks);
    } else {
      Array w_target(masks.M.shape()), w_pred(masks.M.shape()), w_rec(masks.M.shape());
      for (std::size_t i = 0; i < w_target.size(); ++i) {
        w_target[i] = 1.0 - masks.M[i];
        w_pred[i] = 2.0 * masks.M_lt[i] * masks.M[i];
        w_rec[i] = 2.0 * (1.0 - masks.M_lt[i]) * masks.M[i];
        // variant 1 drops the reconstruction-corrected points, variant 2 the M = 0 points
        const bool corrected = masks.M[i] == 1.0 && masks.M_lt[i] == 0.0;
        if (variant == 1 && corrected) w_rec[i] = 0.0;
        if (variant == 2 && masks.M[i] == 0.0) w_target[i] = 0.0;
      }
      Var terms = add(mul(abs(sub(y, pred)), t.constant(w_target)),
                      add(mul(abs(sub(rec, pred)), t.constant(w_pred)), mul(abs(sub(rec, y)), t.constant(w_rec))));
      loss = mean(terms);
    }
    t.backward(loss);
    std::pair<std::vector<Array>, std::vector<Array>> out;
    for (auto& p : f.parameters()) out.first.push_back(p.tensor->grad);
    for (auto& p : g.parameters()) out.second.push_back(p.tensor->grad);
    return out;
  };
  const auto full = grads(0);
  const auto no_corrected = grads(1);
  const auto no_outside = grads(2);
  CHECK(full.first == no_corrected.first);
  CHECK(full.second == no_outside.second);
}

TEST_CASE("scam training records mask statistics") {
  auto data = toy_data(1.0, 0.1);
  auto cfg = quick(2);
  auto r = train_scam(data, toy_model(), toy_recon(), cfg);
  for (const auto& e : r.records) {
    CHECK(e.in_mask_rate >= e.corrected_rate);
    CHECK(e.in_mask_rate <= 1.0);
  }
  auto tally = tally_masks(*r.predictor, r.reconstruction.get(), data.train);
  double total = 0;
  for (double v : tally.total) total += v;
  CHECK(total == double(data.train.size() * 16 * 2));
  for (std::size_t t = 0; t < tally.total.size(); ++t) CHECK(tally.corrected[t] <= tally.in_mask[t]);
}

TEST_CASE("grid search") {
  auto data = toy_data(1.0, 0.1, 800);
  TrainConfig cfg = quick(1);
  cfg.candidates = 1;
  cfg.inner_max_steps = 60;
  cfg.identity_reconstruction = true;
  auto degenerate = train_grid_search(data, toy_model(), toy_recon(), cfg);
  REQUIRE(degenerate.records.size() == 1);
  CHECK(degenerate.records[0].l_rec == 0.0);
  CHECK(degenerate.records[0].l_pred == degenerate.records[0].l_target);
  CHECK(degenerate.records[0].inner_steps == 60);

  cfg.identity_reconstruction = false;
  cfg.candidates = 6;
  cfg.inner_max_steps = 20;
  cfg.outer_lr = 0.05;
  auto grid = train_grid_search(data, toy_model(), toy_recon(), cfg);
  REQUIRE(grid.records.size() == 6);
  int non_increasing = 0;
  for (std::size_t i = 1; i < grid.records.size(); ++i) non_increasing += grid.records[i].l_rec <= grid.records[i - 1].l_rec;
  CHECK(non_increasing >= 4);
  for (const auto& r : grid.records) CHECK(std::isfinite(r.test.mse));

  const auto path = fs::temp_directory_path() / "scam_grid.csv";
  write_grid_csv(path, grid.records);
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) ++lines;
  CHECK(lines == 7);
}

TEST_CASE("epoch csv and checkpoint round trip") {
  auto data = toy_data(1.0, 0.1, 800);
  auto r = train_supervised(data, toy_model(), quick(2));
  const auto dir = fs::temp_directory_path() / "scam_training_test";
  fs::create_directories(dir);
  write_epochs_csv(dir / "epochs.csv", r.records);
  std::ifstream in(dir / "epochs.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header.rfind("epoch,train_loss", 0) == 0);
  CHECK(header.find("wall_time") != std::string::npos);

  save_checkpoint(dir / "best.ckpt", {{"epoch", r.best_epoch}},
                  checkpoint_blocks(r.predictor->parameters(), r.predictor->buffers()));
  PredictorConfig m = toy_model();
  Predictor back(m, 12345);
  restore(load_checkpoint(dir / "best.ckpt"), back.parameters(), back.buffers());
  auto t = evaluate(back, data.test);
  CHECK(t.mse == r.test.mse);
  CHECK(t.mae == r.test.mae);
}

TEST_CASE("weighted target sharpness") {
  auto data = toy_data(1.0, 0.1, 800);
  Predictor f(toy_model(), 2);
  const Batch b = spread_batch(data.val, 16);
  CHECK(b.rows() == 16);
  LanczosOptions opt;
  opt.max_iterations = 20;
  auto rep = weighted_target_sharpness(f, b, Array(b.y.shape(), 1.0), opt);
  CHECK(std::isfinite(rep.total.value));
  CHECK(rep.per_component.size() == 2);
  CHECK_THROWS_AS(weighted_target_sharpness(f, b, Array(b.y.shape(), 0.0), opt), ContractError);
}
