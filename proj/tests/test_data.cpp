#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "scam/data.hpp"
#include "scam/errors.hpp"

using namespace scam;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& body) {
  const auto dir = fs::temp_directory_path() / "scam_test_data";
  fs::create_directories(dir);
  const auto p = dir / name;
  std::ofstream(p) << body;
  return p;
}

std::shared_ptr<const Array> ramp(std::size_t rows, std::size_t cols) {
  Array a({rows, cols});
  for (std::size_t t = 0; t < rows; ++t)
    for (std::size_t c = 0; c < cols; ++c) a.at(t, c) = static_cast<double>(t * 10 + c);
  return std::make_shared<const Array>(std::move(a));
}

}  // namespace

TEST_CASE("load_csv with a date column") {
  auto p = temp_file("small.csv",
                     "date,HUFL,OT\n2016-07-01 00:00:00,5.8,30.5\n2016-07-01 01:00:00,5.6,27.7\n"
                     "2016-07-01 02:00:00,5.1,27.8\n");
  auto s = load_csv(p, true);
  CHECK(s.length() == 3);
  CHECK(s.channels() == 2);
  CHECK(s.channel_names == std::vector<std::string>{"HUFL", "OT"});
  CHECK(s.timestamps.at(1) == "2016-07-01 01:00:00");
  CHECK(s.values.at(2, 1) == 27.8);

  auto undated = load_csv(temp_file("nodate.csv", "a,b\n1,2\n3,4\n"), false);
  CHECK(undated.values.at(1, 0) == 3.0);
  CHECK(undated.timestamps.empty());
}

TEST_CASE("load_csv errors name the row") {
  auto p = temp_file("bad.csv", "date,a\nd1,1\nd2,2\nd3,3\nd4,4\nd5,abc\nd6,6\n");
  try {
    load_csv(p, true);
    FAIL("expected LoadError");
  } catch (const LoadError& e) {
    CHECK(std::string(e.what()).find("row 5") != std::string::npos);
    CHECK(std::string(e.what()).find("'a'") != std::string::npos);
  }
  CHECK_THROWS_AS(load_csv(temp_file("nan.csv", "a\n1\nnan\n3\n"), false), LoadError);
  CHECK_THROWS_AS(load_csv(temp_file("short.csv", "a\n1\n"), false), LoadError);
  CHECK_THROWS_AS(load_csv("/nonexistent/file.csv", false), LoadError);
}

TEST_CASE("write_csv round-trips") {
  SyntheticConfig cfg;
  cfg.length = 50;
  auto s = make_synthetic(cfg);
  const auto dir = fs::temp_directory_path() / "scam_test_data";
  fs::create_directories(dir);
  write_csv(dir / "synth.csv", s);
  auto back = load_csv(dir / "synth.csv", true);
  CHECK(back.values == s.values);
  CHECK(back.timestamps == s.timestamps);
}

TEST_CASE("split boundaries") {
  auto b = split(100, {0.6, 0.2, 0.2}, 3, 2);
  CHECK(b.train_end == 60);
  CHECK(b.val_end == 80);
  CHECK(b.total == 100);
  auto ett = split(17420, {0.6, 0.2, 0.2}, 96, 96);
  CHECK(ett.train_end == 10452);
  CHECK(ett.val_end == 13936);
  CHECK_THROWS_AS(split(100, {0.5, 0.5, 0.0}, 3, 2), ConfigError);
  CHECK_THROWS_AS(split(100, {0.5, 0.3, 0.3}, 3, 2), ConfigError);
  CHECK_THROWS_AS(split(20, {0.6, 0.2, 0.2}, 8, 8), ConfigError);
}

TEST_CASE("scaler") {
  Array a({2, 1}, {1.0, 3.0});
  auto s = Scaler::fit(a, 0, 2);
  CHECK(s.mean[0] == 2.0);
  CHECK(s.std[0] == 1.0);
  CHECK(s.apply(a) == Array({2, 1}, {-1.0, 1.0}));

  Array constant({3, 1}, 5.0);
  auto sc = Scaler::fit(constant, 0, 3);
  CHECK(sc.std[0] == Scaler::kStdFloor);
  CHECK(std::fabs(sc.apply(constant)[0]) < 1e-6);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(3.0, 7.0);
  Array r({40, 3});
  for (auto& v : r.data()) v = n(rng);
  auto rs = Scaler::fit(r, 0, 25);
  auto back = rs.invert(rs.apply(r));
  for (std::size_t i = 0; i < r.size(); ++i) CHECK(std::fabs(back[i] - r[i]) < 1e-12);
}

TEST_CASE("scaler ignores val/test rows") {
  SyntheticConfig cfg;
  cfg.length = 500;
  auto raw = make_synthetic(cfg);
  auto a = prepare(raw, {0.6, 0.2, 0.2}, 16, 16);
  for (std::size_t t = 300; t < 500; ++t) raw.values.at(t, 0) += 1000.0 * static_cast<double>(t);
  auto b = prepare(raw, {0.6, 0.2, 0.2}, 16, 16);
  CHECK(a.scaler.mean == b.scaler.mean);
  CHECK(a.scaler.std == b.scaler.std);
}

TEST_CASE("make_windows counts and adjacency") {
  auto s = ramp(10, 1);
  auto w = make_windows(s, 0, 10, 3, 2);
  CHECK(w.size() == 6);
  CHECK(w.x(0).at(2, 0) + 10.0 == w.y(0).at(0, 0));

  auto ett_like = ramp(10452, 1);
  CHECK(make_windows(ett_like, 0, 10452, 96, 96).size() == 10261);
  CHECK_THROWS_AS(make_windows(s, 0, 4, 3, 2), ConfigError);
}

TEST_CASE("window count matches enumeration for random configurations") {
  std::mt19937_64 rng(99);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t len = 5 + rng() % 60, lookback = 1 + rng() % 8, horizon = 1 + rng() % 8;
    const std::size_t stride = 1 + rng() % 4;
    if (len < lookback + horizon) continue;
    auto w = make_windows(ramp(len, 2), 0, len, lookback, horizon, stride);
    std::size_t count = 0;
    for (std::size_t o = 0; o + lookback + horizon <= len; o += stride) ++count;
    CHECK(w.size() == count);
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(w.origin(i) + lookback + horizon <= len);
    if (stride == 1) CHECK(w.size() == len - lookback - horizon + 1);
  }
}

TEST_CASE("gather lays out channel-independent rows") {
  auto s = ramp(20, 3);
  auto w = make_windows(s, 2, 20, 4, 3);
  std::vector<std::size_t> idx{0, 5};
  auto b = w.gather(idx);
  CHECK(b.rows() == 6);
  CHECK(b.channel == std::vector<std::size_t>{0, 1, 2, 0, 1, 2});
  CHECK(b.x.at(4, 0) == s->at(7, 1));
  CHECK(b.y.at(4, 0) == s->at(11, 1));
  CHECK(b.target_start[4] == 11);
}

TEST_CASE("prepare lets val/test windows look back across the boundary") {
  SyntheticConfig cfg;
  cfg.length = 1000;
  auto d = prepare(make_synthetic(cfg), {0.6, 0.2, 0.2}, 32, 16);
  CHECK(d.train.size() == 600 - 32 - 16 + 1);
  CHECK(d.val.size() == 200 - 16 + 1);
  CHECK(d.val.origin(0) + 32 == 600);
  CHECK(d.test.origin(d.test.size() - 1) + 32 + 16 == 1000);
}

TEST_CASE("synthetic generator") {
  SyntheticConfig cfg;
  cfg.sigma1 = cfg.sigma2 = 0.0;
  cfg.length = 300;
  auto clean = make_synthetic(cfg);
  for (std::size_t t = 0; t < cfg.length; ++t) {
    CHECK(clean.values.at(t, 0) ==
          cfg.amplitude_a * std::sin(cfg.omega1 * double(t)) + cfg.amplitude_b * std::sin(cfg.omega2 * double(t)));
  }

  SyntheticConfig noisy;
  noisy.seed = 5;
  CHECK(make_synthetic(noisy).values == make_synthetic(noisy).values);

  noisy.sigma1 = 1.0;
  noisy.sigma2 = 0.1;
  noisy.window_period = 200;
  noisy.length = 4000;
  auto s = make_synthetic(noisy);
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < noisy.length; ++t) {
    if (noisy.regime(t) % 2 != 0) continue;
    const double r = s.values.at(t, 0) - noisy.ground_truth(t);
    sum += r;
    sq += r * r;
    ++n;
  }
  const double mean = sum / double(n);
  const double sd = std::sqrt(sq / double(n) - mean * mean);
  CHECK(sd >= 0.9);
  CHECK(sd <= 1.1);

  SyntheticConfig bad;
  bad.sigma1 = -1.0;
  CHECK_THROWS_AS(make_synthetic(bad), ConfigError);
}

TEST_CASE("synthetic regimes are recoverable from residual variance") {
  double ratio_sum = 0.0;
  const double s1 = 1.0, s2 = 0.1;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SyntheticConfig cfg;
    cfg.sigma1 = s1;
    cfg.sigma2 = s2;
    cfg.seed = seed;
    auto s = make_synthetic(cfg);
    double v_hi = 0, v_lo = 0;
    std::size_t n_hi = 0, n_lo = 0;
    for (std::size_t t = 0; t < cfg.length; ++t) {
      const double r = s.values.at(t, 0) - cfg.ground_truth(t);
      if (cfg.high_noise(t)) {
        v_hi += r * r;
        ++n_hi;
      } else {
        v_lo += r * r;
        ++n_lo;
      }
    }
    ratio_sum += (v_hi / double(n_hi)) / (v_lo / double(n_lo));
  }
  CHECK(ratio_sum / 10.0 > (s1 / s2) * (s1 / s2) / 2.0);
}
