#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "scam/array.hpp"

namespace scam {

/// A multivariate series, time x channels.
struct RawSeries {
  Array values;  // T x N
  std::vector<std::string> channel_names;
  std::vector<std::string> timestamps;  // empty when the file has no date column

  std::size_t length() const { return values.dim(0); }
  std::size_t channels() const { return values.dim(1); }
};

/// Reads a header-first CSV. With `has_date_column` the first column is kept
/// as timestamps and excluded from the values.
RawSeries load_csv(const std::filesystem::path& path, bool has_date_column);
void write_csv(const std::filesystem::path& path, const RawSeries& series);

struct SplitSpec {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;

  void validate() const;
};

/// Row boundaries: train = [0, train_end), val = [train_end, val_end), test = [val_end, total).
struct SplitBoundaries {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
  std::size_t total = 0;
};

SplitBoundaries split(std::size_t length, const SplitSpec& spec, std::size_t lookback, std::size_t horizon);

/// Per-channel standardisation fitted on the training rows only.
struct Scaler {
  std::vector<double> mean;
  std::vector<double> std;

  static constexpr double kStdFloor = 1e-8;

  static Scaler fit(const Array& values, std::size_t row_begin, std::size_t row_end);
  Array apply(const Array& values) const;
  Array invert(const Array& values) const;
};

/// Channel-independent mini-batch: one row per (window, channel) pair.
struct Batch {
  Array x;  // R x L
  Array y;  // R x H
  std::vector<std::size_t> channel;       // channel of each row
  std::vector<std::size_t> target_start;  // absolute series row of y's first point

  std::size_t rows() const { return x.dim(0); }
};

/// Paired sliding windows over one contiguous segment of a (scaled) series.
/// Window i has X = rows [o_i, o_i+L) and Y = rows [o_i+L, o_i+L+H).
class WindowDataset {
 public:
  WindowDataset() = default;
  WindowDataset(std::shared_ptr<const Array> series, std::size_t segment_begin, std::size_t segment_end,
                std::size_t lookback, std::size_t horizon, std::size_t stride = 1);

  std::size_t size() const { return origins_.size(); }
  std::size_t lookback() const { return lookback_; }
  std::size_t horizon() const { return horizon_; }
  std::size_t channels() const { return series_ ? series_->dim(1) : 0; }
  std::size_t origin(std::size_t i) const { return origins_.at(i); }

  Array x(std::size_t i) const;  // L x N
  Array y(std::size_t i) const;  // H x N

  Batch gather(std::span<const std::size_t> windows) const;
  Batch gather_range(std::size_t begin, std::size_t end) const;

 private:
  std::shared_ptr<const Array> series_;
  std::size_t lookback_ = 0;
  std::size_t horizon_ = 0;
  std::vector<std::size_t> origins_;
};

WindowDataset make_windows(std::shared_ptr<const Array> series, std::size_t segment_begin,
                           std::size_t segment_end, std::size_t lookback, std::size_t horizon,
                           std::size_t stride = 1);

/// Sum of two sinusoids plus Gaussian noise whose standard deviation alternates
/// between sigma1 (even regimes) and sigma2 (odd regimes) every window_period points.
struct SyntheticConfig {
  double amplitude_a = 1.0;
  double amplitude_b = 0.5;
  double omega1 = 0.2617993877991494;   // 2*pi/24
  double omega2 = 0.03739991254273563;  // 2*pi/168
  double sigma1 = 1.0;
  double sigma2 = 0.1;
  std::size_t window_period = 200;
  std::size_t length = 4000;
  std::uint64_t seed = 0;

  void validate() const;
  double ground_truth(std::size_t t) const;
  std::size_t regime(std::size_t t) const { return t / window_period; }
  bool high_noise(std::size_t t) const { return regime(t) % 2 == 0 ? sigma1 >= sigma2 : sigma2 > sigma1; }
};

RawSeries make_synthetic(const SyntheticConfig& cfg);

/// A series split, scaled, and windowed. Validation and test windows take their
/// lookback from the rows that precede the split boundary.
struct PreparedData {
  Scaler scaler;
  SplitBoundaries bounds;
  std::shared_ptr<const Array> scaled;
  WindowDataset train;
  WindowDataset val;
  WindowDataset test;
  std::vector<std::string> channel_names;
};

PreparedData prepare(const RawSeries& raw, const SplitSpec& spec, std::size_t lookback, std::size_t horizon,
                     std::size_t stride = 1);

}  // namespace scam
