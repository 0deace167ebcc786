#include "scam/data.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "scam/errors.hpp"

namespace scam {

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n\"");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n\"");
  return s.substr(first, last - first + 1);
}

}  // namespace

RawSeries load_csv(const std::filesystem::path& path, bool has_date_column) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw LoadError(path.string() + ": missing header row");
  auto header = split_fields(line);
  for (auto& h : header) h = trim(h);
  const std::size_t skip = has_date_column ? 1 : 0;
  if (header.size() <= skip) throw LoadError(path.string() + ": no value columns in header");

  RawSeries series;
  series.channel_names.assign(header.begin() + static_cast<long>(skip), header.end());
  const std::size_t n = series.channel_names.size();
  std::vector<double> values;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto fields = split_fields(line);
    if (fields.size() != header.size()) {
      throw LoadError(path.string() + ": row " + std::to_string(row) + " has " + std::to_string(fields.size()) +
                      " fields, expected " + std::to_string(header.size()));
    }
    if (has_date_column) series.timestamps.push_back(trim(fields[0]));
    for (std::size_t c = 0; c < n; ++c) {
      const std::string cell = trim(fields[c + skip]);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) {
        throw LoadError(path.string() + ": cannot parse \"" + cell + "\" at row " + std::to_string(row) +
                        ", column '" + series.channel_names[c] + "'");
      }
      if (!std::isfinite(v)) {
        throw LoadError(path.string() + ": non-finite value at row " + std::to_string(row) + ", column '" +
                        series.channel_names[c] + "'");
      }
      values.push_back(v);
    }
  }
  if (row < 2) throw LoadError(path.string() + ": need at least 2 data rows");
  series.values = Array({row, n}, std::move(values));
  return series;
}

void write_csv(const std::filesystem::path& path, const RawSeries& series) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  const bool dated = !series.timestamps.empty();
  if (dated) out << "date";
  for (std::size_t c = 0; c < series.channels(); ++c) out << (dated || c ? "," : "") << series.channel_names[c];
  out << '\n';
  out << std::setprecision(17);
  for (std::size_t t = 0; t < series.length(); ++t) {
    if (dated) out << series.timestamps[t];
    for (std::size_t c = 0; c < series.channels(); ++c) {
      out << (dated || c ? "," : "") << series.values.at(t, c);
    }
    out << '\n';
  }
}

void SplitSpec::validate() const {
  for (double r : {train, val, test}) {
    if (!(r > 0.0)) throw ConfigError("split ratios must all be > 0");
  }
  if (std::fabs(train + val + test - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
}

SplitBoundaries split(std::size_t length, const SplitSpec& spec, std::size_t lookback, std::size_t horizon) {
  spec.validate();
  SplitBoundaries b;
  const auto n = static_cast<double>(length);
  b.train_end = static_cast<std::size_t>(std::floor(spec.train * n + 1e-9));
  b.val_end = static_cast<std::size_t>(std::floor((spec.train + spec.val) * n + 1e-9));
  b.total = length;
  if (b.train_end < lookback + horizon + 1) {
    throw ConfigError("train segment of " + std::to_string(b.train_end) + " rows is shorter than lookback + horizon + 1 = " +
                      std::to_string(lookback + horizon + 1));
  }
  if (b.val_end - b.train_end < horizon || b.total - b.val_end < horizon) {
    throw ConfigError("validation or test segment shorter than the horizon");
  }
  return b;
}

Scaler Scaler::fit(const Array& values, std::size_t row_begin, std::size_t row_end) {
  if (row_end <= row_begin) throw ConfigError("cannot fit scaler on an empty segment");
  const std::size_t n = values.dim(1);
  const auto count = static_cast<double>(row_end - row_begin);
  Scaler s;
  s.mean.assign(n, 0.0);
  s.std.assign(n, 0.0);
  for (std::size_t t = row_begin; t < row_end; ++t) {
    for (std::size_t c = 0; c < n; ++c) s.mean[c] += values.at(t, c);
  }
  for (auto& m : s.mean) m /= count;
  for (std::size_t t = row_begin; t < row_end; ++t) {
    for (std::size_t c = 0; c < n; ++c) {
      const double d = values.at(t, c) - s.mean[c];
      s.std[c] += d * d;
    }
  }
  for (auto& v : s.std) v = std::max(std::sqrt(v / count), kStdFloor);
  return s;
}

Array Scaler::apply(const Array& values) const {
  Array out(values.shape());
  const std::size_t n = values.dim(1);
  for (std::size_t t = 0; t < values.dim(0); ++t) {
    for (std::size_t c = 0; c < n; ++c) out.at(t, c) = (values.at(t, c) - mean[c]) / std[c];
  }
  return out;
}

Array Scaler::invert(const Array& values) const {
  Array out(values.shape());
  const std::size_t n = values.dim(1);
  for (std::size_t t = 0; t < values.dim(0); ++t) {
    for (std::size_t c = 0; c < n; ++c) out.at(t, c) = values.at(t, c) * std[c] + mean[c];
  }
  return out;
}

WindowDataset::WindowDataset(std::shared_ptr<const Array> series, std::size_t segment_begin,
                             std::size_t segment_end, std::size_t lookback, std::size_t horizon,
                             std::size_t stride)
    : series_(std::move(series)), lookback_(lookback), horizon_(horizon) {
  if (!series_ || series_->rank() != 2) throw ConfigError("window source must be a T x N series");
  if (stride < 1 || lookback < 1 || horizon < 1) throw ConfigError("lookback, horizon and stride must be >= 1");
  if (segment_end > series_->dim(0) || segment_begin > segment_end ||
      segment_end - segment_begin < lookback + horizon) {
    throw ConfigError("segment [" + std::to_string(segment_begin) + ", " + std::to_string(segment_end) +
                      ") too short for lookback " + std::to_string(lookback) + " + horizon " +
                      std::to_string(horizon));
  }
  for (std::size_t o = segment_begin; o + lookback + horizon <= segment_end; o += stride) origins_.push_back(o);
}

Array WindowDataset::x(std::size_t i) const {
  const std::size_t n = channels();
  Array out({lookback_, n});
  const std::size_t o = origins_.at(i);
  for (std::size_t t = 0; t < lookback_; ++t) {
    for (std::size_t c = 0; c < n; ++c) out.at(t, c) = series_->at(o + t, c);
  }
  return out;
}

Array WindowDataset::y(std::size_t i) const {
  const std::size_t n = channels();
  Array out({horizon_, n});
  const std::size_t o = origins_.at(i) + lookback_;
  for (std::size_t t = 0; t < horizon_; ++t) {
    for (std::size_t c = 0; c < n; ++c) out.at(t, c) = series_->at(o + t, c);
  }
  return out;
}

Batch WindowDataset::gather(std::span<const std::size_t> windows) const {
  const std::size_t n = channels();
  const std::size_t rows = windows.size() * n;
  if (rows == 0) throw ConfigError("empty batch");
  Batch b;
  b.x = Array({rows, lookback_});
  b.y = Array({rows, horizon_});
  b.channel.resize(rows);
  b.target_start.resize(rows);
  const std::size_t stride = series_->dim(1);
  const double* src = series_->raw();
  for (std::size_t k = 0; k < windows.size(); ++k) {
    const std::size_t o = origins_.at(windows[k]);
    for (std::size_t c = 0; c < n; ++c) {
      const std::size_t r = k * n + c;
      b.channel[r] = c;
      b.target_start[r] = o + lookback_;
      double* xr = b.x.raw() + r * lookback_;
      for (std::size_t t = 0; t < lookback_; ++t) xr[t] = src[(o + t) * stride + c];
      double* yr = b.y.raw() + r * horizon_;
      for (std::size_t t = 0; t < horizon_; ++t) yr[t] = src[(o + lookback_ + t) * stride + c];
    }
  }
  return b;
}

Batch WindowDataset::gather_range(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < end && i < size(); ++i) idx.push_back(i);
  return gather(idx);
}

WindowDataset make_windows(std::shared_ptr<const Array> series, std::size_t segment_begin,
                           std::size_t segment_end, std::size_t lookback, std::size_t horizon,
                           std::size_t stride) {
  return WindowDataset(std::move(series), segment_begin, segment_end, lookback, horizon, stride);
}

void SyntheticConfig::validate() const {
  if (sigma1 < 0.0 || sigma2 < 0.0) throw ConfigError("synthetic noise std must be >= 0");
  if (window_period < 1) throw ConfigError("synthetic window_period must be >= 1");
  if (length < 2) throw ConfigError("synthetic length must be >= 2");
}

double SyntheticConfig::ground_truth(std::size_t t) const {
  const auto x = static_cast<double>(t);
  return amplitude_a * std::sin(omega1 * x) + amplitude_b * std::sin(omega2 * x);
}

RawSeries make_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  RawSeries s;
  s.values = Array({cfg.length, 1});
  s.channel_names = {"y"};
  s.timestamps.reserve(cfg.length);
  for (std::size_t t = 0; t < cfg.length; ++t) {
    const double sigma = cfg.regime(t) % 2 == 0 ? cfg.sigma1 : cfg.sigma2;
    const double noise = unit(rng);
    s.values.at(t, 0) = cfg.ground_truth(t) + sigma * noise;
    s.timestamps.push_back(std::to_string(t));
  }
  return s;
}

PreparedData prepare(const RawSeries& raw, const SplitSpec& spec, std::size_t lookback, std::size_t horizon,
                     std::size_t stride) {
  PreparedData d;
  d.bounds = split(raw.length(), spec, lookback, horizon);
  d.scaler = Scaler::fit(raw.values, 0, d.bounds.train_end);
  d.scaled = std::make_shared<const Array>(d.scaler.apply(raw.values));
  d.train = make_windows(d.scaled, 0, d.bounds.train_end, lookback, horizon, stride);
  d.val = make_windows(d.scaled, d.bounds.train_end - lookback, d.bounds.val_end, lookback, horizon, stride);
  d.test = make_windows(d.scaled, d.bounds.val_end - lookback, d.bounds.total, lookback, horizon, stride);
  d.channel_names = raw.channel_names;
  return d;
}

}  // namespace scam
