#include "scam/models.hpp"

#include <Eigen/Core>
#include <cmath>

#include "scam/errors.hpp"

namespace scam {

namespace {

Array uniform_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Array a(std::move(shape));
  for (auto& v : a.data()) v = u(rng);
  return a;
}

double normalize_in_place(Array& a) {
  double n = 0.0;
  for (double v : a.data()) n += v * v;
  n = std::sqrt(n);
  if (n > 0.0) {
    for (auto& v : a.data()) v /= n;
  }
  return n;
}

// W: out x in. Returns W x (out) or W^T x (in).
Array mat_vec(const Array& w, const Array& x, bool transposed) {
  const std::size_t rows = w.dim(0), cols = w.dim(1);
  Array out({transposed ? cols : rows}, 0.0);
  if (transposed) {
    for (std::size_t i = 0; i < rows; ++i) {
      const double xi = x[i];
      const double* wr = w.raw() + i * cols;
      for (std::size_t j = 0; j < cols; ++j) out[j] += wr[j] * xi;
    }
  } else {
    for (std::size_t i = 0; i < rows; ++i) {
      const double* wr = w.raw() + i * cols;
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += wr[j] * x[j];
      out[i] = acc;
    }
  }
  return out;
}

Array random_unit(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Array a({n});
  for (auto& v : a.data()) v = g(rng);
  normalize_in_place(a);
  return a;
}

}  // namespace

std::size_t parameter_count(const std::vector<NamedTensor>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor->value.size();
  return n;
}

double spectral_norm(const Array& w, int iterations, std::uint64_t seed) {
  if (w.rank() != 2) throw DimensionError("spectral_norm expects a matrix");
  std::mt19937_64 rng(seed);
  Array v = random_unit(w.dim(1), rng);
  Array u({w.dim(0)}, 0.0);
  for (int it = 0; it < iterations; ++it) {
    u = mat_vec(w, v, false);
    if (normalize_in_place(u) == 0.0) return kSigmaFloor;
    v = mat_vec(w, u, true);
    if (normalize_in_place(v) == 0.0) return kSigmaFloor;
  }
  u = mat_vec(w, v, false);
  return std::max(normalize_in_place(u), kSigmaFloor);
}

// ---- LinearLayer --------------------------------------------------------

LinearLayer::LinearLayer(std::string name, std::size_t in_features, std::size_t out_features,
                         bool spectral_norm, std::mt19937_64& rng)
    : name_(std::move(name)), in_(in_features), out_(out_features), snr_(spectral_norm) {
  weight_ = make_parameter(uniform_init({out_, in_}, in_, rng));
  bias_ = make_parameter(Array({out_}, 0.0));
  if (snr_) {
    gamma_ = make_parameter(Array::scalar(1.0));
    u_ = random_unit(out_, rng);
    v_ = random_unit(in_, rng);
    power_iterate(kInitialPowerIterations);
  }
}

void LinearLayer::power_iterate(int min_iterations) {
  if (!snr_) return;
  const Array& w = weight_->value;
  double last = sigma_estimate();
  for (int it = 0; it < kMaxPowerIterations; ++it) {
    Array v = mat_vec(w, u_, true);
    if (normalize_in_place(v) == 0.0) return;
    Array u = mat_vec(w, v, false);
    const double sigma = normalize_in_place(u);
    if (sigma == 0.0) return;
    v_ = std::move(v);
    u_ = std::move(u);
    if (it + 1 >= min_iterations && std::fabs(sigma - last) <= kPowerIterationTol * sigma) return;
    last = sigma;
  }
}

double LinearLayer::sigma_estimate() const {
  if (!snr_) return 0.0;
  const Array wv = mat_vec(weight_->value, v_, false);
  double s = 0.0;
  for (std::size_t i = 0; i < out_; ++i) s += u_[i] * wv[i];
  return s;
}

Var LinearLayer::effective_weight(Tape& tape, bool training) {
  Var w = tape.parameter(weight_);
  if (!snr_) return w;
  if (training) power_iterate(1);
  // sigma = u^T W v with u, v held constant
  Var sigma = sum(mul(matmul(w, tape.constant(v_.reshaped({in_, 1}))), tape.constant(u_.reshaped({out_, 1}))));
  if (!(sigma.value().item() > kSigmaFloor)) sigma = tape.constant(Array::scalar(kSigmaFloor));
  return mul(w, mul(tape.parameter(gamma_), reciprocal(sigma)));
}

Array LinearLayer::effective_weight_value() const {
  if (!snr_) return weight_->value;
  const double sigma = std::max(sigma_estimate(), kSigmaFloor);
  Array out = weight_->value;
  const double f = gamma_->value[0] / sigma;
  for (auto& v : out.data()) v *= f;
  return out;
}

Var LinearLayer::forward(Tape& tape, const Var& x, bool training) {
  const Shape& s = x.shape();
  if (s.size() != 2 || s[1] != in_) {
    throw DimensionError(name_ + ": expected input [R x " + std::to_string(in_) + "], got " + shape_string(s));
  }
  Var w = effective_weight(tape, training);
  Var y = matmul(x, transpose(w));
  Var b = matmul(tape.constant(Array({s[0], 1}, 1.0)), reshape(tape.parameter(bias_), {1, out_}));
  return add(y, b);
}

void LinearLayer::collect(std::vector<NamedTensor>& params, std::vector<NamedBuffer>& buffers) {
  for (auto& p : parameters()) params.push_back(p);
  if (snr_) {
    buffers.push_back({name_ + ".u", &u_});
    buffers.push_back({name_ + ".v", &v_});
  }
}

std::vector<NamedTensor> LinearLayer::parameters() const {
  std::vector<NamedTensor> p{{name_ + ".weight", weight_}, {name_ + ".bias", bias_}};
  if (snr_) p.push_back({name_ + ".gamma", gamma_});
  return p;
}

// ---- RevIn --------------------------------------------------------------

RevIn::RevIn(std::size_t channels, bool affine, double eps) : channels_(channels), affine_(affine), eps_(eps) {
  if (affine_) {
    weight_ = make_parameter(Array({channels_}, 1.0));
    bias_ = make_parameter(Array({channels_}, 0.0));
  }
}

RevInStats RevIn::statistics(const Array& x) const {
  const std::size_t rows = x.dim(0), len = x.dim(1);
  if (len < 2) throw ContractError("RevIN needs windows of length >= 2");
  RevInStats s;
  s.mean.resize(rows);
  s.stdev.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.raw() + r * len;
    double m = 0.0;
    for (std::size_t t = 0; t < len; ++t) m += xr[t];
    m /= static_cast<double>(len);
    double v = 0.0;
    for (std::size_t t = 0; t < len; ++t) v += (xr[t] - m) * (xr[t] - m);
    v /= static_cast<double>(len);
    s.mean[r] = m;
    s.stdev[r] = std::sqrt(v + eps_);
  }
  return s;
}

Var RevIn::expand_channel_param(Tape& tape, const TensorPtr& p, std::span<const std::size_t> channel,
                                std::size_t rows, std::size_t width) const {
  if (channel.size() != rows) throw DimensionError("affine RevIN needs one channel id per row");
  Array onehot({rows, channels_}, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (channel[r] >= channels_) throw DimensionError("channel id out of range for affine RevIN");
    onehot.at(r, channel[r]) = 1.0;
  }
  Var per_row = matmul(tape.constant(std::move(onehot)), reshape(tape.parameter(p), {channels_, 1}));
  return matmul(per_row, tape.constant(Array({1, width}, 1.0)));
}

Var RevIn::normalize(Tape& tape, const Array& x, const RevInStats& stats,
                     std::span<const std::size_t> channel) const {
  const std::size_t rows = x.dim(0), len = x.dim(1);
  Array z(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t t = 0; t < len; ++t) z.at(r, t) = (x.at(r, t) - stats.mean[r]) / stats.stdev[r];
  }
  Var out = tape.constant(std::move(z));
  if (affine_) {
    out = add(mul(out, expand_channel_param(tape, weight_, channel, rows, len)),
              expand_channel_param(tape, bias_, channel, rows, len));
  }
  return out;
}

Var RevIn::denormalize(Tape& tape, const Var& y, const RevInStats& stats,
                       std::span<const std::size_t> channel) const {
  const std::size_t rows = y.shape()[0], len = y.shape()[1];
  if (stats.mean.size() != rows) throw DimensionError("RevIN statistics do not match the batch");
  Var out = y;
  if (affine_) {
    Var w = add(expand_channel_param(tape, weight_, channel, rows, len), tape.constant(Array::scalar(eps_ * eps_)));
    out = mul(sub(out, expand_channel_param(tape, bias_, channel, rows, len)), reciprocal(w));
  }
  Array sd({rows, len});
  Array mu({rows, len});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t t = 0; t < len; ++t) {
      sd.at(r, t) = stats.stdev[r];
      mu.at(r, t) = stats.mean[r];
    }
  }
  return add(mul(out, tape.constant(std::move(sd))), tape.constant(std::move(mu)));
}

void RevIn::collect(std::vector<NamedTensor>& params) const {
  if (!affine_) return;
  params.push_back({"revin.weight", weight_});
  params.push_back({"revin.bias", bias_});
}

// ---- Predictor ----------------------------------------------------------

std::string to_string(Backbone b) { return b == Backbone::mlp ? "mlp" : "linear"; }

std::string to_string(SnrPlacement p) {
  switch (p) {
    case SnrPlacement::none: return "none";
    case SnrPlacement::pre: return "pre";
    case SnrPlacement::post: return "post";
    case SnrPlacement::both: return "both";
  }
  return "none";
}

Backbone parse_backbone(const std::string& s) {
  if (s == "mlp") return Backbone::mlp;
  if (s == "linear") return Backbone::linear;
  throw ConfigError("unknown backbone '" + s + "' (expected mlp or linear)");
}

SnrPlacement parse_snr(const std::string& s) {
  if (s == "none") return SnrPlacement::none;
  if (s == "pre") return SnrPlacement::pre;
  if (s == "post") return SnrPlacement::post;
  if (s == "both") return SnrPlacement::both;
  throw ConfigError("unknown snr placement '" + s + "' (expected none, pre, post or both)");
}

void PredictorConfig::validate() const {
  if (lookback < 2) throw ConfigError("lookback must be >= 2");
  if (horizon < 1) throw ConfigError("horizon must be >= 1");
  if (backbone == Backbone::mlp && hidden < 1) throw ConfigError("hidden size must be >= 1");
  if (channels < 1) throw ConfigError("channel count must be >= 1");
}

Predictor::Predictor(const PredictorConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  revin_ = RevIn(cfg_.channels, cfg_.revin_affine);
  const bool pre = cfg_.snr == SnrPlacement::pre || cfg_.snr == SnrPlacement::both;
  const bool post = cfg_.snr == SnrPlacement::post || cfg_.snr == SnrPlacement::both;
  if (cfg_.backbone == Backbone::mlp) {
    first_ = LinearLayer("embedding", cfg_.lookback, cfg_.hidden, pre, rng);
    second_ = LinearLayer("projector", cfg_.hidden, cfg_.horizon, post, rng);
  } else {
    first_ = LinearLayer("projector", cfg_.lookback, cfg_.horizon, pre || post, rng);
  }
}

Var Predictor::forward(Tape& tape, const Array& x, std::span<const std::size_t> channel, bool training) {
  if (x.rank() != 2 || x.dim(1) != cfg_.lookback) {
    throw DimensionError("predictor expects [R x " + std::to_string(cfg_.lookback) + "], got " +
                         shape_string(x.shape()));
  }
  const RevInStats stats = revin_.statistics(x);
  Var h = revin_.normalize(tape, x, stats, channel);
  h = first_.forward(tape, h, training);
  if (cfg_.backbone == Backbone::mlp) h = second_.forward(tape, relu(h), training);
  return revin_.denormalize(tape, h, stats, channel);
}

Array Predictor::predict(const Array& x, std::span<const std::size_t> channel) {
  Tape tape;
  return forward(tape, x, channel, false).value();
}

std::vector<NamedTensor> Predictor::parameters() const {
  std::vector<NamedTensor> p;
  revin_.collect(p);
  for (auto& t : first_.parameters()) p.push_back(t);
  if (cfg_.backbone == Backbone::mlp) {
    for (auto& t : second_.parameters()) p.push_back(t);
  }
  return p;
}

std::vector<NamedBuffer> Predictor::buffers() {
  std::vector<NamedTensor> unused;
  std::vector<NamedBuffer> b;
  first_.collect(unused, b);
  if (cfg_.backbone == Backbone::mlp) second_.collect(unused, b);
  return b;
}

std::vector<ParameterGroup> Predictor::components() const {
  std::vector<ParameterGroup> groups;
  std::vector<NamedTensor> revin;
  revin_.collect(revin);
  if (!revin.empty()) groups.push_back({"revin", revin});
  if (cfg_.backbone == Backbone::mlp) {
    groups.push_back({"embedding", first_.parameters()});
    groups.push_back({"projector", second_.parameters()});
  } else {
    groups.push_back({"projector", first_.parameters()});
  }
  return groups;
}

std::vector<LinearLayer*> Predictor::layers() {
  if (cfg_.backbone == Backbone::mlp) return {&first_, &second_};
  return {&first_};
}

// ---- ReconstructionNet --------------------------------------------------

void ReconstructionConfig::validate() const {
  if (conv_layers < 1) throw ConfigError("reconstruction needs at least one conv layer");
  if (dim_multiplier < 2 || dim_multiplier % 2 != 0) {
    throw ConfigError("dim_multiplier must be even and >= 2");
  }
  const std::size_t factor = std::size_t{1} << conv_layers;
  if (horizon % factor != 0) {
    throw ConfigError("horizon " + std::to_string(horizon) + " must be divisible by " + std::to_string(factor));
  }
  if (hidden_dim < 1 || series < 1) throw ConfigError("hidden_dim and series must be >= 1");
}

ReconstructionNet::ReconstructionNet(const ReconstructionConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  std::size_t in_ch = 1;
  for (std::size_t l = 0; l < cfg_.conv_layers; ++l) {
    const std::size_t out_ch = cfg_.conv_channels(l);
    ConvLayer c;
    c.weight = make_parameter(uniform_init({out_ch, in_ch, 3}, in_ch * 3, rng));
    c.bias = make_parameter(Array({out_ch}, 0.0));
    convs_.push_back(std::move(c));
    in_ch = out_ch;
  }
  ffn_in_ = LinearLayer("recon.ffn_in", cfg_.feature_dim(), cfg_.hidden_dim, false, rng);
  heads_ = LinearLayer("recon.heads", cfg_.hidden_dim, cfg_.series, false, rng);
  readout_ = LinearLayer("recon.readout", cfg_.feature_dim(), 1, false, rng);
}

Var ReconstructionNet::encode(Tape& tape, const Var& y) const {
  const Shape& s = y.shape();
  if (s.size() != 2 || s[1] != cfg_.horizon) {
    throw DimensionError("reconstruction expects [B x " + std::to_string(cfg_.horizon) + "], got " +
                         shape_string(s));
  }
  const std::size_t batch = s[0];
  const std::size_t per = cfg_.features_per_layer();
  Var h = reshape(y, {batch, 1, cfg_.horizon});
  std::vector<Var> taps;
  for (std::size_t l = 0; l < convs_.size(); ++l) {
    Var c = conv1d(h, tape.parameter(convs_[l].weight), tape.parameter(convs_[l].bias), 2, 1);
    // transpose (C x T -> T x C) then unfold to H x per: each conv position's
    // channels stay contiguous, spreading positions evenly over the horizon.
    taps.push_back(reshape(permute(c, {0, 2, 1}), {batch, cfg_.horizon, per}));
    h = relu(c);
  }
  return concat(taps, 2);
}

ReconstructionNet::Outputs ReconstructionNet::forward(Tape& tape, const Var& y) const {
  const std::size_t batch = y.shape().at(0);
  Var features = encode(tape, y);
  Var flat = reshape(features, {batch * cfg_.horizon, cfg_.feature_dim()});
  // The layers below carry no spectral normalisation, so forward() does not mutate them.
  auto& ffn = const_cast<LinearLayer&>(ffn_in_);
  auto& heads = const_cast<LinearLayer&>(heads_);
  Var hidden = relu(ffn.forward(tape, flat, false));
  Var out = heads.forward(tape, hidden, false);  // (B*H) x S
  Var rec = permute(reshape(out, {batch, cfg_.horizon, cfg_.series}), {0, 2, 1});
  return {features, rec};
}

Var ReconstructionNet::intermediate(Tape& tape, const Var& features) const {
  const std::size_t batch = features.shape().at(0);
  Var flat = reshape(stop_gradient(features), {batch * cfg_.horizon, cfg_.feature_dim()});
  auto& readout = const_cast<LinearLayer&>(readout_);
  return reshape(readout.forward(tape, flat, false), {batch, cfg_.horizon});
}

void ReconstructionNet::tie_heads() {
  Array& w = heads_.weight()->value;
  Array& b = heads_.bias()->value;
  for (std::size_t s = 1; s < cfg_.series; ++s) {
    for (std::size_t j = 0; j < cfg_.hidden_dim; ++j) w.at(s, j) = w.at(0, j);
    b[s] = b[0];
  }
}

std::vector<NamedTensor> ReconstructionNet::parameters() const {
  std::vector<NamedTensor> p;
  for (std::size_t l = 0; l < convs_.size(); ++l) {
    p.push_back({"recon.conv" + std::to_string(l + 1) + ".weight", convs_[l].weight});
    p.push_back({"recon.conv" + std::to_string(l + 1) + ".bias", convs_[l].bias});
  }
  for (auto& t : ffn_in_.parameters()) p.push_back(t);
  for (auto& t : heads_.parameters()) p.push_back(t);
  return p;
}

std::vector<NamedTensor> ReconstructionNet::readout_parameters() const { return readout_.parameters(); }

std::vector<NamedBuffer> ReconstructionNet::buffers() { return {}; }

}  // namespace scam
