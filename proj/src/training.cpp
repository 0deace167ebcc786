#include "scam/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "scam/errors.hpp"

namespace scam {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---- optimizers ---------------------------------------------------------

bool Optimizer::step() {
  for (const auto& p : params_) {
    if (p->has_grad && !p->grad.all_finite()) {
      ++skipped_;
      return false;
    }
  }
  apply();
  return true;
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

Adam::Adam(std::vector<TensorPtr> params, double lr, double beta1, double beta2, double eps)
    : Optimizer(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p->value.shape(), 0.0);
    v_.emplace_back(p->value.shape(), 0.0);
  }
}

void Adam::apply() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = *params_[k];
    if (!p.has_grad) continue;
    Array& m = m_[k];
    Array& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      p.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

void Sgd::apply() {
  for (auto& p : params_) {
    if (!p->has_grad) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] -= lr_ * p->grad[i];
  }
}

std::unique_ptr<Optimizer> make_optimizer(const std::string& kind, std::vector<TensorPtr> params, double lr) {
  if (kind == "adam") return std::make_unique<Adam>(std::move(params), lr);
  if (kind == "sgd") return std::make_unique<Sgd>(std::move(params), lr);
  throw ConfigError("unknown optimizer '" + kind + "' (expected adam or sgd)");
}

// ---- configuration ------------------------------------------------------

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::supervised: return "supervised";
    case TrainMode::grid_search: return "grid_search";
    case TrainMode::co_objective: return "co_objective";
    case TrainMode::scam: return "scam";
  }
  return "supervised";
}

TrainMode parse_mode(const std::string& s) {
  if (s == "supervised") return TrainMode::supervised;
  if (s == "grid_search" || s == "grid-search") return TrainMode::grid_search;
  if (s == "co_objective" || s == "co-objective") return TrainMode::co_objective;
  if (s == "scam") return TrainMode::scam;
  throw ConfigError("unknown mode '" + s + "' (expected supervised, grid_search, co_objective or scam)");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (optimizer != "adam" && optimizer != "sgd") throw ConfigError("optimizer must be adam or sgd");
  if (inner_optimizer != "adam" && inner_optimizer != "sgd") throw ConfigError("inner_optimizer must be adam or sgd");
  if (candidates < 1) throw ConfigError("candidates must be >= 1");
  if (inner_max_steps < 1) throw ConfigError("inner_max_steps must be >= 1");
  if (!(inner_grad_threshold >= 0.0)) throw ConfigError("inner_grad_threshold must be >= 0");
  if (!(outer_lr > 0.0)) throw ConfigError("outer_lr must be > 0");
  if (sharpness_windows < 1) throw ConfigError("sharpness_windows must be >= 1");
}

// ---- evaluation ---------------------------------------------------------

Metrics evaluate(Predictor& f, const WindowDataset& split, const Scaler* raw_units, std::size_t chunk_windows) {
  if (split.size() == 0) throw ConfigError("cannot evaluate an empty split");
  double se = 0.0, ae = 0.0;
  std::size_t n = 0;
  for (std::size_t begin = 0; begin < split.size(); begin += chunk_windows) {
    const Batch b = split.gather_range(begin, std::min(split.size(), begin + chunk_windows));
    const Array pred = f.predict(b.x, b.channel);
    const std::size_t h = b.y.dim(1);
    for (std::size_t r = 0; r < b.rows(); ++r) {
      const double unit = raw_units ? raw_units->std.at(b.channel[r]) : 1.0;
      for (std::size_t t = 0; t < h; ++t) {
        const double e = (pred.at(r, t) - b.y.at(r, t)) * unit;
        se += e * e;
        ae += std::fabs(e);
      }
    }
    n += b.y.size();
  }
  return {se / static_cast<double>(n), ae / static_cast<double>(n)};
}

// ---- diagnostics --------------------------------------------------------

Array reconstruct(const ReconstructionNet* g, const Array& y) {
  if (!g) return expand_series(y, 1);
  Tape tape;
  return g->forward(tape, tape.constant(y)).reconstruction.value();
}

MaskTally tally_masks(Predictor& f, const ReconstructionNet* g, const WindowDataset& split, std::size_t chunk) {
  MaskTally tally;
  const std::size_t rows = split.origin(split.size() - 1) + split.lookback() + split.horizon();
  tally.total.assign(rows, 0.0);
  tally.in_mask.assign(rows, 0.0);
  tally.corrected.assign(rows, 0.0);
  for (std::size_t begin = 0; begin < split.size(); begin += chunk) {
    const Batch b = split.gather_range(begin, std::min(split.size(), begin + chunk));
    const Array rec = reconstruct(g, b.y);
    const std::size_t s = rec.dim(1), h = b.y.dim(1);
    const auto masks = compute_masks(rec, expand_series(f.predict(b.x, b.channel), s), expand_series(b.y, s));
    for (std::size_t r = 0; r < b.rows(); ++r) {
      for (std::size_t k = 0; k < s; ++k) {
        for (std::size_t t = 0; t < h; ++t) {
          const std::size_t i = (r * s + k) * h + t;
          const std::size_t row = b.target_start[r] + t;
          tally.total[row] += 1.0;
          tally.in_mask[row] += masks.M[i];
          tally.corrected[row] += masks.M[i] * (1.0 - masks.M_lt[i]);
        }
      }
    }
  }
  return tally;
}

Batch spread_batch(const WindowDataset& split, std::size_t count) {
  const std::size_t n = std::min(count, split.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t k = 0; k < n; ++k) idx[k] = k * split.size() / n;
  return split.gather(idx);
}

SharpnessReport weighted_target_sharpness(Predictor& f, const Batch& batch, const Array& weights,
                                          const LanczosOptions& opt) {
  if (weights.shape() != batch.y.shape()) throw DimensionError("sharpness weights must match the labels");
  double wsum = 0.0;
  for (double w : weights.data()) wsum += w;
  if (!(wsum > 0.0)) throw ContractError("sharpness weights select no points");
  // averaged over the selected points rather than all points
  auto ctx = make_hvp_context(f.components(), [&f, &batch, &weights, wsum](Tape& t) {
    Var err = abs(sub(f.forward(t, batch.x, batch.channel, false), t.constant(batch.y)));
    return scale(sum(mul(err, t.constant(weights))), 1.0 / wsum);
  });
  return sharpness_report(ctx, opt);
}

Array mean_in_mask(const MaskSet& masks, std::size_t rows, std::size_t series, std::size_t horizon) {
  if (masks.M.size() != rows * series * horizon) throw DimensionError("mask size does not match rows x S x H");
  Array out({rows, horizon}, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t s = 0; s < series; ++s)
      for (std::size_t t = 0; t < horizon; ++t) out.at(r, t) += masks.M[(r * series + s) * horizon + t];
  for (auto& v : out.data()) v /= static_cast<double>(series);
  return out;
}

// ---- training loop ------------------------------------------------------

namespace {

std::vector<TensorPtr> tensors_of(const std::vector<NamedTensor>& named) {
  std::vector<TensorPtr> out;
  for (const auto& n : named) out.push_back(n.tensor);
  return out;
}

struct Snapshot {
  std::vector<Array> values;

  static Snapshot take(const std::vector<TensorPtr>& params, const std::vector<NamedBuffer>& buffers) {
    Snapshot s;
    for (const auto& p : params) s.values.push_back(p->value);
    for (const auto& b : buffers) s.values.push_back(*b.buffer);
    return s;
  }
  void restore(const std::vector<TensorPtr>& params, const std::vector<NamedBuffer>& buffers) const {
    std::size_t k = 0;
    for (const auto& p : params) p->value = values[k++];
    for (const auto& b : buffers) *b.buffer = values[k++];
  }
};

PredictorConfig fit_channels(PredictorConfig model, const PreparedData& data) {
  model.channels = data.train.channels();
  if (model.lookback != data.train.lookback() || model.horizon != data.train.horizon()) {
    throw ConfigError("model lookback/horizon do not match the prepared windows");
  }
  return model;
}

std::vector<std::size_t> batch_order(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

TrainResult run_training(const PreparedData& data, const PredictorConfig& model_cfg,
                         const ReconstructionConfig* recon_cfg, const TrainConfig& cfg, TrainMode mode) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const PredictorConfig model = fit_channels(model_cfg, data);
  TrainResult res;
  res.predictor = std::make_unique<Predictor>(model, derive_seed(cfg.seed, 1));
  Predictor& f = *res.predictor;
  const bool learn_rec = mode != TrainMode::supervised && !cfg.identity_reconstruction;
  if (learn_rec) {
    if (!recon_cfg) throw ConfigError("reconstruction settings are required for this mode");
    if (recon_cfg->horizon != model.horizon) throw ConfigError("reconstruction horizon must equal the model horizon");
    res.reconstruction = std::make_unique<ReconstructionNet>(*recon_cfg, derive_seed(cfg.seed, 2));
  }
  ReconstructionNet* g = res.reconstruction.get();

  std::vector<TensorPtr> params = tensors_of(f.parameters());
  std::vector<NamedBuffer> buffers = f.buffers();
  if (g) {
    for (auto& p : tensors_of(g->parameters())) params.push_back(p);
    for (auto& p : tensors_of(g->readout_parameters())) params.push_back(p);
  }
  auto opt = make_optimizer(cfg.optimizer, params, cfg.lr);
  std::mt19937_64 order_rng(derive_seed(cfg.seed, 3));
  const Scaler* units = cfg.raw_metrics ? &data.scaler : nullptr;
  const Batch probe = cfg.track_sharpness ? spread_batch(data.val, cfg.sharpness_windows) : Batch{};

  double best_val = std::numeric_limits<double>::infinity();
  Snapshot best;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto order = batch_order(data.train.size(), order_rng);
    std::size_t batches = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
    if (cfg.max_batches_per_epoch > 0) batches = std::min(batches, cfg.max_batches_per_epoch);

    EpochRecord rec;
    rec.epoch = epoch;
    double se = 0.0, ae = 0.0, points = 0.0, in_mask = 0.0, corrected = 0.0, mask_points = 0.0;
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const std::size_t lo = bi * cfg.batch_size;
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      const Batch batch = data.train.gather(std::span<const std::size_t>(order).subspan(lo, hi - lo));

      Tape tape;
      Var pred = f.forward(tape, batch.x, batch.channel, true);
      Var y = tape.constant(batch.y);
      Var rec_v;
      ReconstructionNet::Outputs outs;
      if (g) {
        outs = g->forward(tape, y);
        rec_v = outs.reconstruction;
      } else {
        rec_v = tape.constant(expand_series(batch.y, 1));
      }
      const std::size_t series = rec_v.shape()[1];
      Var pred_e = expand_series(pred, series);
      Var y_e = expand_series(y, series);
      const MaskSet masks = compute_masks(rec_v.value(), pred_e.value(), y_e.value());

      Var loss;
      switch (mode) {
        case TrainMode::supervised: loss = supervised_loss(pred, y); break;
        case TrainMode::co_objective: loss = co_objective_loss(rec_v, pred_e, y_e); break;
        case TrainMode::scam: loss = scam_masked_loss(rec_v, pred_e, y_e, masks); break;
        case TrainMode::grid_search: throw ConfigError("grid search has its own driver");
      }
      Var root = loss;
      // the readout sees detached features, so this term moves only the readout
      if (g) root = add(loss, mean(abs(sub(g->intermediate(tape, outs.features), y))));

      opt->zero_grad();
      tape.backward(root);
      opt->step();

      rec.train_loss += loss.value().item();
      rec.breakdown += loss_breakdown(rec_v.value(), pred_e.value(), y_e.value(), masks);
      const Array& pv = pred.value();
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double e = pv[i] - batch.y[i];
        se += e * e;
        ae += std::fabs(e);
      }
      points += static_cast<double>(pv.size());
      in_mask += static_cast<double>(masks.in_mask());
      corrected += static_cast<double>(masks.reconstruction_corrected());
      mask_points += static_cast<double>(masks.M.size());
    }
    const double nb = static_cast<double>(batches);
    rec.train_loss /= nb;
    rec.breakdown = rec.breakdown.scaled(1.0 / nb);
    rec.train = {se / points, ae / points};
    rec.in_mask_rate = in_mask / mask_points;
    rec.corrected_rate = corrected / mask_points;
    rec.val = evaluate(f, data.val, units);
    rec.test = evaluate(f, data.test, units);
    rec.skipped_steps = opt->skipped();
    rec.lambda_max = std::numeric_limits<double>::quiet_NaN();
    if (cfg.track_sharpness) {
      rec.lambda_max = weighted_target_sharpness(f, probe, Array(probe.y.shape(), 1.0)).total.value;
    }
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    res.records.push_back(rec);

    if (rec.val.mse < best_val) {
      best_val = rec.val.mse;
      res.best_epoch = epoch;
      best = Snapshot::take(params, buffers);
    } else if (epoch - res.best_epoch >= cfg.patience) {
      break;
    }
  }
  best.restore(params, buffers);
  res.val = evaluate(f, data.val, units);
  res.test = evaluate(f, data.test, units);
  return res;
}

}  // namespace

TrainResult train_supervised(const PreparedData& data, const PredictorConfig& model, const TrainConfig& cfg) {
  return run_training(data, model, nullptr, cfg, TrainMode::supervised);
}

TrainResult train_co_objective(const PreparedData& data, const PredictorConfig& model,
                               const ReconstructionConfig& recon, const TrainConfig& cfg) {
  return run_training(data, model, &recon, cfg, TrainMode::co_objective);
}

TrainResult train_scam(const PreparedData& data, const PredictorConfig& model, const ReconstructionConfig& recon,
                       const TrainConfig& cfg) {
  return run_training(data, model, &recon, cfg, TrainMode::scam);
}

TrainResult train(const PreparedData& data, const PredictorConfig& model, const ReconstructionConfig& recon,
                  const TrainConfig& cfg) {
  if (cfg.mode == TrainMode::grid_search) throw ConfigError("use train_grid_search for grid search");
  return run_training(data, model, &recon, cfg, cfg.mode);
}

nlohmann::json TrainResult::summary() const {
  nlohmann::json j;
  j["best_epoch"] = best_epoch;
  j["epochs_run"] = records.size();
  j["val"] = {{"mse", val.mse}, {"mae", val.mae}};
  j["test"] = {{"mse", test.mse}, {"mae", test.mae}};
  j["skipped_steps"] = records.empty() ? 0 : records.back().skipped_steps;
  j["parameters"] = predictor ? parameter_count(predictor->parameters()) : 0;
  j["reconstruction_parameters"] = reconstruction ? parameter_count(reconstruction->parameters()) : 0;
  return j;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

void write_epochs_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& records) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << "epoch,train_loss,train_mse,train_mae,val_mse,val_mae,test_mse,test_mae,rec_corrected,pred_corrected,"
         "sup_in_mask,sup_out_mask,l_rec,l_pred,l_target,in_mask_rate,corrected_rate,lambda_max,skipped_steps,"
         "wall_time\n";
  for (const auto& r : records) {
    const auto& b = r.breakdown;
    out << r.epoch;
    for (double v : {r.train_loss, r.train.mse, r.train.mae, r.val.mse, r.val.mae, r.test.mse, r.test.mae,
                     b.rec_corrected, b.pred_corrected, b.sup_in_mask, b.sup_out_mask, b.l_rec, b.l_pred,
                     b.l_target, r.in_mask_rate, r.corrected_rate, r.lambda_max}) {
      out << ',' << fmt(v);
    }
    out << ',' << r.skipped_steps << ',' << fmt(r.wall_time) << '\n';
  }
}

// ---- grid search --------------------------------------------------------

namespace {

double grad_norm(const std::vector<TensorPtr>& params) {
  double s = 0.0;
  for (const auto& p : params) {
    if (!p->has_grad) continue;
    for (double g : p->grad.data()) s += g * g;
  }
  return std::sqrt(s);
}

}  // namespace

GridSearchResult train_grid_search(const PreparedData& data, const PredictorConfig& model_cfg,
                                   const ReconstructionConfig& recon, const TrainConfig& cfg) {
  cfg.validate();
  const PredictorConfig model = fit_channels(model_cfg, data);
  GridSearchResult res;
  if (!cfg.identity_reconstruction) {
    if (recon.horizon != model.horizon) throw ConfigError("reconstruction horizon must equal the model horizon");
    res.reconstruction = std::make_unique<ReconstructionNet>(recon, derive_seed(cfg.seed, 2));
  }
  ReconstructionNet* g = res.reconstruction.get();
  const std::size_t chunk = 256;

  for (std::size_t i = 0; i < cfg.candidates; ++i) {
    GridRecord rec;
    rec.candidate = i;

    // inner loop: fresh predictor fitted to the frozen candidate labels
    Predictor f(model, derive_seed(cfg.seed, 1));
    const auto params = tensors_of(f.parameters());
    auto opt = make_optimizer(cfg.inner_optimizer, params, cfg.lr);
    std::mt19937_64 order_rng(derive_seed(cfg.seed, 3));
    bool done = false;
    while (!done) {
      const auto order = batch_order(data.train.size(), order_rng);
      std::size_t batches = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
      if (cfg.max_batches_per_epoch > 0) batches = std::min(batches, cfg.max_batches_per_epoch);
      double norm_sum = 0.0;
      std::size_t seen = 0;
      for (std::size_t bi = 0; bi < batches && !done; ++bi) {
        const std::size_t lo = bi * cfg.batch_size;
        const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
        const Batch batch = data.train.gather(std::span<const std::size_t>(order).subspan(lo, hi - lo));
        const Array labels = reconstruct(g, batch.y);
        Tape tape;
        Var pred = expand_series(f.forward(tape, batch.x, batch.channel, true), labels.dim(1));
        opt->zero_grad();
        tape.backward(mean(abs(sub(pred, tape.constant(labels)))));
        norm_sum += grad_norm(params);
        ++seen;
        opt->step();
        if (++rec.inner_steps >= cfg.inner_max_steps) done = true;
      }
      rec.final_grad_norm = norm_sum / static_cast<double>(seen);
      if (rec.final_grad_norm <= cfg.inner_grad_threshold) done = true;
    }

    // full pass: candidate losses, and the reconstruction gradient for the outer step
    std::vector<TensorPtr> phi = g ? tensors_of(g->parameters()) : std::vector<TensorPtr>{};
    for (auto& p : phi) p->zero_grad();
    double rec_sum = 0.0, pred_sum = 0.0, target_sum = 0.0, n_rec = 0.0, n_target = 0.0;
    for (std::size_t begin = 0; begin < data.train.size(); begin += chunk) {
      const Batch b = data.train.gather_range(begin, std::min(data.train.size(), begin + chunk));
      const Array pred = f.predict(b.x, b.channel);
      Tape tape;
      Var y = tape.constant(b.y);
      Var labels = g ? g->forward(tape, y).reconstruction : tape.constant(expand_series(b.y, 1));
      const std::size_t s = labels.shape()[1];
      Var rec_err = sum(abs(sub(labels, expand_series(y, s))));
      if (g) tape.backward(rec_err);
      rec_sum += rec_err.value().item();
      const Array pred_e = expand_series(pred, s);
      for (std::size_t k = 0; k < pred_e.size(); ++k) pred_sum += std::fabs(pred_e[k] - labels.value()[k]);
      for (std::size_t k = 0; k < pred.size(); ++k) target_sum += std::fabs(pred[k] - b.y[k]);
      n_rec += static_cast<double>(pred_e.size());
      n_target += static_cast<double>(pred.size());
    }
    rec.l_rec = rec_sum / n_rec;
    rec.l_pred = pred_sum / n_rec;
    rec.l_target = target_sum / n_target;
    rec.test = evaluate(f, data.test, cfg.raw_metrics ? &data.scaler : nullptr);
    res.records.push_back(rec);

    // outer step: full-batch gradient descent on the mean reconstruction loss
    if (g && i + 1 < cfg.candidates) {
      for (auto& p : phi) {
        if (!p->has_grad) continue;
        for (std::size_t k = 0; k < p->value.size(); ++k) p->value[k] -= cfg.outer_lr * p->grad[k] / n_rec;
      }
    }
    for (auto& p : phi) p->zero_grad();
  }
  return res;
}

void write_grid_csv(const std::filesystem::path& path, const std::vector<GridRecord>& records) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write " + path.string());
  out << "candidate,l_rec,l_pred,l_target,test_mse,test_mae,inner_steps,final_grad_norm\n";
  for (const auto& r : records) {
    out << r.candidate << ',' << fmt(r.l_rec) << ',' << fmt(r.l_pred) << ',' << fmt(r.l_target) << ','
        << fmt(r.test.mse) << ',' << fmt(r.test.mae) << ',' << r.inner_steps << ',' << fmt(r.final_grad_norm)
        << '\n';
  }
}

}  // namespace scam
