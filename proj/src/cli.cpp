#include "scam/cli.hpp"

#include <openssl/evp.h>

#include <atomic>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "scam/checkpoint.hpp"
#include "scam/errors.hpp"

namespace scam::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config parsing ---------------------------------------------------------

namespace {

std::string trimmed(const std::string& s) {
  const auto a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return {};
  return s.substr(a, s.find_last_not_of(" \t") - a + 1);
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw ConfigError("config key '" + key + "': expected a number, got \"" + v + "\"");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got \"" + v + "\"");
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(to_u64(key, v)); }

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got \"" + v + "\"");
}

std::vector<std::uint64_t> to_seeds(const std::string& key, const std::string& v) {
  std::vector<std::uint64_t> out;
  std::istringstream is(v);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(to_u64(key, trimmed(item)));
  if (out.empty()) throw ConfigError("config key '" + key + "': at least one seed is required");
  return out;
}

// Wraps parse_* helpers so their errors name the offending key.
template <class F>
auto named(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

using Setter = std::function<void(ExperimentConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"data.source", [](auto& c, auto&, auto& v) { c.data.source = v; }},
      {"data.path", [](auto& c, auto&, auto& v) { c.data.path = v; }},
      {"data.date_column", [](auto& c, auto& k, auto& v) { c.data.date_column = to_bool(k, v); }},
      {"data.train", [](auto& c, auto& k, auto& v) { c.data.split.train = to_double(k, v); }},
      {"data.val", [](auto& c, auto& k, auto& v) { c.data.split.val = to_double(k, v); }},
      {"data.test", [](auto& c, auto& k, auto& v) { c.data.split.test = to_double(k, v); }},
      {"data.lookback", [](auto& c, auto& k, auto& v) { c.data.lookback = to_size(k, v); }},
      {"data.horizon", [](auto& c, auto& k, auto& v) { c.data.horizon = to_size(k, v); }},
      {"data.stride", [](auto& c, auto& k, auto& v) { c.data.stride = to_size(k, v); }},

      {"synthetic.amplitude_a", [](auto& c, auto& k, auto& v) { c.data.synthetic.amplitude_a = to_double(k, v); }},
      {"synthetic.amplitude_b", [](auto& c, auto& k, auto& v) { c.data.synthetic.amplitude_b = to_double(k, v); }},
      {"synthetic.omega1", [](auto& c, auto& k, auto& v) { c.data.synthetic.omega1 = to_double(k, v); }},
      {"synthetic.omega2", [](auto& c, auto& k, auto& v) { c.data.synthetic.omega2 = to_double(k, v); }},
      {"synthetic.sigma1", [](auto& c, auto& k, auto& v) { c.data.synthetic.sigma1 = to_double(k, v); }},
      {"synthetic.sigma2", [](auto& c, auto& k, auto& v) { c.data.synthetic.sigma2 = to_double(k, v); }},
      {"synthetic.window_period", [](auto& c, auto& k, auto& v) { c.data.synthetic.window_period = to_size(k, v); }},
      {"synthetic.length", [](auto& c, auto& k, auto& v) { c.data.synthetic.length = to_size(k, v); }},
      {"synthetic.seed", [](auto& c, auto& k, auto& v) { c.data.synthetic.seed = to_u64(k, v); }},
      {"synthetic.output", [](auto& c, auto&, auto& v) { c.synth_output = v; }},

      {"model.backbone", [](auto& c, auto& k, auto& v) { c.model.backbone = named(k, [&] { return parse_backbone(v); }); }},
      {"model.hidden", [](auto& c, auto& k, auto& v) { c.model.hidden = to_size(k, v); }},
      {"model.snr", [](auto& c, auto& k, auto& v) { c.model.snr = named(k, [&] { return parse_snr(v); }); }},
      {"model.revin_affine", [](auto& c, auto& k, auto& v) { c.model.revin_affine = to_bool(k, v); }},

      {"reconstruction.conv_layers", [](auto& c, auto& k, auto& v) { c.reconstruction.conv_layers = to_size(k, v); }},
      {"reconstruction.dim_multiplier",
       [](auto& c, auto& k, auto& v) { c.reconstruction.dim_multiplier = to_size(k, v); }},
      {"reconstruction.hidden_dim", [](auto& c, auto& k, auto& v) { c.reconstruction.hidden_dim = to_size(k, v); }},
      {"reconstruction.series", [](auto& c, auto& k, auto& v) { c.reconstruction.series = to_size(k, v); }},

      {"train.mode", [](auto& c, auto& k, auto& v) { c.train.mode = named(k, [&] { return parse_mode(v); }); }},
      {"train.lr", [](auto& c, auto& k, auto& v) { c.train.lr = to_double(k, v); }},
      {"train.batch_size", [](auto& c, auto& k, auto& v) { c.train.batch_size = to_size(k, v); }},
      {"train.patience", [](auto& c, auto& k, auto& v) { c.train.patience = to_size(k, v); }},
      {"train.max_epochs", [](auto& c, auto& k, auto& v) { c.train.max_epochs = to_size(k, v); }},
      {"train.optimizer", [](auto& c, auto&, auto& v) { c.train.optimizer = v; }},
      {"train.max_batches_per_epoch",
       [](auto& c, auto& k, auto& v) { c.train.max_batches_per_epoch = to_size(k, v); }},
      {"train.raw_metrics", [](auto& c, auto& k, auto& v) { c.train.raw_metrics = to_bool(k, v); }},
      {"train.identity_reconstruction",
       [](auto& c, auto& k, auto& v) { c.train.identity_reconstruction = to_bool(k, v); }},
      {"train.track_sharpness", [](auto& c, auto& k, auto& v) { c.train.track_sharpness = to_bool(k, v); }},
      {"train.sharpness_windows", [](auto& c, auto& k, auto& v) { c.train.sharpness_windows = to_size(k, v); }},
      {"train.candidates", [](auto& c, auto& k, auto& v) { c.train.candidates = to_size(k, v); }},
      {"train.inner_max_steps", [](auto& c, auto& k, auto& v) { c.train.inner_max_steps = to_size(k, v); }},
      {"train.inner_grad_threshold",
       [](auto& c, auto& k, auto& v) { c.train.inner_grad_threshold = to_double(k, v); }},
      {"train.outer_lr", [](auto& c, auto& k, auto& v) { c.train.outer_lr = to_double(k, v); }},
      {"train.inner_optimizer", [](auto& c, auto&, auto& v) { c.train.inner_optimizer = v; }},

      {"run.out", [](auto& c, auto&, auto& v) { c.out = v; }},
      {"run.id", [](auto& c, auto&, auto& v) { c.run_id = v; }},
      {"run.seeds", [](auto& c, auto& k, auto& v) { c.seeds = to_seeds(k, v); }},

      {"diagnose.mask_channels", [](auto& c, auto& k, auto& v) { c.mask_channels = to_size(k, v); }},
  };
  return table;
}

// Lookback and horizon are set once under [data] and shared by both models.
void sync_shapes(ExperimentConfig& c) {
  c.model.lookback = c.data.lookback;
  c.model.horizon = c.data.horizon;
  c.reconstruction.horizon = c.data.horizon;
}

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream is(text);
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("malformed config (line " + std::to_string(e.line()) + "): " + e.message());
  }
  ExperimentConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key '" + section + "' must appear inside a [section]");
    for (const auto& [name, node] : body) {
      const std::string key = section + "." + name;
      const auto it = setters().find(key);
      if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
      it->second(cfg, key, trimmed(node.data()));
    }
  }
  sync_shapes(cfg);
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig cfg = parse_config_text(ss.str());
  // relative paths inside a config are relative to the config file
  const fs::path base = fs::absolute(path).parent_path();
  for (fs::path* p : {&cfg.data.path, &cfg.synth_output, &cfg.out}) {
    if (!p->empty() && p->is_relative()) *p = (base / *p).lexically_normal();
  }
  return cfg;
}

void apply_overrides(ExperimentConfig& cfg, const Overrides& o) {
  if (o.seed) cfg.seeds = {*o.seed};
  if (o.out) cfg.out = *o.out;
  try {
    if (o.mode) cfg.train.mode = parse_mode(*o.mode);
    if (o.snr) cfg.model.snr = parse_snr(*o.snr);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("command-line override: ") + e.what());
  }
  sync_shapes(cfg);
}

void ExperimentConfig::validate() const {
  if (data.source == "csv") {
    if (data.path.empty()) throw ConfigError("config key 'data.path' is required when data.source = csv");
  } else if (data.source == "synthetic") {
    named("synthetic", [&] { data.synthetic.validate(); return 0; });
  } else {
    throw ConfigError("config key 'data.source': expected csv or synthetic, got \"" + data.source + "\"");
  }
  named("data", [&] { data.split.validate(); return 0; });
  if (data.stride < 1) throw ConfigError("config key 'data.stride' must be >= 1");
  named("model", [&] { model.validate(); return 0; });
  if (train.mode != TrainMode::supervised) named("reconstruction", [&] { reconstruction.validate(); return 0; });
  named("train", [&] { train.validate(); return 0; });
  if (seeds.empty()) throw ConfigError("config key 'run.seeds': at least one seed is required");
  if (run_id.find_first_of("/\\") != std::string::npos || run_id == "." || run_id == "..") {
    throw ConfigError("config key 'run.id' must be a plain directory name");
  }
}

json to_json(const PredictorConfig& m) {
  return {{"backbone", to_string(m.backbone)}, {"lookback", m.lookback}, {"horizon", m.horizon},
          {"hidden", m.hidden},                {"snr", to_string(m.snr)}, {"revin_affine", m.revin_affine},
          {"channels", m.channels}};
}

json to_json(const ReconstructionConfig& r) {
  return {{"horizon", r.horizon}, {"conv_layers", r.conv_layers}, {"dim_multiplier", r.dim_multiplier},
          {"hidden_dim", r.hidden_dim}, {"series", r.series}};
}

PredictorConfig predictor_from_json(const json& j) {
  PredictorConfig m;
  try {
    m.backbone = parse_backbone(j.at("backbone").get<std::string>());
    m.lookback = j.at("lookback").get<std::size_t>();
    m.horizon = j.at("horizon").get<std::size_t>();
    m.hidden = j.at("hidden").get<std::size_t>();
    m.snr = parse_snr(j.at("snr").get<std::string>());
    m.revin_affine = j.at("revin_affine").get<bool>();
    m.channels = j.at("channels").get<std::size_t>();
  } catch (const json::exception& e) {
    throw LoadError(std::string("bad predictor settings in checkpoint: ") + e.what());
  }
  return m;
}

ReconstructionConfig reconstruction_from_json(const json& j) {
  ReconstructionConfig r;
  try {
    r.horizon = j.at("horizon").get<std::size_t>();
    r.conv_layers = j.at("conv_layers").get<std::size_t>();
    r.dim_multiplier = j.at("dim_multiplier").get<std::size_t>();
    r.hidden_dim = j.at("hidden_dim").get<std::size_t>();
    r.series = j.at("series").get<std::size_t>();
  } catch (const json::exception& e) {
    throw LoadError(std::string("bad reconstruction settings in checkpoint: ") + e.what());
  }
  return r;
}

json ExperimentConfig::to_json() const {
  const auto& s = data.synthetic;
  const auto& t = train;
  json j;
  j["data"] = {{"source", data.source},
               {"path", data.path.string()},
               {"date_column", data.date_column},
               {"split", {data.split.train, data.split.val, data.split.test}},
               {"lookback", data.lookback},
               {"horizon", data.horizon},
               {"stride", data.stride}};
  j["synthetic"] = {{"amplitude_a", s.amplitude_a}, {"amplitude_b", s.amplitude_b},
                    {"omega1", s.omega1},           {"omega2", s.omega2},
                    {"sigma1", s.sigma1},           {"sigma2", s.sigma2},
                    {"window_period", s.window_period}, {"length", s.length},
                    {"seed", s.seed}};
  j["model"] = cli::to_json(model);
  j["model"].erase("channels");
  j["reconstruction"] = cli::to_json(reconstruction);
  j["train"] = {{"mode", to_string(t.mode)},
                {"lr", t.lr},
                {"batch_size", t.batch_size},
                {"patience", t.patience},
                {"max_epochs", t.max_epochs},
                {"optimizer", t.optimizer},
                {"max_batches_per_epoch", t.max_batches_per_epoch},
                {"raw_metrics", t.raw_metrics},
                {"identity_reconstruction", t.identity_reconstruction},
                {"track_sharpness", t.track_sharpness},
                {"sharpness_windows", t.sharpness_windows},
                {"candidates", t.candidates},
                {"inner_max_steps", t.inner_max_steps},
                {"inner_grad_threshold", t.inner_grad_threshold},
                {"outer_lr", t.outer_lr},
                {"inner_optimizer", t.inner_optimizer}};
  j["seeds"] = seeds;
  j["diagnose"] = {{"mask_channels", mask_channels}};
  return j;
}

// ---- hashing and files --------------------------------------------------------

std::string git_blob_hash(std::string_view content) {
  const std::string header = "blob " + std::to_string(content.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw std::runtime_error("cannot allocate a digest context");
  const bool ok = EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) == 1 &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) == 1 &&
                  EVP_DigestUpdate(ctx, content.data(), content.size()) == 1 &&
                  EVP_DigestFinal_ex(ctx, digest, &len) == 1;
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("SHA-1 digest failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string config_hash(const ExperimentConfig& cfg) { return git_blob_hash(cfg.to_json().dump()); }

RawSeries load_series(const ExperimentConfig& cfg) {
  if (cfg.data.source == "csv") return load_csv(cfg.data.path, cfg.data.date_column);
  return make_synthetic(cfg.data.synthetic);
}

std::string input_hash(const ExperimentConfig& cfg, const RawSeries& raw) {
  if (cfg.data.source == "csv") {
    std::ifstream in(cfg.data.path, std::ios::binary);
    if (!in) throw LoadError("cannot open " + cfg.data.path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return git_blob_hash(ss.str());
  }
  std::ostringstream os;
  os << std::setprecision(17);
  for (double v : raw.values.data()) os << v << '\n';
  return git_blob_hash(os.str());
}

PreparedData prepare_data(const ExperimentConfig& cfg, const RawSeries& raw) {
  return prepare(raw, cfg.data.split, cfg.data.lookback, cfg.data.horizon, cfg.data.stride);
}

fs::path run_dir(const ExperimentConfig& cfg) {
  if (!cfg.run_id.empty()) return cfg.out / cfg.run_id;
  // seeds are left out so that a single-seed rerun finds the same directory
  json j = cfg.to_json();
  j.erase("seeds");
  return cfg.out / git_blob_hash(j.dump()).substr(0, 12);
}

fs::path seed_dir(const ExperimentConfig& cfg, std::uint64_t seed) {
  return run_dir(cfg) / ("seed-" + std::to_string(seed));
}

void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write " + tmp.string());
    out << content;
    if (!out.flush()) throw LoadError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ---- worker pool ----------------------------------------------------------------

std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

void run_pool(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(n, threads));
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!first) first = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  if (first) std::rethrow_exception(first);
}

// ---- checkpoints --------------------------------------------------------------

void save_models(const fs::path& path, const json& meta, Predictor& f, ReconstructionNet* g) {
  json m = meta;
  m["predictor"] = to_json(f.config());
  m["reconstruction"] = g ? to_json(g->config()) : json(nullptr);
  auto params = f.parameters();
  auto buffers = f.buffers();
  if (g) {
    for (auto& p : g->parameters()) params.push_back(p);
    for (auto& p : g->readout_parameters()) params.push_back(p);
  }
  save_checkpoint(path, m, checkpoint_blocks(params, buffers));
}

LoadedModels load_models(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError("checkpoint not found: " + path.string());
  const Checkpoint ckpt = load_checkpoint(path);
  LoadedModels out;
  out.meta = ckpt.meta;
  if (!ckpt.meta.contains("predictor")) throw LoadError(path.string() + ": no predictor settings");
  out.predictor = std::make_unique<Predictor>(predictor_from_json(ckpt.meta["predictor"]), 0);
  auto params = out.predictor->parameters();
  if (ckpt.meta.contains("reconstruction") && !ckpt.meta["reconstruction"].is_null()) {
    out.reconstruction = std::make_unique<ReconstructionNet>(reconstruction_from_json(ckpt.meta["reconstruction"]), 0);
    for (auto& p : out.reconstruction->parameters()) params.push_back(p);
    for (auto& p : out.reconstruction->readout_parameters()) params.push_back(p);
  }
  restore(ckpt, params, out.predictor->buffers());
  return out;
}

// ---- commands -----------------------------------------------------------------

namespace {

struct Context {
  ExperimentConfig cfg;
  RawSeries raw;
  PreparedData data;
  std::string config_hash;
  std::string input_hash;
  std::size_t threads = 1;
};

Context make_context(const CommandOptions& opt, bool need_data = true) {
  Context c;
  if (opt.config.empty()) throw ConfigError("--config is required");
  c.cfg = load_config(opt.config);
  apply_overrides(c.cfg, opt.overrides);
  c.cfg.validate();
  c.threads = opt.threads ? opt.threads : default_threads();
  c.config_hash = config_hash(c.cfg);
  if (need_data) {
    c.raw = load_series(c.cfg);
    c.input_hash = input_hash(c.cfg, c.raw);
    c.data = prepare_data(c.cfg, c.raw);
  }
  return c;
}

std::string pretty(const json& j) { return j.dump(2) + "\n"; }

void write_manifest(const Context& c, const std::string& command, const json& per_seed) {
  json m;
  m["tool_version"] = kToolVersion;
  m["command"] = command;
  m["config_hash"] = c.config_hash;
  m["input_hash"] = c.input_hash;
  m["seeds"] = per_seed;
  write_atomic(run_dir(c.cfg) / "manifest.json", pretty(m));
}

json metrics_json(const Metrics& m) { return {{"mse", m.mse}, {"mae", m.mae}}; }

// Contiguous stretch of the split for one channel: every H-th window, first candidate.
void dump_masks(const fs::path& dir, Predictor& f, const ReconstructionNet* g, const WindowDataset& split,
                std::size_t channels) {
  fs::create_directories(dir);
  const std::size_t h = split.horizon();
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < split.size(); k += h) idx.push_back(k);
  const Batch b = split.gather(idx);
  const Array pred = f.predict(b.x, b.channel);
  const Array rec = reconstruct(g, b.y);
  const std::size_t s = rec.dim(1);
  for (std::size_t c = 0; c < std::min(channels, split.channels()); ++c) {
    std::vector<double> y, p, r;
    std::size_t t0 = 0;
    bool first = true;
    for (std::size_t row = 0; row < b.rows(); ++row) {
      if (b.channel[row] != c) continue;
      if (first) t0 = b.target_start[row], first = false;
      for (std::size_t t = 0; t < h; ++t) {
        y.push_back(b.y.at(row, t));
        p.push_back(pred.at(row, t));
        r.push_back(rec[(row * s) * h + t]);
      }
    }
    write_mask_dump(dir / ("test-channel-" + std::to_string(c) + ".csv"), y, p, r, t0);
  }
}

json run_train_seed(const Context& c, std::uint64_t seed) {
  TrainConfig tc = c.cfg.train;
  tc.seed = seed;
  const fs::path dir = seed_dir(c.cfg, seed);
  fs::create_directories(dir / "checkpoints");
  TrainResult r = train(c.data, c.cfg.model, c.cfg.reconstruction, tc);
  write_epochs_csv(dir / "epochs.csv", r.records);
  json meta = {{"mode", to_string(tc.mode)}, {"seed", seed}, {"best_epoch", r.best_epoch},
               {"tool_version", kToolVersion}};
  save_models(dir / "checkpoints" / "best.ckpt", meta, *r.predictor, r.reconstruction.get());
  dump_masks(dir / "masks", *r.predictor, r.reconstruction.get(), c.data.test, c.cfg.mask_channels);
  json summary = r.summary();
  summary["seed"] = seed;
  summary["mode"] = to_string(tc.mode);
  summary["config"] = c.cfg.to_json();
  write_atomic(dir / "summary.json", pretty(summary));
  return summary;
}

json run_grid_seed(const Context& c, std::uint64_t seed) {
  TrainConfig tc = c.cfg.train;
  tc.seed = seed;
  const fs::path dir = seed_dir(c.cfg, seed);
  fs::create_directories(dir / "checkpoints");
  GridSearchResult r = train_grid_search(c.data, c.cfg.model, c.cfg.reconstruction, tc);
  write_grid_csv(dir / "grid.csv", r.records);
  const json meta = {{"reconstruction", to_json(r.reconstruction->config())}, {"seed", seed}, {"tool_version", kToolVersion}};
  auto params = r.reconstruction->parameters();
  for (auto& p : r.reconstruction->readout_parameters()) params.push_back(p);
  save_checkpoint(dir / "checkpoints" / "reconstruction.ckpt", meta, checkpoint_blocks(params, {}));
  json summary;
  summary["seed"] = seed;
  summary["mode"] = "grid_search";
  summary["config"] = c.cfg.to_json();
  json rows = json::array();
  for (const auto& g : r.records) {
    rows.push_back({{"candidate", g.candidate}, {"l_rec", g.l_rec}, {"l_pred", g.l_pred}, {"l_target", g.l_target},
                    {"test", metrics_json(g.test)}, {"inner_steps", g.inner_steps}});
  }
  summary["candidates"] = rows;
  write_atomic(dir / "summary.json", pretty(summary));
  return summary;
}

// Runs `body`, mapping configuration problems to exit code 2 and anything else to 1.
template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
}

json per_seed_metrics(const std::vector<json>& summaries) {
  json out = json::object();
  for (const auto& s : summaries) {
    json m = s;
    m.erase("config");
    out[std::to_string(s["seed"].get<std::uint64_t>())] = m;
  }
  return out;
}

int train_like(const CommandOptions& opt, std::ostream& out, std::ostream& err, bool force_grid) {
  return guarded(err, [&] {
    Context c = make_context(opt);
    const bool grid = force_grid || c.cfg.train.mode == TrainMode::grid_search;
    if (grid) {
      c.cfg.train.mode = TrainMode::grid_search;
      named("reconstruction", [&] { c.cfg.reconstruction.validate(); return 0; });
      c.config_hash = config_hash(c.cfg);
    }
    std::vector<json> summaries(c.cfg.seeds.size());
    run_pool(c.cfg.seeds.size(), c.threads, [&](std::size_t i) {
      summaries[i] = grid ? run_grid_seed(c, c.cfg.seeds[i]) : run_train_seed(c, c.cfg.seeds[i]);
    });
    write_manifest(c, grid ? "grid-search" : "train", per_seed_metrics(summaries));
    for (const auto& s : summaries) {
      json line = s;
      line.erase("config");
      if (!grid) line.erase("parameters"), line.erase("reconstruction_parameters");
      out << line.dump() << '\n';
    }
    out << "run directory: " << run_dir(c.cfg).string() << '\n';
    return int(kOk);
  });
}

fs::path checkpoint_for(const Context& c, const CommandOptions& opt, std::uint64_t seed) {
  if (!opt.checkpoint.empty()) return opt.checkpoint;
  return seed_dir(c.cfg, seed) / "checkpoints" / "best.ckpt";
}

void check_single_checkpoint(const Context& c, const CommandOptions& opt) {
  if (!opt.checkpoint.empty() && c.cfg.seeds.size() != 1) {
    throw ConfigError("--checkpoint needs exactly one seed; pass --seed");
  }
}

void write_breakdown(const fs::path& path, Predictor& f, const ReconstructionNet* g, const WindowDataset& split,
                     std::size_t batch_windows) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "batch,rec_corrected,pred_corrected,sup_in_mask,sup_out_mask,l_rec,l_pred,l_target,co_objective\n";
  std::size_t k = 0;
  for (std::size_t begin = 0; begin < split.size(); begin += batch_windows, ++k) {
    const Batch b = split.gather_range(begin, std::min(split.size(), begin + batch_windows));
    const Array rec = reconstruct(g, b.y);
    const std::size_t s = rec.dim(1);
    const Array pred = expand_series(f.predict(b.x, b.channel), s);
    const Array y = expand_series(b.y, s);
    const auto masks = compute_masks(rec, pred, y);
    const LossBreakdown d = loss_breakdown(rec, pred, y, masks);
    Tape t;
    const double co = co_objective_loss(t.constant(rec), t.constant(pred), t.constant(y)).value().item();
    os << k << ',' << d.rec_corrected << ',' << d.pred_corrected << ',' << d.sup_in_mask << ',' << d.sup_out_mask
       << ',' << d.l_rec << ',' << d.l_pred << ',' << d.l_target << ',' << co << '\n';
  }
  write_atomic(path, os.str());
}

json sharpness_json(Predictor& f, const ReconstructionNet* g, const WindowDataset& split, std::size_t windows) {
  const Batch probe = spread_batch(split, windows);
  const Array rec = reconstruct(g, probe.y);
  const std::size_t s = rec.dim(1), h = probe.y.dim(1);
  const auto masks = compute_masks(rec, expand_series(f.predict(probe.x, probe.channel), s), expand_series(probe.y, s));
  const Array in = mean_in_mask(masks, probe.rows(), s, h);
  Array outside(in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) outside[i] = 1.0 - in[i];
  json j;
  j["windows"] = probe.rows() / std::max<std::size_t>(1, split.channels());
  j["all"] = weighted_target_sharpness(f, probe, Array(probe.y.shape(), 1.0)).to_json();
  for (const auto& [name, w] : {std::pair<const char*, const Array*>{"out_of_mask", &outside}, {"in_mask", &in}}) {
    double total = 0.0;
    for (double v : w->data()) total += v;
    j[name] = total > 0.0 ? weighted_target_sharpness(f, probe, *w).to_json() : json(nullptr);
  }
  return j;
}

// Per-window instance normalisation, as RevIN applies to each series.
void append_normalised(std::vector<double>& out, const double* row, std::size_t n) {
  double mean = 0.0, var = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += row[i];
  mean /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) var += (row[i] - mean) * (row[i] - mean);
  const double sd = std::sqrt(var / static_cast<double>(n) + 1e-5);
  for (std::size_t i = 0; i < n; ++i) out.push_back((row[i] - mean) / sd);
}

void write_kl_table(const fs::path& path, const ReconstructionNet* g, const WindowDataset& split) {
  const std::size_t n = split.channels(), h = split.horizon();
  std::vector<std::vector<double>> labels(n), recs(n);
  for (std::size_t begin = 0; begin < split.size(); begin += 256) {
    const Batch b = split.gather_range(begin, std::min(split.size(), begin + 256));
    const Array rec = reconstruct(g, b.y);
    const std::size_t s = rec.dim(1);
    std::vector<double> mean_rec(h);
    for (std::size_t r = 0; r < b.rows(); ++r) {
      append_normalised(labels[b.channel[r]], &b.y.data()[r * h], h);
      std::fill(mean_rec.begin(), mean_rec.end(), 0.0);
      for (std::size_t k = 0; k < s; ++k)
        for (std::size_t t = 0; t < h; ++t) mean_rec[t] += rec[(r * s + k) * h + t] / static_cast<double>(s);
      append_normalised(recs[b.channel[r]], mean_rec.data(), h);
    }
  }
  std::ostringstream os;
  os << std::setprecision(17) << "channel_a,channel_b,kl_label,kl_reconstruction\n";
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      const auto hl = shared_histograms({labels[a], labels[b]});
      const auto hr = shared_histograms({recs[a], recs[b]});
      os << a << ',' << b << ',' << kl_alignment(hl[0], hl[1]) << ',' << kl_alignment(hr[0], hr[1]) << '\n';
    }
  }
  write_atomic(path, os.str());
}

}  // namespace

int cmd_train(const CommandOptions& opt, std::ostream& out, std::ostream& err) {
  return train_like(opt, out, err, false);
}

int cmd_grid_search(const CommandOptions& opt, std::ostream& out, std::ostream& err) {
  return train_like(opt, out, err, true);
}

int cmd_diagnose(const CommandOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Context c = make_context(opt);
    check_single_checkpoint(c, opt);
    std::vector<fs::path> dirs(c.cfg.seeds.size());
    run_pool(c.cfg.seeds.size(), c.threads, [&](std::size_t i) {
      const fs::path ckpt = checkpoint_for(c, opt, c.cfg.seeds[i]);
      LoadedModels m = load_models(ckpt);
      const fs::path dir = ckpt.parent_path().parent_path() / "diagnostics";
      fs::create_directories(dir);
      Predictor& f = *m.predictor;
      const ReconstructionNet* g = m.reconstruction.get();
      dump_masks(dir / "masks", f, g, c.data.test, c.cfg.mask_channels);
      write_breakdown(dir / "breakdown.csv", f, g, c.data.test, c.cfg.train.batch_size);
      write_atomic(dir / "sharpness.json", pretty(sharpness_json(f, g, c.data.val, c.cfg.train.sharpness_windows)));
      write_kl_table(dir / "kl.csv", g, c.data.test);
      dirs[i] = dir;
    });
    for (const auto& d : dirs) out << "diagnostics: " << d.string() << '\n';
    return int(kOk);
  });
}

int cmd_synth(const CommandOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Context c = make_context(opt, false);
    named("synthetic", [&] { c.cfg.data.synthetic.validate(); return 0; });
    const fs::path path = c.cfg.synth_output.empty() || opt.overrides.out ? c.cfg.out / "synthetic.csv"
                                                                          : c.cfg.synth_output;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    write_csv(tmp, make_synthetic(c.cfg.data.synthetic));
    fs::rename(tmp, path);
    out << "wrote " << path.string() << '\n';
    return int(kOk);
  });
}

int cmd_eval(const CommandOptions& opt, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const Context c = make_context(opt);
    check_single_checkpoint(c, opt);
    const Scaler* units = c.cfg.train.raw_metrics ? &c.data.scaler : nullptr;
    std::vector<json> rows(c.cfg.seeds.size());
    run_pool(c.cfg.seeds.size(), c.threads, [&](std::size_t i) {
      LoadedModels m = load_models(checkpoint_for(c, opt, c.cfg.seeds[i]));
      if (m.predictor->config().lookback != c.cfg.data.lookback ||
          m.predictor->config().horizon != c.cfg.data.horizon ||
          m.predictor->config().channels != c.data.test.channels()) {
        throw ConfigError("checkpoint shape does not match the configured data");
      }
      rows[i] = {{"seed", c.cfg.seeds[i]},
                 {"val", metrics_json(evaluate(*m.predictor, c.data.val, units))},
                 {"test", metrics_json(evaluate(*m.predictor, c.data.test, units))}};
    });
    for (const auto& r : rows) out << r.dump() << '\n';
    return int(kOk);
  });
}

}  // namespace scam::cli
