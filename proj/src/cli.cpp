#include "bpc/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "bpc/dataset_io.hpp"
#include "bpc/distill.hpp"
#include "bpc/errors.hpp"
#include "bpc/gaussian.hpp"
#include "bpc/metrics.hpp"
#include "bpc/model.hpp"
#include "bpc/rng.hpp"
#include "bpc/sampler.hpp"
#include "bpc/trajectory.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace bpc {
namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(s);
  while (std::getline(ss, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

double parse_double(const std::string& v, const std::string& key) {
  const char* s = v.c_str();
  char* end = nullptr;
  double x = std::strtod(s, &end);
  if (end == s || *end != '\0') {
    throw ConfigError("config key " + key + ": not a number: " + v);
  }
  return x;
}

std::size_t parse_count(const std::string& v, const std::string& key) {
  const char* s = v.c_str();
  char* end = nullptr;
  unsigned long long x = std::strtoull(s, &end, 10);
  if (end == s || *end != '\0' || v.find('-') != std::string::npos) {
    throw ConfigError("config key " + key + ": not a non-negative integer: " + v);
  }
  return static_cast<std::size_t>(x);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config key " + key + ": not a boolean: " + v);
}

// Flat key-value store resolved in precedence order: struct defaults, then
// preset values, then config-file entries, then explicit flags. Later set()
// calls overwrite earlier ones, so callers apply layers lowest first.
class Settings {
 public:
  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  void set_num(const std::string& key, double v) { set(key, fmt_double(v)); }
  void set_count(const std::string& key, std::size_t v) { set(key, std::to_string(v)); }

  bool has(const std::string& key) const { return kv_.count(key) != 0; }

  std::string str(const std::string& key, const std::string& def) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? def : it->second;
  }
  double num(const std::string& key, double def) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? def : parse_double(it->second, key);
  }
  std::size_t count(const std::string& key, std::size_t def) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? def : parse_count(it->second, key);
  }
  bool flag(const std::string& key, bool def) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? def : parse_bool(it->second, key);
  }

  const std::map<std::string, std::string>& raw() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

// every key any subcommand understands; config files are validated against
// this vocabulary so typos fail loudly instead of silently defaulting
const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "seed",
      "data.csv_labels",
      "model.family",
      "model.input_dim",
      "model.classes",
      "model.hidden",
      "model.weight_decay",
      "model.prior_mean",
      "model.prior_var",
      "model.like_var",
      "experts.count",
      "experts.epochs",
      "experts.lr",
      "experts.minibatch",
      "distill.method",
      "distill.size",
      "distill.outer_steps",
      "distill.inner_steps_u",
      "distill.inner_steps_x",
      "distill.inner_lr",
      "distill.outer_lr",
      "distill.max_start_epoch",
      "distill.fkl_start_shrink",
      "distill.mc_samples",
      "distill.sigma_u",
      "distill.sigma_x",
      "distill.minibatch",
      "distill.rescale_minibatch",
      "distill.log_interval",
      "distill.max_segment_retries",
      "distill.augment",
      "distill.augment_sigma",
      "sampler.kind",
      "sampler.iterations",
      "sampler.leapfrog_steps",
      "sampler.step_size",
      "sampler.sigma_theta",
      "sampler.sigma_r",
      "sampler.weight_decay",
      "sampler.burn_in",
      "sampler.momentum_decay",
      "sampler.temperature",
      "sampler.augment",
      "sampler.augment_sigma",
      "eval.bins",
  };
  return keys;
}

// toml-style text: optional [section] headers prefix the keys that follow,
// "key = value" lines, # comments, quotes around values stripped
void apply_config_file(Settings& s, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) {
      bool in_quote = false;
      for (std::size_t i = 0; i < hash; ++i) in_quote ^= (line[i] == '"');
      if (!in_quote) line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config file " + path + " line " +
                        std::to_string(lineno) + ": expected key = value");
    }
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    if (key.empty() || value.empty()) {
      throw ConfigError("config file " + path + " line " +
                        std::to_string(lineno) + ": empty key or value");
    }
    if (!section.empty()) key = section + "." + key;
    if (!known_keys().count(key)) {
      throw ConfigError("config file " + path + " line " +
                        std::to_string(lineno) + ": unknown key " + key);
    }
    s.set(key, value);
  }
}

void require_preset(const std::string& preset) {
  if (preset != "ipc1" && preset != "ipc10" && preset != "ipc20") {
    throw ConfigError("unknown preset " + preset +
                      " (expected ipc1, ipc10 or ipc20)");
  }
}

std::size_t preset_ipc(const std::string& preset) {
  if (preset == "ipc1") return 1;
  if (preset == "ipc10") return 10;
  return 20;
}

// per-preset distillation defaults; the w inner rate reuses the fkl value
// for its preset since the remaining hyperparameters are shared across
// methods
void apply_training_preset(Settings& s, const std::string& preset, Method m) {
  require_preset(preset);
  s.set_count("distill.size", preset_ipc(preset));
  s.set("distill.outer_steps", "5000");
  s.set("distill.max_start_epoch", preset == "ipc1" ? "2"
                                   : preset == "ipc10" ? "20"
                                                       : "30");
  s.set("distill.inner_steps_u", preset == "ipc1" ? "50" : "30");
  const char* eta = preset == "ipc1" ? "0.01" : "0.03";
  switch (m) {
    case Method::rkl:
      s.set("distill.inner_lr", eta);
      s.set("distill.mc_samples", "10");
      s.set("distill.sigma_u", "0.01");
      s.set("distill.minibatch", "1000");
      break;
    case Method::w:
      s.set("distill.inner_steps_x", "2");
      s.set("distill.inner_lr", eta);
      break;
    case Method::fkl:
      s.set("distill.inner_steps_x", "1");
      s.set("distill.inner_lr", eta);
      s.set("distill.mc_samples", "30");
      s.set("distill.sigma_u", "0.01");
      s.set("distill.sigma_x", "0.01");
      break;
    case Method::dc:
      break;
  }
}

void apply_sampling_preset(Settings& s, const std::string& preset,
                           const std::string& kind) {
  require_preset(preset);
  const bool ipc1 = preset == "ipc1";
  s.set("sampler.iterations", ipc1 ? "20" : "100");
  s.set("sampler.burn_in", ipc1 ? "10" : "50");
  s.set("sampler.sigma_theta", "0.1");
  if (kind == "hmc") {
    s.set("sampler.leapfrog_steps", ipc1 ? "20" : "5");
    s.set("sampler.sigma_r", ipc1 ? "0.01" : "0.1");
    s.set("sampler.step_size", ipc1 ? "0.05" : "0.01");
    s.set("sampler.weight_decay", ipc1 ? "0.5" : "1.5");
  } else {
    s.set("sampler.leapfrog_steps", "5");
    s.set("sampler.sigma_r", "0.1");
    s.set("sampler.step_size", ipc1 ? "0.03" : "0.01");
    s.set("sampler.weight_decay",
          ipc1 ? "1.0" : (preset == "ipc20" ? "1.0" : "1.5"));
    s.set("sampler.momentum_decay", "0.1");
    s.set("sampler.temperature", "0.01");
  }
}

std::string resolve_outdir(const std::string& flag_value) {
  std::string dir = flag_value;
  if (dir.empty()) {
    const char* env = std::getenv("BPC_OUT");
    if (env && *env) dir = env;
  }
  if (dir.empty()) dir = ".";
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir);
  return dir;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path);
}

// resolved settings snapshot, written before any work so failed runs still
// record what they were asked to do
void echo_resolved(const std::string& outdir, const std::string& command,
                   const std::string& preset, const Settings& s) {
  json doc;
  doc["command"] = command;
  doc["preset"] = preset.empty() ? json(nullptr) : json(preset);
  json kv = json::object();
  for (const auto& [k, v] : s.raw()) kv[k] = v;
  doc["settings"] = kv;
  write_text(outdir + "/config.resolved.json", doc.dump(2) + "\n");
}

Dataset load_any_dataset(const std::string& path, const Settings& s) {
  if (path.size() > 4 && path.compare(path.size() - 4, 4, ".csv") == 0) {
    return load_dataset_csv(path, s.flag("data.csv_labels", true));
  }
  return load_dataset_bpcd(path);
}

std::vector<double> parse_vector(const std::string& text,
                                 const std::string& key) {
  std::vector<double> out;
  for (const std::string& part : split_list(text)) {
    out.push_back(parse_double(part, key));
  }
  if (out.empty()) throw ConfigError("config key " + key + ": empty list");
  return out;
}

// model spec from settings with gaps inferred from the dataset: feature
// dimension from the features, class count from the labels, family from
// whether labels exist
ModelSpec model_from(const Settings& s, const Dataset* data) {
  std::string fam = s.str("model.family", "");
  if (fam.empty()) {
    if (s.has("model.hidden")) {
      fam = "mlp-1hidden";
    } else if (data && data->has_labels()) {
      fam = "softmax-linear";
    } else {
      fam = "gaussian-location";
    }
  }
  Family family;
  try {
    family = family_from_name(fam);
  } catch (const Error& e) {
    throw ConfigError(std::string("config key model.family: ") + e.what());
  }
  std::size_t d = s.count("model.input_dim", data ? data->dim() : 0);
  if (d == 0) throw ConfigError("model.input_dim missing and not inferable");

  if (family == Family::gaussian_location) {
    Tensor mean = Tensor::zeros({d});
    if (s.has("model.prior_mean")) {
      std::vector<double> m =
          parse_vector(s.str("model.prior_mean", ""), "model.prior_mean");
      if (m.size() == 1) {
        for (double& v : mean.data) v = m[0];
      } else if (m.size() == d) {
        mean.data = m;
      } else {
        throw ConfigError("model.prior_mean: expected 1 or " +
                          std::to_string(d) + " values");
      }
    }
    return make_gaussian_location(
        d, std::move(mean), Covariance::Isotropic(d, s.num("model.prior_var", 1.0)),
        Covariance::Isotropic(d, s.num("model.like_var", 1.0)));
  }

  std::size_t classes = s.count("model.classes", 0);
  if (classes == 0 && data && data->has_labels()) {
    long top = 0;
    for (long l : data->labels) top = std::max(top, l);
    classes = static_cast<std::size_t>(top) + 1;
  }
  if (classes < 2) throw ConfigError("model.classes missing and not inferable");
  double wd = s.num("model.weight_decay", 0.0);
  if (family == Family::softmax_linear) {
    return make_softmax_linear(d, classes, wd);
  }
  return make_mlp_1hidden(d, s.count("model.hidden", 16), classes, wd);
}

Augmentation augment_from(const Settings& s, const std::string& prefix) {
  Augmentation aug;
  std::string kind = s.str(prefix + ".augment", "identity");
  try {
    aug.kind = augment_kind_from_name(kind);
  } catch (const Error& e) {
    throw ConfigError("config key " + prefix + ".augment: " + e.what());
  }
  aug.sigma = s.num(prefix + ".augment_sigma", 0.0);
  return aug;
}

DistillConfig distill_from(const Settings& s, Method method) {
  DistillConfig cfg;
  cfg.method = method;
  cfg.coreset_size = s.count("distill.size", cfg.coreset_size);
  cfg.outer_steps = s.count("distill.outer_steps", cfg.outer_steps);
  cfg.inner_steps_u = s.count("distill.inner_steps_u", cfg.inner_steps_u);
  cfg.inner_steps_x = s.count("distill.inner_steps_x", cfg.inner_steps_x);
  cfg.inner_lr = s.num("distill.inner_lr", cfg.inner_lr);
  cfg.outer_lr = s.num("distill.outer_lr", cfg.outer_lr);
  cfg.max_start_epoch = s.count("distill.max_start_epoch", cfg.max_start_epoch);
  cfg.fkl_start_shrink = s.count("distill.fkl_start_shrink", cfg.fkl_start_shrink);
  cfg.mc_samples = s.count("distill.mc_samples", cfg.mc_samples);
  cfg.sigma_u = s.num("distill.sigma_u", cfg.sigma_u);
  cfg.sigma_x = s.num("distill.sigma_x", cfg.sigma_x);
  cfg.minibatch = s.count("distill.minibatch", cfg.minibatch);
  cfg.rescale_minibatch = s.flag("distill.rescale_minibatch", cfg.rescale_minibatch);
  cfg.log_interval = s.count("distill.log_interval", cfg.log_interval);
  cfg.max_segment_retries =
      s.count("distill.max_segment_retries", cfg.max_segment_retries);
  cfg.augment = augment_from(s, "distill");
  cfg.seed = s.count("seed", 0);
  return cfg;
}

HmcConfig hmc_from(const Settings& s) {
  HmcConfig cfg;
  cfg.iterations = s.count("sampler.iterations", cfg.iterations);
  cfg.leapfrog_steps = s.count("sampler.leapfrog_steps", cfg.leapfrog_steps);
  cfg.step_size = s.num("sampler.step_size", cfg.step_size);
  cfg.sigma_theta = s.num("sampler.sigma_theta", cfg.sigma_theta);
  cfg.sigma_r = s.num("sampler.sigma_r", cfg.sigma_r);
  cfg.weight_decay = s.num("sampler.weight_decay", cfg.weight_decay);
  cfg.burn_in = s.count("sampler.burn_in", cfg.burn_in);
  return cfg;
}

SghmcConfig sghmc_from(const Settings& s) {
  SghmcConfig cfg;
  static_cast<HmcConfig&>(cfg) = hmc_from(s);
  cfg.momentum_decay = s.num("sampler.momentum_decay", cfg.momentum_decay);
  cfg.noise_scale = s.num("sampler.temperature", cfg.noise_scale);
  cfg.augment = augment_from(s, "sampler");
  return cfg;
}

std::string file_fingerprint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path + " for hashing");
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[4096];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ull;
    }
    if (!in) break;
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(h));
  return hex;
}

std::string utc_timestamp() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------
// experts train

struct ExpertsArgs {
  std::string data_path, config, preset, out, seed, count, epochs, lr, minibatch;
};

int run_experts_train(const ExpertsArgs& a) {
  Settings s;
  if (!a.config.empty()) apply_config_file(s, a.config);
  if (!a.preset.empty()) require_preset(a.preset);
  if (!a.seed.empty()) s.set("seed", a.seed);
  if (!a.count.empty()) s.set("experts.count", a.count);
  if (!a.epochs.empty()) s.set("experts.epochs", a.epochs);
  if (!a.lr.empty()) s.set("experts.lr", a.lr);
  if (!a.minibatch.empty()) s.set("experts.minibatch", a.minibatch);

  std::string outdir = resolve_outdir(a.out);
  echo_resolved(outdir, "experts train", a.preset, s);

  Dataset data = load_any_dataset(a.data_path, s);
  ModelSpec spec = model_from(s, &data);
  const std::size_t count = s.count("experts.count", 10);
  const std::size_t epochs = s.count("experts.epochs", 30);
  const double lr = s.num("experts.lr", 0.01);
  const std::size_t minibatch = s.count("experts.minibatch", 0);
  const std::uint64_t seed = s.count("seed", 0);
  if (count == 0) throw ConfigError("experts.count must be positive");

  Rng root(seed);
  Rng expert_rng = root.split("experts");
  json files = json::array();
  for (std::size_t k = 0; k < count; ++k) {
    const std::uint64_t expert_seed = expert_rng.split(k).next_u64();
    TrajectoryBuffer buffer = train_expert(spec, data, epochs, lr, expert_seed, minibatch);
    for (std::size_t e = 0; e < buffer.snapshots.size(); ++e) {
      const double loss =
          potential_energy_value(spec, data,
                                 make_params(spec, buffer.snapshots[e]),
                                 spec.weight_decay) /
          static_cast<double>(data.size());
      std::printf("expert %zu epoch %zu loss %.6f\n", k, e, loss);
    }
    char name[48];
    std::snprintf(name, sizeof(name), "expert_%03zu.bpct", k);
    save_trajectory(outdir + "/" + name, buffer);
    files.push_back(name);
  }

  json manifest;
  manifest["model"] = spec.id();
  manifest["dataset"] = dataset_fingerprint(data);
  manifest["count"] = count;
  manifest["epochs"] = epochs;
  manifest["lr"] = lr;
  manifest["minibatch"] = minibatch;
  manifest["seed"] = seed;
  manifest["files"] = files;
  manifest["created_utc"] = utc_timestamp();
  write_text(outdir + "/experts.json", manifest.dump(2) + "\n");
  std::printf("wrote %zu expert buffers to %s\n", count, outdir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// distill

struct DistillArgs {
  std::string data_path, expert_dir, method, config, preset, out, seed, steps,
      size, log_interval;
};

int run_distill(const DistillArgs& a) {
  Method method;
  try {
    method = method_from_name(a.method);
  } catch (const Error& e) {
    throw ConfigError(std::string("--method: ") + e.what());
  }

  Settings s;
  if (!a.preset.empty()) apply_training_preset(s, a.preset, method);
  if (!a.config.empty()) apply_config_file(s, a.config);
  if (!a.seed.empty()) s.set("seed", a.seed);
  if (!a.steps.empty()) s.set("distill.outer_steps", a.steps);
  if (!a.size.empty()) s.set("distill.size", a.size);
  if (!a.log_interval.empty()) s.set("distill.log_interval", a.log_interval);
  s.set("distill.method", method_name(method));

  std::string outdir = resolve_outdir(a.out);
  echo_resolved(outdir, "distill", a.preset, s);

  Dataset data = load_any_dataset(a.data_path, s);
  ModelSpec spec = model_from(s, &data);
  DistillConfig cfg = distill_from(s, method);

  if (!fs::is_directory(a.expert_dir)) {
    throw IoError("expert directory not found: " + a.expert_dir);
  }
  std::vector<std::string> buffer_files;
  for (const auto& entry : fs::directory_iterator(a.expert_dir)) {
    if (entry.path().extension() == ".bpct") {
      buffer_files.push_back(entry.path().string());
    }
  }
  std::sort(buffer_files.begin(), buffer_files.end());
  std::vector<TrajectoryBuffer> buffers = load_trajectory_dir(a.expert_dir);

  DistillResult result = distill(spec, data, buffers, cfg);

  save_dataset_bpcd(outdir + "/coreset.bpcd", result.coreset.data);
  write_divergence_csv(outdir + "/divergence.csv", result.divergence_log);

  json manifest;
  manifest["method"] = method_name(method);
  manifest["model"] = spec.id();
  manifest["dataset"] = dataset_fingerprint(data);
  manifest["coreset_points"] = result.coreset.size();
  manifest["seed"] = cfg.seed;
  json cfg_json = json::object();
  for (const auto& [k, v] : s.raw()) cfg_json[k] = v;
  manifest["settings"] = cfg_json;
  json hashes = json::array();
  for (const std::string& f : buffer_files) {
    json h;
    h["file"] = fs::path(f).filename().string();
    h["hash"] = file_fingerprint(f);
    hashes.push_back(h);
  }
  manifest["expert_buffers"] = hashes;
  write_text(outdir + "/manifest.json", manifest.dump(2) + "\n");

  std::printf("distilled %zu points with %s in %zu steps; %zu divergence rows\n",
              result.coreset.size(), method_name(method), cfg.outer_steps,
              result.divergence_log.size());
  std::printf("coreset: %s/coreset.bpcd\n", outdir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// sample

struct SampleArgs {
  std::string coreset, sampler, config, preset, out, seed, iterations, burn_in,
      step_size, leapfrog;
};

int run_sample(const SampleArgs& a) {
  if (a.sampler != "hmc" && a.sampler != "asghmc") {
    throw ConfigError("--sampler: expected hmc or asghmc, got " + a.sampler);
  }

  Settings s;
  if (!a.preset.empty()) apply_sampling_preset(s, a.preset, a.sampler);
  if (!a.config.empty()) apply_config_file(s, a.config);
  if (!a.seed.empty()) s.set("seed", a.seed);
  if (!a.iterations.empty()) s.set("sampler.iterations", a.iterations);
  if (!a.burn_in.empty()) s.set("sampler.burn_in", a.burn_in);
  if (!a.step_size.empty()) s.set("sampler.step_size", a.step_size);
  if (!a.leapfrog.empty()) s.set("sampler.leapfrog_steps", a.leapfrog);
  s.set("sampler.kind", a.sampler);

  std::string outdir = resolve_outdir(a.out);
  echo_resolved(outdir, "sample", a.preset, s);

  Dataset coreset = load_any_dataset(a.coreset, s);
  ModelSpec spec = model_from(s, &coreset);
  Rng rng(s.count("seed", 0));

  Chain chain;
  if (a.sampler == "hmc") {
    chain = hmc_sample(spec, coreset, hmc_from(s), rng);
  } else {
    chain = asghmc_sample(spec, coreset, sghmc_from(s), rng);
  }

  TrajectoryBuffer buffer = chain_buffer(spec, chain);
  buffer.meta.seed = s.count("seed", 0);
  buffer.meta.dataset_id = dataset_fingerprint(coreset);
  save_trajectory(outdir + "/chain.bpct", buffer);

  json info;
  info["sampler"] = a.sampler;
  info["model"] = spec.id();
  info["iterations"] = chain.iterations;
  info["retained"] = chain.samples.size();
  info["accepted"] = chain.accepted;
  info["nonfinite_rejected"] = chain.nonfinite_rejected;
  info["acceptance_rate"] = chain.acceptance_rate();
  info["warnings"] = chain.warnings;
  info["seed"] = s.count("seed", 0);
  write_text(outdir + "/chain.json", info.dump(2) + "\n");

  std::printf("sampled %zu iterations, retained %zu; acceptance %.3f\n",
              chain.iterations, chain.samples.size(), chain.acceptance_rate());
  std::printf("chain: %s/chain.bpct\n", outdir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string chain, test, config, out, bins;
  std::string tag_method = "-", tag_sampler = "-";
  std::string tag_ipc, tag_seed;
};

int run_eval(const EvalArgs& a) {
  Settings s;
  if (!a.config.empty()) apply_config_file(s, a.config);
  if (!a.bins.empty()) s.set("eval.bins", a.bins);

  std::string outdir = resolve_outdir(a.out);
  echo_resolved(outdir, "eval", "", s);

  Dataset test = load_any_dataset(a.test, s);
  if (!test.has_labels()) {
    throw ContractError("eval: test set has no labels");
  }
  ModelSpec spec = model_from(s, &test);

  TrajectoryBuffer buffer = load_trajectory(a.chain);
  if (!buffer.model_id.empty() && buffer.model_id != spec.id()) {
    throw ContractError("eval: chain was sampled for model " + buffer.model_id +
                        " but the configuration resolves to " + spec.id());
  }
  Chain chain;
  chain.iterations = buffer.snapshots.size();
  for (const Tensor& t : buffer.snapshots) {
    chain.samples.push_back(make_params(spec, t));
  }

  PredictiveDistribution pred = predictive(spec, chain, test);
  MetricsReport report = metrics(pred, test.labels, s.count("eval.bins", 15));

  write_text(outdir + "/metrics.json", metrics_json(report));
  const std::size_t ipc = a.tag_ipc.empty() ? 0 : parse_count(a.tag_ipc, "--ipc");
  const std::uint64_t seed =
      a.tag_seed.empty() ? 0 : parse_count(a.tag_seed, "--seed");
  std::string row =
      metrics_csv_row(report, a.tag_method, ipc, a.tag_sampler, seed);
  write_text(outdir + "/metrics.csv", metrics_csv_header() + "\n" + row + "\n");

  std::printf("%s\n%s\n", metrics_csv_header().c_str(), row.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// divergence

struct DivergenceArgs {
  std::string a, b, out, seed;
  std::size_t mc = 0;
};

int run_divergence(const DivergenceArgs& a) {
  Settings s;
  if (!a.seed.empty()) s.set("seed", a.seed);
  std::string outdir = resolve_outdir(a.out);
  echo_resolved(outdir, "divergence", "", s);

  GaussianApprox ga = load_gaussian_json(a.a);
  GaussianApprox gb = load_gaussian_json(a.b);

  json doc;
  doc["kl_ab"] = gaussian_kl(ga, gb);
  doc["kl_ba"] = gaussian_kl(gb, ga);
  doc["w2sq"] = gaussian_w2sq(ga, gb);
  std::printf("kl(a||b) = %.12g\n", doc["kl_ab"].get<double>());
  std::printf("kl(b||a) = %.12g\n", doc["kl_ba"].get<double>());
  std::printf("w2sq     = %.12g\n", doc["w2sq"].get<double>());

  if (a.mc > 0) {
    Rng rng(s.count("seed", 0));
    Rng r1 = rng.split("kl_ab"), r2 = rng.split("kl_ba"), r3 = rng.split("w2");
    McEstimate kab = mc_kl(ga, gb, a.mc, r1);
    McEstimate kba = mc_kl(gb, ga, a.mc, r2);
    McEstimate w2 = mc_w2sq_coupling(ga, gb, a.mc, r3);
    doc["mc"] = {
        {"samples", a.mc},
        {"kl_ab", {{"value", kab.value}, {"std_error", kab.std_error}}},
        {"kl_ba", {{"value", kba.value}, {"std_error", kba.std_error}}},
        {"w2sq", {{"value", w2.value}, {"std_error", w2.std_error}}},
    };
    std::printf("mc kl(a||b) = %.12g (se %.3g)\n", kab.value, kab.std_error);
    std::printf("mc kl(b||a) = %.12g (se %.3g)\n", kba.value, kba.std_error);
    std::printf("mc w2sq     = %.12g (se %.3g)\n", w2.value, w2.std_error);
  }

  write_text(outdir + "/divergence.json", doc.dump(2) + "\n");
  return 0;
}

// ---------------------------------------------------------------------------
// synthetic

struct SyntheticArgs {
  std::string out, seed, steps, sizes, methods, threads, log_interval, experts,
      dim, count;
};

// distillation settings for the conjugate benchmark; the inner rate scales
// as 1/M so the coreset ascent contracts at the same rate at every size
DistillConfig synthetic_config(Method m, std::size_t size, std::size_t steps,
                               std::size_t log_interval, std::uint64_t seed) {
  DistillConfig cfg;
  cfg.method = m;
  cfg.coreset_size = size;
  cfg.outer_steps = steps;
  cfg.inner_steps_u = 10;
  cfg.inner_lr = 0.5 / static_cast<double>(size);
  cfg.max_start_epoch = 8;
  cfg.log_interval = log_interval;
  cfg.seed = seed;
  switch (m) {
    case Method::rkl:
      cfg.outer_lr = 30.0;
      cfg.mc_samples = 10;
      cfg.sigma_u = 0.1;
      cfg.minibatch = 1000;  // clamped to the dataset size: full batch here
      break;
    case Method::w:
      // the normalized trajectory objective amplifies by the inverse segment
      // separation, so keep starts shallow and steps conservative
      cfg.inner_steps_x = 2;
      cfg.inner_lr = 0.1 / static_cast<double>(size);
      cfg.max_start_epoch = 4;
      cfg.outer_lr = 0.005;
      break;
    case Method::fkl:
      cfg.inner_steps_x = 1;
      cfg.outer_lr = 0.3;
      cfg.mc_samples = 30;
      cfg.sigma_u = 0.01;
      cfg.sigma_x = 0.01;
      break;
    case Method::dc:
      cfg.outer_lr = 0.05;
      break;
  }
  return cfg;
}

// spearman rank correlation; average ranks on ties
double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    std::size_t i = 0;
    while (i < idx.size()) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j));
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  std::vector<double> rx = ranks(xs), ry = ranks(ys);
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

int run_synthetic(const SyntheticArgs& a) {
  Settings s;
  if (!a.seed.empty()) s.set("seed", a.seed);
  const std::uint64_t seed = s.count("seed", 0);
  const std::size_t steps = a.steps.empty() ? 500 : parse_count(a.steps, "--steps");
  const std::size_t log_interval =
      a.log_interval.empty() ? 25 : parse_count(a.log_interval, "--log-interval");
  const std::size_t expert_count =
      a.experts.empty() ? 10 : parse_count(a.experts, "--experts");
  const std::size_t dim = a.dim.empty() ? 10 : parse_count(a.dim, "--dim");
  const std::size_t count = a.count.empty() ? 100 : parse_count(a.count, "--count");

  std::vector<std::size_t> sizes;
  for (const std::string& part :
       split_list(a.sizes.empty() ? "5,20,40,60,80,100" : a.sizes)) {
    sizes.push_back(parse_count(part, "--sizes"));
  }
  std::vector<Method> methods;
  for (const std::string& part :
       split_list(a.methods.empty() ? "rkl,w,fkl" : a.methods)) {
    methods.push_back(method_from_name(part));
  }
  if (sizes.empty() || methods.empty()) {
    throw ConfigError("synthetic: empty --sizes or --methods");
  }

  std::string outdir = resolve_outdir(a.out);
  Settings echo;
  echo.set_count("seed", seed);
  echo.set_count("distill.outer_steps", steps);
  echo.set_count("distill.log_interval", log_interval);
  echo.set_count("experts.count", expert_count);
  echo.set_count("synthetic.dim", dim);
  echo.set_count("synthetic.count", count);
  echo.set("synthetic.sizes", a.sizes.empty() ? "5,20,40,60,80,100" : a.sizes);
  echo.set("synthetic.methods", a.methods.empty() ? "rkl,w,fkl" : a.methods);
  echo_resolved(outdir, "synthetic", "", echo);

  // conjugate benchmark instance: vague prior, unit likelihood noise, data
  // centered at the prior mean
  ModelSpec spec = make_gaussian_location(dim, Tensor::zeros({dim}),
                                          Covariance::Isotropic(dim, 10.0),
                                          Covariance::Isotropic(dim, 1.0));
  Rng root(seed);
  Rng data_rng = root.split("data");
  Tensor feats = Tensor::zeros({count, dim});
  for (double& v : feats.data) v = data_rng.normal();
  Dataset data = make_dataset(std::move(feats));

  // slow full-batch experts keep consecutive snapshots well separated, which
  // the trajectory-matching objective needs for stable normalization
  Rng expert_rng = root.split("experts");
  std::vector<TrajectoryBuffer> buffers;
  for (std::size_t k = 0; k < expert_count; ++k) {
    buffers.push_back(
        train_expert(spec, data, 16, 0.001, expert_rng.split(k).next_u64(), 0));
  }

  struct Job {
    Method method;
    std::size_t size;
    DistillConfig cfg;
  };
  std::vector<Job> jobs;
  Rng distill_rng = root.split("distill");
  for (Method m : methods) {
    for (std::size_t size : sizes) {
      const std::uint64_t job_seed =
          distill_rng.split(method_name(m)).split(size).next_u64();
      jobs.push_back({m, size,
                      synthetic_config(m, size, steps, log_interval, job_seed)});
    }
  }

  // worker pool; job seeds were fixed above so results are independent of
  // scheduling
  std::vector<DistillResult> results(jobs.size());
  std::vector<std::exception_ptr> failures(jobs.size());
  std::atomic<std::size_t> next{0};
  std::size_t nthreads = a.threads.empty() ? 0 : parse_count(a.threads, "--threads");
  if (nthreads == 0) {
    nthreads = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  }
  nthreads = std::min(nthreads, jobs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < nthreads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        try {
          results[i] = distill(spec, data, buffers, jobs[i].cfg);
        } catch (...) {
          failures[i] = std::current_exception();
        }
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (const std::exception_ptr& p : failures) {
    if (p) std::rethrow_exception(p);
  }

  struct Row {
    std::string method;
    std::size_t size;
    std::size_t step;
    std::string kind;
    double value;
  };
  std::vector<Row> by_step;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    for (const DivergenceRow& r : results[i].divergence_log) {
      by_step.push_back({method_name(jobs[i].method), jobs[i].size, r.step,
                         div_kind_name(r.kind), r.value});
    }
  }
  std::sort(by_step.begin(), by_step.end(), [](const Row& x, const Row& y) {
    return std::tie(x.method, x.size, x.step, x.kind) <
           std::tie(y.method, y.size, y.step, y.kind);
  });

  std::ostringstream step_csv;
  step_csv << "method,size,step,kind,value\n";
  for (const Row& r : by_step) {
    step_csv << r.method << ',' << r.size << ',' << r.step << ',' << r.kind
             << ',' << fmt_double(r.value) << '\n';
  }
  write_text(outdir + "/divergence_by_step.csv", step_csv.str());

  std::ostringstream size_csv;
  size_csv << "method,size,kind,value\n";
  std::map<std::string, std::map<std::string, std::vector<double>>> finals;
  std::map<std::string, std::map<std::string, std::vector<double>>> initials;
  for (const Row& r : by_step) {
    if (r.step == steps) {
      size_csv << r.method << ',' << r.size << ',' << r.kind << ','
               << fmt_double(r.value) << '\n';
      finals[r.method][r.kind].push_back(r.value);
    }
    if (r.step == 0) initials[r.method][r.kind].push_back(r.value);
  }
  write_text(outdir + "/divergence_by_size.csv", size_csv.str());

  // monotone-in-size check: rank correlation between size and the final
  // divergence should be negative for a working method
  json rho = json::object();
  std::vector<double> size_vals;
  for (std::size_t v : sizes) size_vals.push_back(static_cast<double>(v));
  std::sort(size_vals.begin(), size_vals.end());
  for (const auto& [method, kinds] : finals) {
    json per_kind = json::object();
    for (const auto& [kind, values] : kinds) {
      if (values.size() == size_vals.size() && values.size() >= 2) {
        per_kind[kind] = spearman(size_vals, values);
      }
    }
    rho[method] = per_kind;
  }

  json summary;
  summary["seed"] = seed;
  summary["steps"] = steps;
  summary["sizes"] = sizes;
  summary["spearman"] = rho;
  json decreases = json::object();
  for (const auto& [method, kinds] : initials) {
    json per_kind = json::object();
    for (const auto& [kind, values] : kinds) {
      auto fin = finals.find(method);
      if (fin == finals.end()) continue;
      auto fk = fin->second.find(kind);
      if (fk == fin->second.end() || fk->second.size() != values.size()) continue;
      // entries are ordered by size; report the smallest size's decrease
      if (!values.empty() && values.front() > 0.0) {
        per_kind[kind] = 1.0 - fk->second.front() / values.front();
      }
    }
    decreases[method] = per_kind;
  }
  summary["decrease_at_smallest_size"] = decreases;
  write_text(outdir + "/summary.json", summary.dump(2) + "\n");

  std::printf("synthetic sweep: %zu jobs (%zu methods x %zu sizes), %zu steps\n",
              jobs.size(), methods.size(), sizes.size(), steps);
  for (const auto& [method, kinds] : finals) {
    for (const auto& [kind, values] : kinds) {
      if (rho.contains(method) && rho[method].contains(kind)) {
        std::printf("  %s/%s: final at smallest size %.6g, spearman %.3f\n",
                    method.c_str(), kind.c_str(), values.front(),
                    rho[method][kind].get<double>());
      }
    }
  }
  std::printf("wrote %s/divergence_by_step.csv, divergence_by_size.csv, summary.json\n",
              outdir.c_str());
  return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args) {
  CLI::App app{"bayesian pseudocoreset construction and evaluation"};
  app.require_subcommand(1);

  // experts train
  auto* experts = app.add_subcommand("experts", "expert trajectory tools");
  experts->require_subcommand(1);
  ExpertsArgs ea;
  auto* train = experts->add_subcommand("train", "train and persist expert buffers");
  train->add_option("--data", ea.data_path, "training dataset (.bpcd or .csv)")
      ->required();
  train->add_option("--config", ea.config, "key-value config file");
  train->add_option("--preset", ea.preset, "ipc1|ipc10|ipc20");
  train->add_option("--out", ea.out, "output directory (default $BPC_OUT)");
  train->add_option("--seed", ea.seed, "rng seed");
  train->add_option("--count", ea.count, "number of expert buffers");
  train->add_option("--epochs", ea.epochs, "training epochs per expert");
  train->add_option("--lr", ea.lr, "sgd learning rate");
  train->add_option("--minibatch", ea.minibatch, "minibatch size, 0 = full batch");

  // distill
  DistillArgs da;
  auto* dist = app.add_subcommand("distill", "construct a pseudocoreset");
  dist->add_option("--data", da.data_path, "full dataset (.bpcd or .csv)")
      ->required();
  dist->add_option("--expert-dir", da.expert_dir, "directory of .bpct buffers")
      ->required();
  dist->add_option("--method", da.method, "rkl|w|fkl|dc")->required();
  dist->add_option("--config", da.config, "key-value config file");
  dist->add_option("--preset", da.preset, "ipc1|ipc10|ipc20");
  dist->add_option("--out", da.out, "output directory (default $BPC_OUT)");
  dist->add_option("--seed", da.seed, "rng seed");
  dist->add_option("--steps", da.steps, "outer optimization steps");
  dist->add_option("--size", da.size, "coreset points (per class for classifiers)");
  dist->add_option("--log-interval", da.log_interval, "divergence logging stride");

  // sample
  SampleArgs sa;
  auto* samp = app.add_subcommand("sample", "run a sampler on a coreset");
  samp->add_option("--coreset", sa.coreset, "coreset dataset (.bpcd or .csv)")
      ->required();
  samp->add_option("--sampler", sa.sampler, "hmc|asghmc")->required();
  samp->add_option("--config", sa.config, "key-value config file");
  samp->add_option("--preset", sa.preset, "ipc1|ipc10|ipc20");
  samp->add_option("--out", sa.out, "output directory (default $BPC_OUT)");
  samp->add_option("--seed", sa.seed, "rng seed");
  samp->add_option("--iterations", sa.iterations, "sampler iterations");
  samp->add_option("--burn-in", sa.burn_in, "discarded iterations");
  samp->add_option("--step-size", sa.step_size, "integrator step size");
  samp->add_option("--leapfrog", sa.leapfrog, "leapfrog steps per iteration");

  // eval
  EvalArgs va;
  auto* ev = app.add_subcommand("eval", "score a chain on a labeled test set");
  ev->add_option("--chain", va.chain, "sampled chain (.bpct)")->required();
  ev->add_option("--test", va.test, "labeled test dataset")->required();
  ev->add_option("--config", va.config, "key-value config file");
  ev->add_option("--out", va.out, "output directory (default $BPC_OUT)");
  ev->add_option("--bins", va.bins, "calibration bins");
  ev->add_option("--method", va.tag_method, "method tag for the csv row");
  ev->add_option("--ipc", va.tag_ipc, "ipc tag for the csv row");
  ev->add_option("--sampler", va.tag_sampler, "sampler tag for the csv row");
  ev->add_option("--seed", va.tag_seed, "seed tag for the csv row");

  // synthetic
  SyntheticArgs ya;
  auto* syn = app.add_subcommand(
      "synthetic", "conjugate benchmark sweep over methods and sizes");
  syn->add_option("--out", ya.out, "output directory (default $BPC_OUT)");
  syn->add_option("--seed", ya.seed, "rng seed");
  syn->add_option("--steps", ya.steps, "outer steps per run (default 500)");
  syn->add_option("--sizes", ya.sizes, "comma list (default 5,20,40,60,80,100)");
  syn->add_option("--methods", ya.methods, "comma list (default rkl,w,fkl)");
  syn->add_option("--threads", ya.threads, "worker threads, 0 = hardware");
  syn->add_option("--log-interval", ya.log_interval, "divergence logging stride");
  syn->add_option("--experts", ya.experts, "expert buffers to train");
  syn->add_option("--dim", ya.dim, "data dimension (default 10)");
  syn->add_option("--count", ya.count, "data points (default 100)");

  // divergence
  DivergenceArgs ga;
  auto* dv = app.add_subcommand("divergence",
                                "closed-form divergences between gaussian files");
  dv->add_option("--a", ga.a, "first gaussian json")->required();
  dv->add_option("--b", ga.b, "second gaussian json")->required();
  dv->add_option("--mc", ga.mc, "monte-carlo cross-check sample count");
  dv->add_option("--seed", ga.seed, "rng seed for the cross-check");
  dv->add_option("--out", ga.out, "output directory (default $BPC_OUT)");

  std::vector<std::string> argv_store;
  argv_store.reserve(args.size() + 1);
  argv_store.push_back("bpc");
  for (const std::string& a : args) argv_store.push_back(a);
  std::vector<const char*> argv;
  for (const std::string& a : argv_store) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
    if (train->parsed()) return run_experts_train(ea);
    if (dist->parsed()) return run_distill(da);
    if (samp->parsed()) return run_sample(sa);
    if (ev->parsed()) return run_eval(va);
    if (syn->parsed()) return run_synthetic(ya);
    if (dv->parsed()) return run_divergence(ga);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace bpc
