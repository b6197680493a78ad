#pragma once

// Line-oriented `key = value` run configuration with a fixed schema, plus the
// builders that turn it into module configs.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "anrot/episodic.hpp"
#include "anrot/errors.hpp"
#include "anrot/eval_metrics.hpp"
#include "anrot/network.hpp"
#include "anrot/robustness.hpp"
#include "anrot/variational.hpp"

#ifndef ANROT_VERSION
#define ANROT_VERSION "0.0.0"
#endif

namespace anrot {

enum class KeyType { Int, Seed, Real, Bool, Text, Path, Choice, RealList, TextList };

struct KeySpec {
  std::string key;
  KeyType type;
  std::string default_value;
  std::string help;
  std::vector<std::string> choices = {};  // Choice and TextList only
};

inline std::string_view to_string(KeyType t) {
  switch (t) {
    case KeyType::Int: return "int";
    case KeyType::Seed: return "seed";
    case KeyType::Real: return "real";
    case KeyType::Bool: return "bool";
    case KeyType::Text: return "text";
    case KeyType::Path: return "path";
    case KeyType::Choice: return "choice";
    case KeyType::RealList: return "real list";
    case KeyType::TextList: return "list";
  }
  return "?";
}

/// Every accepted key, in documentation order.
inline const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> schema = {
      {"data.train", KeyType::Path, "", "meta-train dataset file (empty = synthetic)"},
      {"data.test", KeyType::Path, "", "meta-test dataset file (empty = synthetic)"},
      {"synthetic.train_classes", KeyType::Int, "32", "synthetic meta-train classes"},
      {"synthetic.test_classes", KeyType::Int, "8", "synthetic meta-test classes (labels from 1000)"},
      {"synthetic.per_class", KeyType::Int, "20", "images per synthetic class"},
      {"synthetic.channels", KeyType::Int, "1", "synthetic image channels"},
      {"synthetic.height", KeyType::Int, "16", "synthetic image height"},
      {"synthetic.width", KeyType::Int, "16", "synthetic image width"},
      {"synthetic.separation", KeyType::Real, "1.0", "class pattern amplitude"},
      {"synthetic.noise", KeyType::Real, "0.1", "per-pixel noise std"},
      {"synthetic.seed", KeyType::Seed, "7", "synthetic data seed"},
      {"model.backbone", KeyType::Choice, "conv4-attn", "encoder backbone", {"conv4-attn", "resnet12-attn"}},
      {"model.latent_dim", KeyType::Int, "32", "latent dimension d"},
      {"model.attention", KeyType::Bool, "true", "channel and spatial attention blocks"},
      {"model.reduction", KeyType::Int, "4", "channel attention reduction ratio"},
      {"model.spatial_kernel", KeyType::Int, "7", "spatial attention kernel size"},
      {"model.seed", KeyType::Seed, "1", "parameter initialisation seed"},
      {"model.checkpoint", KeyType::Path, "", "checkpoint to load (eval, sweep, gradcam, fid extractor)"},
      {"episode.n_way", KeyType::Int, "5", "classes per episode N"},
      {"episode.k_shot", KeyType::Int, "1", "support images per class k"},
      {"episode.q_query", KeyType::Int, "5", "query images per class q"},
      {"train.episodes", KeyType::Int, "2000", "training episodes"},
      {"train.lr", KeyType::Real, "0.001", "SGD learning rate"},
      {"train.seed", KeyType::Seed, "1", "episode and perturbation seed"},
      {"loss.lambda1", KeyType::Real, "0.5", "HeSim weight"},
      {"loss.lambda2", KeyType::Real, "1.0", "reconstruction weight"},
      {"loss.lambda3", KeyType::Real, "0.0", "prior penalty weight"},
      {"loss.penalty", KeyType::Choice, "hellinger", "prior penalty kind", {"hellinger", "kl", "wasserstein"}},
      {"loss.temperature", KeyType::Real, "1.0", "softmax temperature"},
      {"loss.hesim_metric", KeyType::Choice, "hellinger", "query similarity metric", {"hellinger", "kl"}},
      {"loss.prototype", KeyType::Choice, "mean", "prototype rule", {"mean", "pooled"}},
      {"robust.enabled", KeyType::Bool, "true", "mix adversarial and noisy samples into training"},
      {"robust.epsilon", KeyType::Real, "0.05", "FGSM step size"},
      {"robust.sigma", KeyType::Real, "0.05", "Gaussian corruption std"},
      {"robust.mix", KeyType::RealList, "1/3,1/3,1/3", "clean,adversarial,gaussian fractions"},
      {"robust.fgsm_space", KeyType::Choice, "feature", "FGSM target", {"feature", "input"}},
      {"eval.episodes", KeyType::Int, "100", "evaluation episodes"},
      {"eval.seed", KeyType::Seed, "2", "evaluation episode seed"},
      {"sweep.kind", KeyType::Choice, "adversarial", "perturbation swept", {"adversarial", "gaussian"}},
      {"sweep.levels", KeyType::RealList, "0,0.05,0.1,0.15,0.2,0.25,0.3", "epsilon or sigma grid"},
      {"gradcam.count", KeyType::Int, "4", "query images to explain"},
      {"fid.samples", KeyType::Int, "64", "images per reconstruction set"},
      {"fid.penalties", KeyType::TextList, "hellinger,kl,wasserstein", "penalties compared",
       {"hellinger", "kl", "wasserstein"}},
      {"fid.lambda3", KeyType::Real, "0.1", "prior weight for the comparison runs"},
      {"output.dir", KeyType::Text, "out", "output directory"},
  };
  return schema;
}

inline const KeySpec* find_key(std::string_view key) {
  for (const auto& k : config_schema())
    if (k.key == key) return &k;
  return nullptr;
}

inline std::string valid_keys_list() {
  std::string s;
  for (const auto& k : config_schema()) s += (s.empty() ? "" : ", ") + k.key;
  return s;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) return out;
    start = pos + 1;
  }
}

template <class N>
bool parse_number(std::string_view s, N& out) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end;
}

/// A real, or a fraction "a/b".
inline bool parse_real(std::string_view s, double& out) {
  if (const auto slash = s.find('/'); slash != std::string_view::npos) {
    double a = 0, b = 0;
    if (!parse_number(trim(s.substr(0, slash)), a) || !parse_number(trim(s.substr(slash + 1)), b) || b == 0.0)
      return false;
    out = a / b;
    return std::isfinite(out);
  }
  return parse_number(s, out) && std::isfinite(out);
}

inline bool parse_bool(std::string_view s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return out = true, true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return out = false, true;
  return false;
}

/// Empty string when `value` fits the key's type, else a reason.
inline std::string type_problem(const KeySpec& k, std::string_view value) {
  switch (k.type) {
    case KeyType::Int: {
      long long v = 0;
      return parse_number(value, v) ? "" : "expected an integer";
    }
    case KeyType::Seed: {
      std::uint64_t v = 0;
      return parse_number(value, v) ? "" : "expected a non-negative integer seed";
    }
    case KeyType::Real: {
      double v = 0;
      return parse_real(value, v) ? "" : "expected a real number";
    }
    case KeyType::Bool: {
      bool v = false;
      return parse_bool(value, v) ? "" : "expected true or false";
    }
    case KeyType::Text:
    case KeyType::Path: return "";
    case KeyType::Choice:
      if (std::find(k.choices.begin(), k.choices.end(), value) != k.choices.end()) return "";
      break;
    case KeyType::RealList: {
      if (value.empty()) return "expected a comma-separated list of reals";
      for (const auto& item : split(value, ',')) {
        double v = 0;
        if (!parse_real(item, v)) return "expected a comma-separated list of reals";
      }
      return "";
    }
    case KeyType::TextList: {
      if (value.empty()) return "expected a non-empty list";
      for (const auto& item : split(value, ','))
        if (std::find(k.choices.begin(), k.choices.end(), item) == k.choices.end()) {
          std::string s = "unknown entry '" + item + "' (expected";
          for (const auto& c : k.choices) s += " " + c;
          return s + ")";
        }
      return "";
    }
  }
  std::string s = "expected one of";
  for (const auto& c : k.choices) s += " " + c;
  return s;
}

}  // namespace detail

/// Resolved settings. Every schema key always has a value; `source` records
/// where it came from ("default", "file:<path>:<line>", "flag").
class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_schema()) {
      values_[k.key] = k.default_value;
      sources_[k.key] = "default";
    }
  }

  void set(const std::string& key, const std::string& value, const std::string& source = "flag") {
    const KeySpec* k = find_key(key);
    if (!k) throw ConfigError("unknown key '" + key + "'; valid keys: " + valid_keys_list());
    const std::string v(detail::trim(value));
    if (auto why = detail::type_problem(*k, v); !why.empty())
      throw ConfigError(key + " = '" + v + "': " + why);
    if (source == "flag" && sources_[key].rfind("file:", 0) == 0)
      overridden_[key] = values_[key] + " (" + sources_[key] + ")";
    values_[key] = v;
    sources_[key] = source;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    require(it != values_.end(), "RunConfig: no key '" + key + "'");
    return it->second;
  }
  const std::string& source(const std::string& key) const { return sources_.at(key); }
  /// Keys whose file value was replaced by a flag, with the file value.
  const std::map<std::string, std::string>& overridden() const { return overridden_; }

  int get_int(const std::string& key) const {
    long long v = 0;
    detail::parse_number(std::string_view(get(key)), v);
    if (v < INT32_MIN || v > INT32_MAX) throw ConfigError(key + " is out of range");
    return static_cast<int>(v);
  }
  std::uint64_t get_seed(const std::string& key) const {
    std::uint64_t v = 0;
    detail::parse_number(std::string_view(get(key)), v);
    return v;
  }
  double get_real(const std::string& key) const {
    double v = 0;
    detail::parse_real(get(key), v);
    return v;
  }
  bool get_bool(const std::string& key) const {
    bool v = false;
    detail::parse_bool(get(key), v);
    return v;
  }
  std::vector<double> get_reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : detail::split(get(key), ',')) {
      double v = 0;
      detail::parse_real(item, v);
      out.push_back(v);
    }
    return out;
  }
  std::vector<std::string> get_list(const std::string& key) const { return detail::split(get(key), ','); }

  const std::map<std::string, std::string>& values() const { return values_; }

  friend bool operator==(const RunConfig& a, const RunConfig& b) { return a.values_ == b.values_; }

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, std::string> sources_;
  std::map<std::string, std::string> overridden_;
};

/// Apply `key = value` lines onto `cfg`. Errors carry `<name>:<line>`.
inline void parse_config(std::istream& is, RunConfig& cfg, const std::string& name = "<config>") {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string_view s(line);
    if (const auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = detail::trim(s);
    if (s.empty()) continue;
    const std::string where = name + ":" + std::to_string(lineno);
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key(detail::trim(s.substr(0, eq)));
    const std::string value(detail::trim(s.substr(eq + 1)));
    try {
      cfg.set(key, value, "file:" + where);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  RunConfig cfg;
  parse_config(in, cfg, path);
  return cfg;
}

/// Writes every key in schema order. Loading the output reproduces `cfg`.
inline void save_config(std::ostream& os, const RunConfig& cfg) {
  for (const auto& k : config_schema()) os << k.key << " = " << cfg.get(k.key) << "\n";
}

inline void save_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  save_config(out, cfg);
}

/// Manifest: the resolved config as a loadable file, with the command,
/// version and value sources as comments.
inline void write_manifest(std::ostream& os, const RunConfig& cfg, const std::string& command) {
  os << "# anrot " << ANROT_VERSION << "\n# command: " << command << "\n";
  for (const auto& [key, prev] : cfg.overridden()) os << "# " << key << " overrides " << prev << "\n";
  for (const auto& k : config_schema())
    os << k.key << " = " << cfg.get(k.key) << "  # " << cfg.source(k.key) << "\n";
}

inline void write_manifest(const std::string& path, const RunConfig& cfg, const std::string& command) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  write_manifest(out, cfg, command);
}

/// Help text listing every key with type and default.
inline std::string keys_help() {
  std::ostringstream os;
  os << "Config keys (set in a --config file or with --set key=value):\n";
  std::size_t w = 0;
  for (const auto& k : config_schema()) w = std::max(w, k.key.size());
  for (const auto& k : config_schema()) {
    os << "  " << k.key << std::string(w - k.key.size() + 2, ' ') << "[" << to_string(k.type) << "] default: "
       << (k.default_value.empty() ? "(empty)" : k.default_value) << "  " << k.help;
    if (k.type == KeyType::Choice) {
      os << " {";
      for (std::size_t i = 0; i < k.choices.size(); ++i) os << (i ? "," : "") << k.choices[i];
      os << "}";
    }
    os << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// builders

/// Range checks that depend on meaning rather than type, and referenced paths.
inline void validate(const RunConfig& c) {
  auto positive = [&](const char* key) {
    if (c.get_int(key) < 1) throw ConfigError(std::string(key) + " must be >= 1");
  };
  for (const char* k : {"synthetic.train_classes", "synthetic.test_classes", "synthetic.per_class",
                        "synthetic.channels", "synthetic.height", "synthetic.width", "model.latent_dim",
                        "model.reduction", "model.spatial_kernel", "episode.n_way", "episode.k_shot",
                        "episode.q_query", "gradcam.count"})
    positive(k);
  if (c.get_int("model.spatial_kernel") % 2 == 0) throw ConfigError("model.spatial_kernel must be odd");
  if (c.get_int("train.episodes") < 0) throw ConfigError("train.episodes must be >= 0");
  if (c.get_int("eval.episodes") < 2) throw ConfigError("eval.episodes must be >= 2");
  if (c.get_int("fid.samples") < 2) throw ConfigError("fid.samples must be >= 2");
  if (!(c.get_real("train.lr") > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(c.get_real("loss.temperature") > 0.0)) throw ConfigError("loss.temperature must be > 0");
  if (!(c.get_real("synthetic.separation") >= 0.0)) throw ConfigError("synthetic.separation must be >= 0");
  if (!(c.get_real("synthetic.noise") >= 0.0)) throw ConfigError("synthetic.noise must be >= 0");
  for (const char* k : {"loss.lambda1", "loss.lambda2", "loss.lambda3", "fid.lambda3"})
    if (!(c.get_real(k) >= 0.0)) throw ConfigError(std::string(k) + " must be >= 0");
  if (c.get_int("episode.n_way") < 2) throw ConfigError("episode.n_way must be >= 2");
  const auto mix = c.get_reals("robust.mix");
  if (mix.size() != 3) throw ConfigError("robust.mix needs three fractions");
  RobustConfig robust;
  robust.epsilon = c.get_real("robust.epsilon");
  robust.sigma = c.get_real("robust.sigma");
  robust.mix = {mix[0], mix[1], mix[2]};
  robust.validate();
  for (const char* k : {"data.train", "data.test", "model.checkpoint"}) {
    const auto& p = c.get(k);
    if (!p.empty() && !std::filesystem::exists(p)) throw ConfigError(std::string(k) + ": no such file '" + p + "'");
  }
  const auto levels = c.get_reals("sweep.levels");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (!(levels[i] >= 0.0)) throw ConfigError("sweep.levels must be >= 0");
    if (i && !(levels[i] > levels[i - 1])) throw ConfigError("sweep.levels must be strictly increasing");
  }
}

inline SyntheticSpec synthetic_spec(const RunConfig& c, Split split) {
  SyntheticSpec s;
  const bool test = split == Split::MetaTest;
  s.classes = c.get_int(test ? "synthetic.test_classes" : "synthetic.train_classes");
  s.per_class = c.get_int("synthetic.per_class");
  s.channels = c.get_int("synthetic.channels");
  s.height = c.get_int("synthetic.height");
  s.width = c.get_int("synthetic.width");
  s.separation = c.get_real("synthetic.separation");
  s.noise = c.get_real("synthetic.noise");
  s.seed = c.get_seed("synthetic.seed");
  s.first_label = test ? 1000 : 0;
  s.split = split;
  return s;
}

/// The configured dataset for a split: a file when data.<split> is set,
/// otherwise the synthetic classes for that split.
inline Dataset dataset_for(const RunConfig& c, Split split) {
  const auto& path = c.get(split == Split::MetaTest ? "data.test" : "data.train");
  if (!path.empty()) return load_dataset(path, split);
  return make_synthetic(synthetic_spec(c, split));
}

inline Architecture architecture(const RunConfig& c, int channels, int height, int width) {
  Architecture a = c.get("model.backbone") == "resnet12-attn" ? Architecture::resnet12() : Architecture{};
  a.in_channels = channels;
  a.height = height;
  a.width = width;
  a.latent_dim = c.get_int("model.latent_dim");
  a.reduction = c.get_int("model.reduction");
  a.spatial_kernel = c.get_int("model.spatial_kernel");
  if (!c.get_bool("model.attention")) a.attention_after.clear();
  return a;
}

inline LossConfig loss_config(const RunConfig& c) {
  LossConfig l;
  l.weights = {c.get_real("loss.lambda1"), c.get_real("loss.lambda2"), c.get_real("loss.lambda3")};
  l.weights.validate();
  l.penalty = PenaltyKind{parse_penalty_type(c.get("loss.penalty"))};
  l.temperature = c.get_real("loss.temperature");
  l.prototype = parse_prototype_mode(c.get("loss.prototype"));
  l.hesim_metric = parse_hesim_metric(c.get("loss.hesim_metric"));
  return l;
}

inline RobustConfig robust_config(const RunConfig& c) {
  RobustConfig r;
  r.epsilon = c.get_real("robust.epsilon");
  r.sigma = c.get_real("robust.sigma");
  const auto mix = c.get_reals("robust.mix");
  if (mix.size() != 3) throw ConfigError("robust.mix needs three fractions");
  r.mix = {mix[0], mix[1], mix[2]};
  r.fgsm_space = parse_fgsm_space(c.get("robust.fgsm_space"));
  r.validate();
  return r;
}

inline TrainConfig train_config(const RunConfig& c) {
  TrainConfig t;
  t.n_way = c.get_int("episode.n_way");
  t.k_shot = c.get_int("episode.k_shot");
  t.q_query = c.get_int("episode.q_query");
  t.episodes = c.get_int("train.episodes");
  t.lr = c.get_real("train.lr");
  t.robust = c.get_bool("robust.enabled");
  t.robust_cfg = robust_config(c);
  t.loss = loss_config(c);
  t.seed = c.get_seed("train.seed");
  t.validate();
  return t;
}

inline EvalConfig eval_config(const RunConfig& c) {
  EvalConfig e;
  e.n_way = c.get_int("episode.n_way");
  e.k_shot = c.get_int("episode.k_shot");
  e.q_query = c.get_int("episode.q_query");
  e.episodes = c.get_int("eval.episodes");
  e.seed = c.get_seed("eval.seed");
  e.prototype = parse_prototype_mode(c.get("loss.prototype"));
  return e;
}

}  // namespace anrot
