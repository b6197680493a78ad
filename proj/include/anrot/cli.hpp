#pragma once

// Subcommand driver behind the `anrot` executable. `run` is callable in-process
// so tests can exercise argument handling and artifacts directly.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "anrot/checkpoint.hpp"
#include "anrot/config.hpp"
#include "anrot/episodic.hpp"
#include "anrot/eval_metrics.hpp"
#include "anrot/gauss_metrics.hpp"
#include "anrot/network.hpp"

namespace anrot::cli {

enum ExitCode : int { kOk = 0, kUsage = 2, kConfig = 3, kRuntime = 4 };

inline constexpr const char* kManifest = "manifest.cfg";

/// Runtime failure that should map to exit code 4 (e.g. diverged training).
class RunFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

namespace fs = std::filesystem;

struct Run {
  RunConfig cfg;
  std::string command;
  fs::path dir;
  std::ostream& out;
};

inline fs::path prepare(Run& r) {
  validate(r.cfg);
  r.dir = r.cfg.get("output.dir");
  std::error_code ec;
  fs::create_directories(r.dir, ec);
  if (ec) throw ConfigError("output.dir: cannot create '" + r.dir.string() + "': " + ec.message());
  write_manifest((r.dir / kManifest).string(), r.cfg, r.command);
  return r.dir;
}

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw ConfigError("cannot write '" + p.string() + "'");
  return os;
}

/// The configured checkpoint, or a fresh model for the dataset's image shape.
inline ModelState<float> model_for(const RunConfig& c, const Dataset& ds) {
  const auto dims = ds.image_dims();
  if (const auto& path = c.get("model.checkpoint"); !path.empty()) {
    auto st = load_checkpoint<float>(path);
    if (st.arch.in_channels != dims[1] || st.arch.height != dims[2] || st.arch.width != dims[3])
      throw ConfigError("model.checkpoint expects images " + std::to_string(st.arch.in_channels) + "x" +
                        std::to_string(st.arch.height) + "x" + std::to_string(st.arch.width) +
                        " but the dataset has " + dims_string(dims));
    return st;
  }
  return init_model<float>(architecture(c, dims[1], dims[2], dims[3]), c.get_seed("model.seed"));
}

inline void write_log(const fs::path& p, const std::vector<LogRow>& log) {
  auto os = open_out(p);
  os << kTrainLogHeader << "\n" << std::setprecision(9);
  for (const auto& r : log)
    os << r.episode << "," << r.total << "," << r.cce << "," << r.hesim << "," << r.rec << "," << r.prior << ","
       << r.acc << "\n";
}

inline TrainResult<float> train_and_save(const RunConfig& c, const Dataset& ds, ModelState<float> init,
                                         const fs::path& checkpoint, const fs::path& log, std::ostream& out) {
  auto res = train(ds, std::move(init), train_config(c));
  save_checkpoint(checkpoint.string(), res.state);
  write_log(log, res.log);
  if (res.diverged) throw RunFailure("training stopped: " + res.error + " (last finite state saved to " +
                                     checkpoint.string() + ")");
  double acc = 0.0;
  const std::size_t tail = std::min<std::size_t>(res.log.size(), 100);
  for (std::size_t i = res.log.size() - tail; i < res.log.size(); ++i) acc += res.log[i].acc;
  out << "trained " << res.log.size() << " episodes";
  if (tail) out << ", last-" << tail << " train accuracy " << std::fixed << std::setprecision(3) << acc / tail
                << std::defaultfloat;
  out << " -> " << checkpoint.string() << "\n";
  return res;
}

// ---------------------------------------------------------------------------
// subcommands

inline void synth_data(Run& r) {
  const auto dir = prepare(r);
  for (Split s : {Split::MetaTrain, Split::MetaTest}) {
    const auto ds = make_synthetic(synthetic_spec(r.cfg, s));
    const auto path = dir / (s == Split::MetaTest ? "test.anrt" : "train.anrt");
    save_dataset(path.string(), ds);
    r.out << "wrote " << path.string() << " (" << ds.classes().size() << " classes, " << ds.size() << " images)\n";
  }
}

inline void train_cmd(Run& r) {
  const auto dir = prepare(r);
  const auto ds = dataset_for(r.cfg, Split::MetaTrain);
  train_and_save(r.cfg, ds, model_for(r.cfg, ds), dir / "checkpoint.anrc", dir / "train_log.csv", r.out);
}

inline void eval_cmd(Run& r) {
  const auto dir = prepare(r);
  const auto ds = dataset_for(r.cfg, Split::MetaTest);
  const auto st = model_for(r.cfg, ds);
  const auto res = evaluate(st, ds, eval_config(r.cfg));
  auto os = open_out(dir / "eval.csv");
  os << "episode,acc\n" << std::setprecision(9);
  for (std::size_t i = 0; i < res.per_episode.size(); ++i) os << i + 1 << "," << res.per_episode[i] << "\n";
  auto sum = open_out(dir / "eval_summary.csv");
  sum << "acc_mean,acc_ci95,episodes\n" << std::fixed << std::setprecision(6) << res.mean << "," << res.ci95 << ","
      << res.per_episode.size() << "\n";
  r.out << "accuracy " << std::fixed << std::setprecision(4) << res.mean << " +- " << res.ci95 << " over "
        << res.per_episode.size() << " episodes\n"
        << std::defaultfloat;
}

inline void sweep_cmd(Run& r) {
  const auto dir = prepare(r);
  const auto ds = dataset_for(r.cfg, Split::MetaTest);
  const auto st = model_for(r.cfg, ds);
  const auto curve = robustness_sweep(st, ds, parse_sweep_kind(r.cfg.get("sweep.kind")),
                                      r.cfg.get_reals("sweep.levels"), eval_config(r.cfg));
  auto os = open_out(dir / "sweep.csv");
  write_sweep_csv(os, curve);
  write_sweep_csv(r.out, curve);
}

inline void gradcam_cmd(Run& r) {
  const auto dir = prepare(r);
  const auto ds = dataset_for(r.cfg, Split::MetaTest);
  const auto st = model_for(r.cfg, ds);
  const auto ec = eval_config(r.cfg);
  ds.check_episodes(ec.n_way, ec.k_shot + ec.q_query);
  const Episode ep = sample_episode(ds, ec.n_way, ec.k_shot, ec.q_query, derive_seed(ec.seed, 0));
  const auto support = encode(ep.support, st).q;
  std::vector<DiagGaussian> protos;
  for (int j = 0; j < ep.n_way; ++j) {
    std::vector<DiagGaussian> members;
    for (std::size_t i = 0; i < support.size(); ++i)
      if (ep.support_labels[i] == j) members.push_back(support[i]);
    protos.push_back(class_prototype(members, ec.prototype));
  }
  const int count = std::min(r.cfg.get_int("gradcam.count"), ep.query.batch());
  for (int i = 0; i < count; ++i) {
    const int j = ep.query_labels[static_cast<std::size_t>(i)];
    const int cls = ep.classes[static_cast<std::size_t>(j)];
    const Tensor<float> x = batch_slice(ep.query, i, 1);
    const auto cam = grad_cam(st, x, protos[static_cast<std::size_t>(j)]);
    const auto name = "cam_" + std::to_string(i) + "_" + std::to_string(cls) + ".pgm";
    write_pgm((dir / name).string(), cam);
    // first channel of the input, for side-by-side viewing
    Tensor<double> img({1, 1, x.height(), x.width()});
    for (std::size_t p = 0; p < img.size(); ++p) img[p] = x[p];
    write_pgm((dir / ("input_" + std::to_string(i) + "_" + std::to_string(cls) + ".pgm")).string(), img);
    r.out << "wrote " << (dir / name).string() << "\n";
  }
}

inline std::vector<Tensor<float>> fid_images(const Dataset& ds, int n) {
  const int take = std::min<int>(n, static_cast<int>(ds.size()));
  return {ds.images.begin(), ds.images.begin() + take};
}

/// Trains one model per prior penalty from the same initialisation and
/// scores each by reconstruction FID in a shared feature space.
inline void fid_cmd(Run& r) {
  const auto dir = prepare(r);
  const auto train_ds = dataset_for(r.cfg, Split::MetaTrain);
  const auto test_ds = dataset_for(r.cfg, Split::MetaTest);
  const auto dims = train_ds.image_dims();
  const Architecture arch = architecture(r.cfg, dims[1], dims[2], dims[3]);
  const auto extractor = r.cfg.get("model.checkpoint").empty()
                             ? init_model<float>(arch, derive_seed(r.cfg.get_seed("model.seed"), 0xf1d))
                             : load_checkpoint<float>(r.cfg.get("model.checkpoint"));
  const auto images = fid_images(test_ds, r.cfg.get_int("fid.samples"));
  auto os = open_out(dir / "fid.csv");
  os << "penalty,fid\n";
  for (const auto& pen : r.cfg.get_list("fid.penalties")) {
    RunConfig c = r.cfg;
    c.set("loss.penalty", pen, "fid");
    c.set("loss.lambda3", r.cfg.get("fid.lambda3"), "fid");
    if (c.get_real("loss.lambda2") <= 0.0) throw ConfigError("fid needs loss.lambda2 > 0 so the decoder trains");
    auto res = train_and_save(c, train_ds, init_model<float>(arch, c.get_seed("model.seed")),
                              dir / ("checkpoint_" + pen + ".anrc"), dir / ("train_log_" + pen + ".csv"), r.out);
    const double f = reconstruction_fid(res.state, extractor, images);
    os << pen << "," << std::fixed << std::setprecision(6) << f << std::defaultfloat << "\n";
    r.out << pen << " fid " << f << "\n";
  }
}

struct AblationRow {
  bool attention;
  std::string variant;  // hesim, kl, none
};

inline std::vector<AblationRow> ablation_rows() {
  return {{true, "hesim"}, {false, "hesim"}, {true, "kl"}, {false, "kl"}, {true, "none"}, {false, "none"}};
}

/// Config for one ablation row: the HeSim term kept, swapped for its KL
/// counterpart, or dropped.
inline RunConfig ablation_config(const RunConfig& base, const AblationRow& row) {
  RunConfig c = base;
  c.set("model.attention", row.attention ? "true" : "false", "ablate");
  if (row.variant == "hesim") {
    c.set("loss.hesim_metric", "hellinger", "ablate");
  } else if (row.variant == "kl") {
    c.set("loss.hesim_metric", "kl", "ablate");
  } else {
    c.set("loss.lambda1", "0", "ablate");
  }
  return c;
}

inline void ablate_cmd(Run& r) {
  const auto dir = prepare(r);
  const auto train_ds = dataset_for(r.cfg, Split::MetaTrain);
  const auto test_ds = dataset_for(r.cfg, Split::MetaTest);
  const auto dims = train_ds.image_dims();
  auto os = open_out(dir / "ablate.csv");
  os << "attention,variant,acc_mean,acc_ci95,episodes\n";
  for (const auto& row : ablation_rows()) {
    const RunConfig c = ablation_config(r.cfg, row);
    const std::string tag = std::string(row.attention ? "attn" : "noattn") + "_" + row.variant;
    auto init = init_model<float>(architecture(c, dims[1], dims[2], dims[3]), c.get_seed("model.seed"));
    auto res = train_and_save(c, train_ds, std::move(init), dir / ("checkpoint_" + tag + ".anrc"),
                              dir / ("train_log_" + tag + ".csv"), r.out);
    const auto ev = evaluate(res.state, test_ds, eval_config(c));
    os << (row.attention ? 1 : 0) << "," << row.variant << "," << std::fixed << std::setprecision(6) << ev.mean
       << "," << ev.ci95 << std::defaultfloat << "," << ev.per_episode.size() << "\n";
    r.out << tag << " accuracy " << std::fixed << std::setprecision(4) << ev.mean << " +- " << ev.ci95
          << std::defaultfloat << "\n";
  }
}

/// "m,v;m,v;..." one mean,variance pair per dimension.
inline DiagGaussian parse_gaussian(const std::string& text, const std::string& flag) {
  std::vector<double> m, v;
  for (const auto& dim : anrot::detail::split(text, ';')) {
    const auto mv = anrot::detail::split(dim, ',');
    double a = 0, b = 0;
    if (mv.size() != 2 || !anrot::detail::parse_real(mv[0], a) || !anrot::detail::parse_real(mv[1], b))
      throw ConfigError(flag + ": expected 'mean,var;mean,var;...' but got '" + text + "'");
    if (!(b > 0.0)) throw ConfigError(flag + ": variances must be > 0");
    m.push_back(a);
    v.push_back(b);
  }
  return {std::move(m), std::move(v)};
}

inline void dist_cmd(std::ostream& out, const std::string& p, const std::string& q, const std::string& metric) {
  const auto kind = parse_distance_kind(metric);
  const auto a = parse_gaussian(p, "--p"), b = parse_gaussian(q, "--q");
  if (a.dim() != b.dim())
    throw ConfigError("--p has " + std::to_string(a.dim()) + " dimensions but --q has " + std::to_string(b.dim()));
  const auto d = distance(a, b, kind);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", d.value);
  out << buf << "\n";
}

}  // namespace detail

/// Short flags that map onto config keys.
struct Alias {
  const char* flag;
  const char* key;
  const char* help;
};

inline const std::vector<Alias>& aliases() {
  static const std::vector<Alias> a = {
      {"--episodes", "train.episodes", "same as --train.episodes"},
      {"--lr", "train.lr", "same as --train.lr"},
      {"--seed", "train.seed", "same as --train.seed"},
      {"--checkpoint", "model.checkpoint", "same as --model.checkpoint"},
      {"--out", "output.dir", "same as --output.dir"},
  };
  return a;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"anrot: robust variational few-shot learning with Hellinger prototypes"};
  app.footer(keys_help() +
             "\nPrecedence: defaults < --config file < --set < per-key and short flags.\n"
             "Every artifact-producing run writes " + std::string(kManifest) +
             " to output.dir; pass it back with --config to reproduce the run.\n"
             "Environment: ANROT_THREADS caps evaluation workers (0 = sequential).\n"
             "Exit codes: 0 ok, 2 usage, 3 config, 4 runtime failure.");
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(ANROT_VERSION));

  struct Sub {
    CLI::App* app;
    std::string config;
    std::vector<std::string> sets;
    bool synthetic = false;
    std::vector<std::pair<CLI::Option*, std::string>> key_opts;
    std::vector<std::string> key_vals;
    std::vector<std::string> alias_vals;
    std::vector<CLI::Option*> alias_opts;
  };
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"synth-data", "write synthetic meta-train and meta-test datasets"},
      {"train", "meta-train a model and save its checkpoint"},
      {"eval", "episodic accuracy on the meta-test split"},
      {"sweep", "accuracy under increasing adversarial or Gaussian perturbation"},
      {"fid", "reconstruction FID for each prior penalty"},
      {"gradcam", "Grad-CAM heatmaps for query images"},
      {"ablate", "attention x {HeSim, KL, none} comparison"},
  };
  std::vector<std::unique_ptr<Sub>> subs;
  const auto& schema = config_schema();
  for (const auto& [name, help] : commands) {
    auto s = std::make_unique<Sub>();
    s->app = app.add_subcommand(name, help);
    s->app->add_option("--config", s->config, "key = value config file (a manifest works)")->check(CLI::ExistingFile);
    s->app->add_option("--set", s->sets, "override a key: --set key=value (repeatable)");
    s->app->add_flag("--synthetic", s->synthetic, "use synthetic data (clears data.train and data.test)");
    s->key_vals.resize(schema.size());
    for (std::size_t i = 0; i < schema.size(); ++i) {
      const auto& k = schema[i];
      auto* o = s->app->add_option("--" + k.key, s->key_vals[i], k.help);
      o->default_str(k.default_value.empty() ? "\"\"" : k.default_value);
      s->key_opts.emplace_back(o, k.key);
    }
    s->alias_vals.resize(aliases().size());
    for (std::size_t i = 0; i < aliases().size(); ++i)
      s->alias_opts.push_back(s->app->add_option(aliases()[i].flag, s->alias_vals[i], aliases()[i].help));
    subs.push_back(std::move(s));
  }
  auto* dist = app.add_subcommand("dist", "distance between two diagonal Gaussians");
  std::string dp, dq, dmetric = "hellinger_sq";
  dist->add_option("--p", dp, "first Gaussian as 'mean,var;mean,var;...'")->required();
  dist->add_option("--q", dq, "second Gaussian, same format")->required();
  dist->add_option("--metric", dmetric,
                   "hellinger_sq, hellinger, bc, bhattacharyya, kl, wasserstein2_sq, mahalanobis_sq")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (dist->parsed()) {
      detail::dist_cmd(out, dp, dq, dmetric);
      return kOk;
    }
    for (auto& s : subs) {
      if (!s->app->parsed()) continue;
      detail::Run r{RunConfig{}, s->app->get_name(), {}, out};
      if (!s->config.empty()) {
        std::ifstream in(s->config);
        if (!in) throw ConfigError("cannot open config file '" + s->config + "'");
        parse_config(in, r.cfg, s->config);
      }
      for (const auto& kv : s->sets) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        r.cfg.set(std::string(anrot::detail::trim(kv.substr(0, eq))), kv.substr(eq + 1));
      }
      for (std::size_t i = 0; i < s->key_opts.size(); ++i)
        if (s->key_opts[i].first->count()) r.cfg.set(s->key_opts[i].second, s->key_vals[i]);
      for (std::size_t i = 0; i < s->alias_opts.size(); ++i)
        if (s->alias_opts[i]->count()) r.cfg.set(aliases()[i].key, s->alias_vals[i]);
      if (s->synthetic) {
        r.cfg.set("data.train", "");
        r.cfg.set("data.test", "");
      }
      const auto& name = r.command;
      if (name == "synth-data") detail::synth_data(r);
      else if (name == "train") detail::train_cmd(r);
      else if (name == "eval") detail::eval_cmd(r);
      else if (name == "sweep") detail::sweep_cmd(r);
      else if (name == "fid") detail::fid_cmd(r);
      else if (name == "gradcam") detail::gradcam_cmd(r);
      else if (name == "ablate") detail::ablate_cmd(r);
      return kOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}

}  // namespace anrot::cli
