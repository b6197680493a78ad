#pragma once

// FID between feature sets, GRAD-CAM heatmaps, and accuracy sweeps under
// adversarial and gaussian perturbation.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "anrot/episodic.hpp"
#include "anrot/errors.hpp"
#include "anrot/network.hpp"
#include "anrot/robustness.hpp"

namespace anrot {

// ---------------------------------------------------------------------------
// FID

struct FeatureStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd cov;
  std::size_t n = 0;
};

/// Sample mean and unbiased covariance.
inline FeatureStats feature_stats(const std::vector<std::vector<double>>& features) {
  require(features.size() >= 2, "feature_stats: need at least 2 vectors");
  const auto d = static_cast<Eigen::Index>(features.front().size());
  require(d >= 1, "feature_stats: empty feature vectors");
  Eigen::MatrixXd X(static_cast<Eigen::Index>(features.size()), d);
  for (std::size_t i = 0; i < features.size(); ++i) {
    require(static_cast<Eigen::Index>(features[i].size()) == d, "feature_stats: vectors differ in dimension");
    for (Eigen::Index j = 0; j < d; ++j) X(static_cast<Eigen::Index>(i), j) = features[i][static_cast<std::size_t>(j)];
  }
  FeatureStats s;
  s.n = features.size();
  s.mu = X.colwise().mean().transpose();
  const Eigen::MatrixXd C = X.rowwise() - s.mu.transpose();
  s.cov = (C.transpose() * C) / static_cast<double>(s.n - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  return s;
}

namespace detail {

// Symmetric PSD square root with eigenvalues clamped at 0.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& A) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (A + A.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// |mu_r - mu_g|^2 + Tr(S_r + S_g - 2 (S_r^1/2 S_g S_r^1/2)^1/2), clamped >= 0.
inline double fid(const FeatureStats& r, const FeatureStats& g) {
  require(r.mu.size() == g.mu.size() && r.cov.rows() == g.cov.rows(), "fid: feature dimensions differ");
  const Eigen::MatrixXd sr = detail::psd_sqrt(r.cov);
  const Eigen::MatrixXd M = sr * g.cov * sr;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (M + M.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double v = (r.mu - g.mu).squaredNorm() + r.cov.trace() + g.cov.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, v);
}

// ---------------------------------------------------------------------------
// GRAD-CAM

/// ReLU(sum_c w_c A_c) with w_c the spatial mean of the gradient, min-max
/// normalized per image. activations, grads (B,C,h,w) -> (B,1,h,w).
template <class T>
Tensor<double> cam_from(const Tensor<T>& activations, const Tensor<T>& grads) {
  require(activations.rank() == 4 && activations.dims() == grads.dims(), "grad_cam: activation/gradient shapes");
  const int B = activations.batch(), C = activations.channels(), h = activations.height(), w = activations.width();
  const int P = h * w;
  Tensor<double> out({B, 1, h, w});
  for (int b = 0; b < B; ++b) {
    double* o = &out.at(b, 0, 0, 0);
    for (int c = 0; c < C; ++c) {
      double wc = 0.0;
      const T* g = &grads.at(b, c, 0, 0);
      for (int p = 0; p < P; ++p) wc += static_cast<double>(g[p]);
      wc /= P;
      const T* a = &activations.at(b, c, 0, 0);
      for (int p = 0; p < P; ++p) o[p] += wc * static_cast<double>(a[p]);
    }
    double lo = 0.0, hi = 0.0;
    for (int p = 0; p < P; ++p) {
      o[p] = std::max(0.0, o[p]);
      lo = p ? std::min(lo, o[p]) : o[p];
      hi = p ? std::max(hi, o[p]) : o[p];
    }
    for (int p = 0; p < P; ++p) o[p] = hi > lo ? (o[p] - lo) / (hi - lo) : (hi > 0.0 ? 1.0 : 0.0);
  }
  return out;
}

/// Bilinear resize (half-pixel centers, edge clamp) of (B,1,h,w) maps.
inline Tensor<double> upsample_bilinear(const Tensor<double>& m, int H, int W) {
  require(m.rank() == 4 && H >= 1 && W >= 1, "upsample_bilinear: bad shape");
  const int B = m.batch(), C = m.channels(), h = m.height(), w = m.width();
  Tensor<double> out({B, C, H, W});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double sy = std::clamp((y + 0.5) * h / H - 0.5, 0.0, h - 1.0);
          const double sx = std::clamp((x + 0.5) * w / W - 0.5, 0.0, w - 1.0);
          const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
          const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
          const double fy = sy - y0, fx = sx - x0;
          out.at(b, c, y, x) = (1 - fy) * ((1 - fx) * m.at(b, c, y0, x0) + fx * m.at(b, c, y0, x1)) +
                               fy * ((1 - fx) * m.at(b, c, y1, x0) + fx * m.at(b, c, y1, x1));
        }
  return out;
}

/// Heatmaps (B,1,H,W) in [0,1] for score -D_H^2(encode(x_b), target).
template <class T>
Tensor<double> grad_cam(const ModelState<T>& st, const Tensor<T>& x, const DiagGaussian& target) {
  require(target.dim() == static_cast<std::size_t>(st.arch.latent_dim), "grad_cam: prototype dimension");
  ad::Tape<T> t;
  auto p = bind_params(t, st, false);
  const auto lv = st.arch.levels().back();
  const Tensor<T> zero({x.batch(), st.arch.widths.back(), lv.first, lv.second}, T(0));
  auto enc = encode_on(t, p, st.arch, t.constant(x), &zero, true);
  const int B = x.batch(), d = st.arch.latent_dim;
  Tensor<T> tm({1, d}), tv({1, d});
  for (int i = 0; i < d; ++i) {
    tm[static_cast<std::size_t>(i)] = static_cast<T>(target.mean()[static_cast<std::size_t>(i)]);
    tv[static_cast<std::size_t>(i)] = static_cast<T>(target.var()[static_cast<std::size_t>(i)]);
  }
  std::vector<std::pair<int, int>> pairs;
  for (int b = 0; b < B; ++b) pairs.emplace_back(b, 0);
  ad::Var dist = ad::pair_distances(t, enc.mean, enc.var, t.constant(tm), t.constant(tv), pairs,
                                    ad::PairMetric::HellingerSq);
  // per-image scores are independent, so one backward of their sum gives every image's gradient
  ad::Var score = ad::scale(t, ad::sum(t, dist), T(-1));
  t.backward(score);
  const Tensor<T> g = t.grad(enc.offset);
  return upsample_bilinear(cam_from(t.value(enc.final_map), g), x.height(), x.width());
}

/// 8-bit binary PGM of a single (1,1,H,W) or (H,W)-shaped map in [0,1].
inline void write_pgm(std::ostream& os, const Tensor<double>& map) {
  require(map.rank() >= 2, "write_pgm: need at least 2 dims");
  const int H = map.dim(map.rank() - 2), W = map.dim(map.rank() - 1);
  require(map.size() == static_cast<std::size_t>(H) * W, "write_pgm: one map at a time");
  os << "P5\n" << W << " " << H << "\n255\n";
  for (std::size_t i = 0; i < map.size(); ++i) {
    const double v = std::clamp(map[i], 0.0, 1.0);
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
}

inline void write_pgm(const std::string& path, const Tensor<double>& map) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write '" + path + "'");
  write_pgm(os, map);
}

// ---------------------------------------------------------------------------
// robustness sweeps

enum class SweepKind { Adversarial, Gaussian };

inline SweepKind parse_sweep_kind(std::string_view s) {
  if (s == "adversarial") return SweepKind::Adversarial;
  if (s == "gaussian") return SweepKind::Gaussian;
  throw ConfigError("unknown sweep kind '" + std::string(s) + "' (expected adversarial, gaussian)");
}

inline std::string_view to_string(SweepKind k) { return k == SweepKind::Adversarial ? "adversarial" : "gaussian"; }

struct SweepCurve {
  SweepKind kind = SweepKind::Adversarial;
  std::vector<double> levels;
  std::vector<EvalResult> accuracy;
  int episodes = 0;
  bool trained_robust = false;
};

/// Input-space FGSM on an episode's queries against its support prototypes.
template <class T>
Tensor<float> attack_queries(const ModelState<T>& st, const Episode& ep, double epsilon, PrototypeMode mode) {
  if (epsilon == 0.0) return ep.query;
  const EpisodeLayout L = layout_of(ep);
  const Tensor<T> x = concat_batch(std::vector<Tensor<T>>{ep.support.template cast<T>(), ep.query.template cast<T>()});
  LossConfig cfg;
  cfg.prototype = mode;
  const Tensor<T> g = fgsm_gradient(st, x, L, cfg, FgsmSpace::Input);
  const Tensor<T> gq = batch_slice(g, L.support(), L.query());
  return fgsm_step(ep.query.template cast<T>(), gq, epsilon).template cast<float>();
}

template <class T>
SweepCurve robustness_sweep(const ModelState<T>& st, const Dataset& ds, SweepKind kind,
                            const std::vector<double>& levels, const EvalConfig& cfg) {
  require(!levels.empty(), "robustness_sweep: no levels");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (!(levels[i] >= 0.0)) throw ConfigError("sweep levels must be >= 0");
    if (i && !(levels[i] > levels[i - 1])) throw ConfigError("sweep levels must be strictly increasing");
  }
  SweepCurve curve{kind, levels, {}, cfg.episodes, st.meta.value("trained_robust", false)};
  const auto embed = model_embedder(st);
  for (double level : levels) {
    auto perturb = [&](const Episode& ep) -> Tensor<float> {
      if (kind == SweepKind::Adversarial) return attack_queries(st, ep, level, cfg.prototype);
      return gaussian_corrupt(ep.query, level, derive_seed(ep.seed, 0x6a05));
    };
    curve.accuracy.push_back(evaluate_with(embed, ds, cfg, perturb));
  }
  return curve;
}

inline constexpr std::string_view kSweepHeader = "kind,level,acc_mean,acc_ci95,episodes,trained_robust";

inline void write_sweep_csv(std::ostream& os, const SweepCurve& c, bool header = true) {
  if (header) os << kSweepHeader << "\n";
  for (std::size_t i = 0; i < c.levels.size(); ++i)
    os << to_string(c.kind) << "," << c.levels[i] << "," << std::setprecision(6) << std::fixed
       << c.accuracy[i].mean << "," << c.accuracy[i].ci95 << std::defaultfloat << "," << c.episodes << ","
       << (c.trained_robust ? 1 : 0) << "\n";
}

// ---------------------------------------------------------------------------
// reconstruction quality

/// Pooled final-map features of `extractor` for each image.
template <class T>
std::vector<std::vector<double>> pooled_features(const ModelState<T>& extractor, const std::vector<Tensor<T>>& images) {
  std::vector<std::vector<double>> out;
  for (const auto& img : images) {
    const auto e = encode(img, extractor);
    for (int b = 0; b < e.pooled.dim(0); ++b) {
      const auto off = static_cast<std::size_t>(b) * e.pooled.dim(1);
      out.emplace_back(e.pooled.data().begin() + off, e.pooled.data().begin() + off + e.pooled.dim(1));
    }
  }
  return out;
}

/// Decoder reconstructions (z = posterior mean) of the given images.
template <class T>
std::vector<Tensor<T>> reconstruct(const ModelState<T>& st, const std::vector<Tensor<T>>& images) {
  std::vector<Tensor<T>> out;
  for (const auto& img : images) {
    ad::Tape<T> t;
    auto p = bind_params(t, st, false);
    auto e = encode_on(t, p, st.arch, t.constant(img));
    out.push_back(t.value(decode_on(t, p, st.arch, e.mean)));
  }
  return out;
}

/// FID between images and their reconstructions, in the feature space of
/// `extractor`.
template <class T>
double reconstruction_fid(const ModelState<T>& model, const ModelState<T>& extractor,
                          const std::vector<Tensor<T>>& images) {
  const auto real = feature_stats(pooled_features(extractor, images));
  const auto fake = feature_stats(pooled_features(extractor, reconstruct(model, images)));
  return fid(real, fake);
}

}  // namespace anrot
