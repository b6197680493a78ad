#pragma once

// Datasets, N-way k-shot episodes, Gaussian class prototypes, the episode
// losses, SGD training and episodic evaluation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "anrot/autograd.hpp"
#include "anrot/checkpoint.hpp"
#include "anrot/errors.hpp"
#include "anrot/gauss_metrics.hpp"
#include "anrot/network.hpp"
#include "anrot/parallel.hpp"
#include "anrot/rng.hpp"
#include "anrot/robustness.hpp"
#include "anrot/tensor.hpp"
#include "anrot/variational.hpp"

namespace anrot {

// ---------------------------------------------------------------------------
// datasets

enum class Split { MetaTrain, MetaVal, MetaTest };

struct Dataset {
  std::vector<Tensor<float>> images;  // each (1, C, H, W), values in [0, 1]
  std::vector<int> labels;
  std::map<int, std::vector<int>> class_index;
  Split split = Split::MetaTrain;

  void add(Tensor<float> image, int label) {
    require(image.rank() == 4 && image.batch() == 1, "Dataset::add: image must be (1,C,H,W)");
    if (!images.empty())
      require(image.dims() == images.front().dims(),
              "Dataset::add: image shape " + dims_string(image.dims()) + " differs from " +
                  dims_string(images.front().dims()));
    require(label >= 0, "Dataset::add: labels must be non-negative");
    class_index[label].push_back(static_cast<int>(images.size()));
    images.push_back(std::move(image));
    labels.push_back(label);
  }

  std::size_t size() const { return images.size(); }

  std::vector<int> classes() const {
    std::vector<int> out;
    for (const auto& [c, idx] : class_index) out.push_back(c);
    return out;
  }

  std::vector<int> image_dims() const {
    require(!images.empty(), "Dataset: empty");
    return images.front().dims();
  }

  /// Throws ConfigError unless at least `n_way` classes have `min_per_class` records.
  void check_episodes(int n_way, int min_per_class) const {
    int ok = 0;
    for (const auto& [c, idx] : class_index)
      if (static_cast<int>(idx.size()) >= min_per_class) ++ok;
    if (ok < n_way)
      throw ConfigError("dataset has " + std::to_string(ok) + " classes with >= " +
                        std::to_string(min_per_class) + " records; a " + std::to_string(n_way) +
                        "-way episode needs " + std::to_string(n_way));
  }
};

inline constexpr char kDatasetMagic[4] = {'A', 'N', 'R', 'T'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(std::ostream& os, const Dataset& ds) {
  os.write(kDatasetMagic, 4);
  io::put_u32(os, kDatasetVersion);
  io::put_u32(os, static_cast<std::uint32_t>(ds.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& img = ds.images[i];
    io::put_u32(os, static_cast<std::uint32_t>(ds.labels[i]));
    io::put_u32(os, static_cast<std::uint32_t>(img.channels()));
    io::put_u32(os, static_cast<std::uint32_t>(img.height()));
    io::put_u32(os, static_cast<std::uint32_t>(img.width()));
    for (float v : img.data()) io::put_f32(os, v);
  }
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write dataset '" + path + "'");
  save_dataset(os, ds);
}

inline Dataset load_dataset(std::istream& is, Split split = Split::MetaTrain) {
  io::expect_magic(is, kDatasetMagic, "dataset");
  const auto version = io::get_u32(is);
  if (version != kDatasetVersion)
    throw ConfigError("dataset: unsupported version " + std::to_string(version));
  const auto count = io::get_u32(is);
  Dataset ds;
  ds.split = split;
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto label = io::get_u32(is);
    const int C = static_cast<int>(io::get_u32(is)), H = static_cast<int>(io::get_u32(is)),
              W = static_cast<int>(io::get_u32(is));
    if (C < 1 || H < 1 || W < 1) throw ConfigError("dataset: record " + std::to_string(r) + " has empty dims");
    Tensor<float> img({1, C, H, W});
    for (auto& v : img.storage()) {
      v = io::get_f32(is);
      if (!(v >= 0.0f && v <= 1.0f))
        throw ConfigError("dataset: record " + std::to_string(r) + " has a pixel outside [0,1]");
    }
    if (!ds.images.empty() && img.dims() != ds.images.front().dims())
      throw ConfigError("dataset: record " + std::to_string(r) + " has shape " + dims_string(img.dims()) +
                        ", expected " + dims_string(ds.images.front().dims()));
    ds.add(std::move(img), static_cast<int>(label));
  }
  return ds;
}

inline Dataset load_dataset(const std::string& path, Split split = Split::MetaTrain) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open dataset '" + path + "'");
  return load_dataset(is, split);
}

/// Class labels shared by two splits (should be empty).
inline std::vector<int> shared_classes(const Dataset& a, const Dataset& b) {
  std::vector<int> out;
  for (const auto& [c, idx] : a.class_index)
    if (b.class_index.count(c)) out.push_back(c);
  return out;
}

struct SyntheticSpec {
  int classes = 8;
  int per_class = 20;
  int channels = 1;
  int height = 16;
  int width = 16;
  double separation = 1.0;  // pattern amplitude; scales inter-class distance
  double noise = 0.1;       // per-pixel std
  std::uint64_t seed = 7;
  int first_label = 0;
  Split split = Split::MetaTrain;
};

namespace detail {

// A few signed Gaussian bumps, normalized to max |P| = 1. Depends only on
// (seed, label), so splits with disjoint labels get disjoint patterns.
inline std::vector<double> synthetic_pattern(const SyntheticSpec& s, int label) {
  Rng rng(derive_seed(s.seed, 0x9a77e2, static_cast<std::uint64_t>(label)));
  std::uniform_real_distribution<double> ux(0.0, s.width), uy(0.0, s.height);
  const double scale = std::min(s.height, s.width) / 16.0;
  std::uniform_real_distribution<double> ur(1.5 * scale, 3.5 * scale);
  std::bernoulli_distribution coin(0.5);
  std::vector<double> p(static_cast<std::size_t>(s.channels) * s.height * s.width, 0.0);
  for (int c = 0; c < s.channels; ++c)
    for (int b = 0; b < 5; ++b) {
      const double cx = ux(rng), cy = uy(rng), r = ur(rng), amp = coin(rng) ? 1.0 : -1.0;
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
          const double d2 = (x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy);
          p[(static_cast<std::size_t>(c) * s.height + y) * s.width + x] += amp * std::exp(-d2 / (2 * r * r));
        }
    }
  double mx = 0.0;
  for (double v : p) mx = std::max(mx, std::abs(v));
  if (mx > 0.0)
    for (double& v : p) v /= mx;
  return p;
}

}  // namespace detail

inline Dataset make_synthetic(const SyntheticSpec& s) {
  if (s.classes < 2) throw ConfigError("synthetic.classes must be >= 2");
  if (s.per_class < 1) throw ConfigError("synthetic.per_class must be >= 1");
  if (s.channels < 1 || s.height < 1 || s.width < 1) throw ConfigError("synthetic image dims must be >= 1");
  if (!(s.separation >= 0.0) || !(s.noise >= 0.0))
    throw ConfigError("synthetic.separation and synthetic.noise must be >= 0");
  Dataset ds;
  ds.split = s.split;
  for (int c = 0; c < s.classes; ++c) {
    const int label = s.first_label + c;
    const auto pattern = detail::synthetic_pattern(s, label);
    for (int i = 0; i < s.per_class; ++i) {
      Rng rng(derive_seed(s.seed, static_cast<std::uint64_t>(label), static_cast<std::uint64_t>(i) + 1));
      std::normal_distribution<double> n(0.0, 1.0);
      Tensor<float> img({1, s.channels, s.height, s.width});
      for (std::size_t j = 0; j < img.size(); ++j) {
        const double v = 0.5 + 0.5 * s.separation * pattern[j] + (s.noise > 0 ? s.noise * n(rng) : 0.0);
        img[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
      ds.add(std::move(img), label);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// episodes

struct Episode {
  Tensor<float> support;  // (N*k, C, H, W), class-major
  Tensor<float> query;    // (N*q, C, H, W), class-major
  std::vector<int> support_labels, query_labels;  // 0..N-1
  std::vector<int> classes;                       // dataset class ids, in episode order
  std::vector<int> support_index, query_index;    // dataset record indices
  std::uint64_t seed = 0;
  int n_way = 0, k_shot = 0, q_query = 0;
};

inline Episode sample_episode(const Dataset& ds, int N, int k, int q, std::uint64_t seed) {
  if (N < 1 || k < 1 || q < 1) throw ConfigError("episode needs n_way, k_shot, q_query >= 1");
  std::vector<int> eligible;
  for (const auto& [c, idx] : ds.class_index)
    if (static_cast<int>(idx.size()) >= k + q) eligible.push_back(c);
  if (static_cast<int>(eligible.size()) < N)
    throw ConfigError("cannot sample a " + std::to_string(N) + "-way " + std::to_string(k) + "-shot episode with " +
                      std::to_string(q) + " queries: only " + std::to_string(eligible.size()) +
                      " classes have >= " + std::to_string(k + q) + " records");
  Rng rng(seed);
  // partial Fisher-Yates: first n entries become a uniform sample without replacement
  auto pick = [&rng](std::vector<int>& v, int n) {
    for (int i = 0; i < n; ++i) {
      std::uniform_int_distribution<int> u(i, static_cast<int>(v.size()) - 1);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(u(rng))]);
    }
    v.resize(static_cast<std::size_t>(n));
  };
  pick(eligible, N);

  Episode ep;
  ep.seed = seed;
  ep.n_way = N;
  ep.k_shot = k;
  ep.q_query = q;
  ep.classes = eligible;
  std::vector<Tensor<float>> sup, qry;
  for (int j = 0; j < N; ++j) {
    std::vector<int> idx = ds.class_index.at(eligible[static_cast<std::size_t>(j)]);
    pick(idx, k + q);
    for (int i = 0; i < k + q; ++i) {
      const int r = idx[static_cast<std::size_t>(i)];
      if (i < k) {
        ep.support_index.push_back(r);
        ep.support_labels.push_back(j);
        sup.push_back(ds.images[static_cast<std::size_t>(r)]);
      } else {
        ep.query_index.push_back(r);
        ep.query_labels.push_back(j);
        qry.push_back(ds.images[static_cast<std::size_t>(r)]);
      }
    }
  }
  ep.support = concat_batch(sup);
  ep.query = concat_batch(qry);
  return ep;
}

// ---------------------------------------------------------------------------
// prototypes, softmax and value-level losses

enum class PrototypeMode { Mean, Pooled };

inline PrototypeMode parse_prototype_mode(std::string_view s) {
  if (s == "mean") return PrototypeMode::Mean;
  if (s == "pooled") return PrototypeMode::Pooled;
  throw ConfigError("unknown prototype mode '" + std::string(s) + "' (expected mean, pooled)");
}

struct ClassPrototype {
  int cls = 0;
  DiagGaussian dist;
};

/// Mean of member means; variance = mean of member variances, plus the spread
/// of member means in Pooled mode.
inline DiagGaussian class_prototype(std::span<const DiagGaussian> members,
                                    PrototypeMode mode = PrototypeMode::Mean) {
  require(!members.empty(), "class_prototype: no members");
  const std::size_t d = members.front().dim();
  std::vector<double> m(d, 0.0), v(d, 0.0);
  for (const auto& g : members) {
    require(g.dim() == d, "class_prototype: members differ in dimension");
    for (std::size_t i = 0; i < d; ++i) {
      m[i] += g.mean()[i];
      v[i] += g.var()[i];
    }
  }
  const double n = static_cast<double>(members.size());
  for (std::size_t i = 0; i < d; ++i) {
    m[i] /= n;
    v[i] /= n;
  }
  if (mode == PrototypeMode::Pooled)
    for (const auto& g : members)
      for (std::size_t i = 0; i < d; ++i) v[i] += (g.mean()[i] - m[i]) * (g.mean()[i] - m[i]) / n;
  return {std::move(m), std::move(v)};
}

inline DiagGaussian class_prototype(const std::vector<DiagGaussian>& members,
                                    PrototypeMode mode = PrototypeMode::Mean) {
  return class_prototype(std::span<const DiagGaussian>(members), mode);
}

/// softmax_j(-D_H^2(v, c_j) / tau) over all prototypes.
inline std::vector<double> hellinger_softmax(const DiagGaussian& v, std::span<const DiagGaussian> protos,
                                             double temperature = 1.0) {
  require(!protos.empty(), "hellinger_softmax: no prototypes");
  require(temperature > 0.0, "hellinger_softmax: temperature must be > 0");
  std::vector<double> logits(protos.size());
  for (std::size_t j = 0; j < protos.size(); ++j) logits[j] = -hellinger_sq(v, protos[j]) / temperature;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double& l : logits) z += (l = std::exp(l - mx));
  for (double& l : logits) l /= z;
  return logits;
}

inline std::vector<double> hellinger_softmax(const DiagGaussian& v, const std::vector<ClassPrototype>& protos,
                                             double temperature = 1.0) {
  std::vector<DiagGaussian> d;
  for (const auto& p : protos) d.push_back(p.dist);
  return hellinger_softmax(v, std::span<const DiagGaussian>(d), temperature);
}

/// argmin_j D_H(v, c_j); ties go to the lowest index.
inline int predict(const DiagGaussian& v, std::span<const DiagGaussian> protos) {
  require(!protos.empty(), "predict: no prototypes");
  int best = 0;
  double best_d = hellinger_sq(v, protos[0]);
  for (std::size_t j = 1; j < protos.size(); ++j) {
    const double d = hellinger_sq(v, protos[j]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(j);
    }
  }
  return best;
}

inline int predict(const DiagGaussian& v, const std::vector<ClassPrototype>& protos) {
  std::vector<DiagGaussian> d;
  for (const auto& p : protos) d.push_back(p.dist);
  return protos[static_cast<std::size_t>(predict(v, std::span<const DiagGaussian>(d)))].cls;
}

struct LossValue {
  double value = 0.0;
  bool clamped = false;  // a true-label probability hit the 1e-12 floor
  int skipped = 0;       // rows left out (hesim: queries without a leave-one-out prototype)
};

inline LossValue cce_loss(const std::vector<std::vector<double>>& probs, const std::vector<int>& labels) {
  require(!probs.empty() && probs.size() == labels.size(), "cce_loss: one label per row expected");
  LossValue out;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const auto& row = probs[i];
    require(labels[i] >= 0 && labels[i] < static_cast<int>(row.size()), "cce_loss: label out of range");
    double s = 0.0;
    for (double p : row) s += p;
    require(std::abs(s - 1.0) < 1e-6, "cce_loss: probability rows must sum to 1");
    double p = row[static_cast<std::size_t>(labels[i])];
    if (p < 1e-12) {
      p = 1e-12;
      out.clamped = true;
    }
    out.value -= std::log(p);
  }
  out.value /= static_cast<double>(probs.size());
  return out;
}

/// Leave-one-out query-prototype contrastive loss.
inline LossValue hesim_loss(const std::vector<DiagGaussian>& queries, const std::vector<int>& labels,
                            double temperature = 1.0, PrototypeMode mode = PrototypeMode::Mean) {
  require(!queries.empty() && queries.size() == labels.size(), "hesim_loss: one label per query expected");
  const int N = *std::max_element(labels.begin(), labels.end()) + 1;
  LossValue out;
  int used = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    std::vector<DiagGaussian> protos;
    bool ok = true;
    for (int j = 0; j < N; ++j) {
      std::vector<DiagGaussian> members;
      for (std::size_t r = 0; r < queries.size(); ++r)
        if (labels[r] == j && r != i) members.push_back(queries[r]);
      if (members.empty()) {
        if (j == labels[i]) ok = false;
        else throw ContractViolation("hesim_loss: class " + std::to_string(j) + " has no queries");
        break;
      }
      protos.push_back(class_prototype(members, mode));
    }
    if (!ok) {
      ++out.skipped;
      continue;
    }
    const auto p = hellinger_softmax(queries[i], std::span<const DiagGaussian>(protos), temperature);
    out.value -= std::log(std::max(p[static_cast<std::size_t>(labels[i])], 1e-12));
    ++used;
  }
  if (used) out.value /= used;
  return out;
}

template <class T>
double rec_loss(const Tensor<T>& decoded, const Tensor<T>& original) {
  require(decoded.dims() == original.dims(), "rec_loss: shape mismatch " + dims_string(decoded.dims()) +
                                                 " vs " + dims_string(original.dims()));
  double acc = 0.0;
  for (std::size_t i = 0; i < decoded.size(); ++i)
    acc += std::abs(static_cast<double>(decoded[i]) - static_cast<double>(original[i]));
  return acc / static_cast<double>(decoded.size());
}

// ---------------------------------------------------------------------------
// tape-level episode loss

struct LossWeights {
  double lambda1 = 0.5;  // hesim
  double lambda2 = 1.0;  // reconstruction
  double lambda3 = 0.0;  // prior penalty

  void validate() const {
    if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0) || !(lambda3 >= 0.0))
      throw ConfigError("loss.lambda1, loss.lambda2 and loss.lambda3 must be >= 0");
  }
};

struct LossConfig {
  LossWeights weights;
  PenaltyKind penalty{PenaltyType::HellingerELBO};
  double temperature = 1.0;
  PrototypeMode prototype = PrototypeMode::Mean;
  ad::PairMetric hesim_metric = ad::PairMetric::HellingerSq;
};

inline ad::PairMetric parse_hesim_metric(std::string_view s) {
  if (s == "hellinger") return ad::PairMetric::HellingerSq;
  if (s == "kl") return ad::PairMetric::KL;
  throw ConfigError("unknown hesim metric '" + std::string(s) + "' (expected hellinger, kl)");
}

inline std::string_view to_string(ad::PairMetric m) { return m == ad::PairMetric::KL ? "kl" : "hellinger"; }

struct EpisodeLayout {
  int n_way = 0;
  std::vector<int> support_labels;  // rows [0, S)
  std::vector<int> query_labels;    // rows [S, S + Q)
  int support() const { return static_cast<int>(support_labels.size()); }
  int query() const { return static_cast<int>(query_labels.size()); }
  int rows() const { return support() + query(); }
};

inline EpisodeLayout layout_of(const Episode& ep) {
  return {ep.n_way, ep.support_labels, ep.query_labels};
}

namespace detail {

// (N x R) matrix averaging the rows of each support class.
template <class T>
std::vector<T> support_average(const EpisodeLayout& L) {
  const int R = L.rows();
  std::vector<T> A(static_cast<std::size_t>(L.n_way) * R, T(0));
  std::vector<int> count(static_cast<std::size_t>(L.n_way), 0);
  for (int y : L.support_labels) ++count[static_cast<std::size_t>(y)];
  for (int r = 0; r < L.support(); ++r) {
    const int y = L.support_labels[static_cast<std::size_t>(r)];
    A[static_cast<std::size_t>(y) * R + r] = T(1) / T(count[static_cast<std::size_t>(y)]);
  }
  return A;
}

// (Q*N x R) matrix: row i*N + j averages the queries of class j other than i.
// `active[i]` is false when query i's own class has no other query.
template <class T>
std::vector<T> leave_one_out_average(const EpisodeLayout& L, std::vector<bool>& active) {
  const int R = L.rows(), Q = L.query(), N = L.n_way, S = L.support();
  std::vector<T> A(static_cast<std::size_t>(Q) * N * R, T(0));
  active.assign(static_cast<std::size_t>(Q), true);
  for (int i = 0; i < Q; ++i)
    for (int j = 0; j < N; ++j) {
      std::vector<int> rows;
      for (int r = 0; r < Q; ++r)
        if (L.query_labels[static_cast<std::size_t>(r)] == j && r != i) rows.push_back(r);
      if (rows.empty()) {
        require(L.query_labels[static_cast<std::size_t>(i)] == j, "hesim: a class has no queries");
        active[static_cast<std::size_t>(i)] = false;
        rows.push_back(i);  // placeholder keeps the row finite; it carries no gradient
      }
      T* row = A.data() + (static_cast<std::size_t>(i) * N + j) * R;
      for (int r : rows) row[S + r] = T(1) / T(rows.size());
    }
  return A;
}

template <class T>
std::pair<ad::Var, ad::Var> prototypes_on(ad::Tape<T>& t, ad::Var mean, ad::Var var, std::vector<T> A,
                                          int rows, PrototypeMode mode) {
  ad::Var pm = ad::mix_rows(t, mean, A, rows);
  ad::Var pv = ad::mix_rows(t, var, A, rows);
  if (mode == PrototypeMode::Pooled) {
    ad::Var m2 = ad::mix_rows(t, ad::square(t, mean), std::move(A), rows);
    pv = ad::add(t, pv, ad::sub(t, m2, ad::square(t, pm)));
  }
  return {pm, pv};
}

}  // namespace detail

/// Support-prototype classification logits -D_H^2 / tau, (Q, N).
template <class T>
ad::Var episode_logits_on(ad::Tape<T>& t, ad::Var mean, ad::Var var, const EpisodeLayout& L,
                          const LossConfig& cfg) {
  auto [pm, pv] = detail::prototypes_on(t, mean, var, detail::support_average<T>(L), L.n_way, cfg.prototype);
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < L.query(); ++i)
    for (int j = 0; j < L.n_way; ++j) pairs.emplace_back(L.support() + i, j);
  ad::Var d = ad::pair_distances(t, mean, var, pm, pv, std::move(pairs), ad::PairMetric::HellingerSq);
  return ad::scale(t, ad::reshape(t, d, {L.query(), L.n_way}), T(-1.0 / cfg.temperature));
}

template <class T>
double logits_accuracy(const Tensor<T>& logits, const std::vector<int>& labels) {
  const int Q = logits.dim(0), N = logits.dim(1);
  int correct = 0;
  for (int i = 0; i < Q; ++i) {
    const T* row = logits.data().data() + static_cast<std::size_t>(i) * N;
    const int arg = static_cast<int>(std::max_element(row, row + N) - row);  // first max wins ties
    correct += arg == labels[static_cast<std::size_t>(i)];
  }
  return static_cast<double>(correct) / Q;
}

template <class T>
struct EpisodeLoss {
  ad::Var total, cce, hesim, rec, prior;
  double accuracy = 0.0;
  int hesim_skipped = 0;
  EncodeVars enc;
};

/// Full episode objective on a stacked (support; query) batch `images`.
/// `rec_target` is what the decoder should reproduce (the clean batch);
/// `decode_noise` drives the reparameterized sample.
template <class T>
EpisodeLoss<T> helanet_loss_on(ad::Tape<T>& t, const ParamVars& p, const Architecture& arch, ad::Var images,
                               const EpisodeLayout& L, const LossConfig& cfg, const Tensor<T>& rec_target,
                               const Tensor<T>& decode_noise, const Tensor<T>* feature_offset = nullptr) {
  cfg.weights.validate();
  require(t.value(images).batch() == L.rows(), "helanet_loss: batch does not match the episode layout");
  EpisodeLoss<T> out;
  out.enc = encode_on(t, p, arch, images, feature_offset);
  const ad::Var mean = out.enc.mean, var = out.enc.var;

  ad::Var logits = episode_logits_on(t, mean, var, L, cfg);
  out.cce = ad::softmax_xent(t, logits, L.query_labels);
  out.accuracy = logits_accuracy(t.value(logits), L.query_labels);

  std::vector<bool> active;
  auto A = detail::leave_one_out_average<T>(L, active);
  out.hesim_skipped = static_cast<int>(std::count(active.begin(), active.end(), false));
  auto [hm, hv] = detail::prototypes_on(t, mean, var, std::move(A), L.query() * L.n_way, cfg.prototype);
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < L.query(); ++i)
    for (int j = 0; j < L.n_way; ++j) pairs.emplace_back(L.support() + i, i * L.n_way + j);
  ad::Var hd = ad::pair_distances(t, mean, var, hm, hv, std::move(pairs), cfg.hesim_metric);
  ad::Var hl = ad::scale(t, ad::reshape(t, hd, {L.query(), L.n_way}), T(-1.0 / cfg.temperature));
  out.hesim = ad::softmax_xent(t, hl, L.query_labels, active);

  if (cfg.weights.lambda2 > 0.0) {
    ad::Var z = ad::reparameterize(t, mean, var, decode_noise);
    out.rec = ad::l1_mean(t, decode_on(t, p, arch, z), rec_target);
  } else {
    out.rec = t.constant(Tensor<T>({1}, T(0)));
  }
  out.prior = ad::prior_penalty(t, mean, var, cfg.penalty);
  out.total = ad::weighted_sum(t, {out.cce, out.hesim, out.rec, out.prior},
                               {T(1), T(cfg.weights.lambda1), T(cfg.weights.lambda2), T(cfg.weights.lambda3)});
  return out;
}

// ---------------------------------------------------------------------------
// training

struct TrainConfig {
  int n_way = 5;
  int k_shot = 1;
  int q_query = 5;
  int episodes = 2000;
  double lr = 0.001;
  bool robust = true;
  RobustConfig robust_cfg;
  LossConfig loss;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_way < 1 || k_shot < 1 || q_query < 1) throw ConfigError("episode.n_way, k_shot, q_query must be >= 1");
    if (episodes < 0) throw ConfigError("train.episodes must be >= 0");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be > 0");
    if (!(loss.temperature > 0.0)) throw ConfigError("loss.temperature must be > 0");
    robust_cfg.validate();
    loss.weights.validate();
  }
};

struct LogRow {
  int episode = 0;
  double total = 0, cce = 0, hesim = 0, rec = 0, prior = 0, acc = 0;
};

inline constexpr std::string_view kTrainLogHeader = "episode,total,cce,hesim,rec,prior,acc";

template <class T>
struct TrainResult {
  ModelState<T> state;
  std::vector<LogRow> log;
  bool diverged = false;
  std::string error;  // why training stopped early
};

/// Gradient of the clean episode classification loss with respect to the
/// input images (Input) or the final feature map (Feature).
template <class T>
Tensor<T> fgsm_gradient(const ModelState<T>& st, const Tensor<T>& images, const EpisodeLayout& L,
                        const LossConfig& cfg, FgsmSpace space) {
  ad::Tape<T> t;
  auto p = bind_params(t, st, false);
  const bool input = space == FgsmSpace::Input;
  ad::Var x = input ? t.variable(images) : t.constant(images);
  std::optional<Tensor<T>> zero;
  if (!input) {
    const auto lv = st.arch.levels().back();
    zero.emplace(std::vector<int>{images.batch(), st.arch.widths.back(), lv.first, lv.second}, T(0));
  }
  auto enc = encode_on(t, p, st.arch, x, zero ? &*zero : nullptr, !input);
  ad::Var loss = ad::softmax_xent(t, episode_logits_on(t, enc.mean, enc.var, L, cfg), L.query_labels);
  t.backward(loss);
  return t.grad(input ? x : enc.offset);
}

template <class T>
Tensor<T> standard_normal(const std::vector<int>& dims, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor<T> out(dims);
  for (auto& v : out.storage()) v = static_cast<T>(n(rng));
  return out;
}

/// SGD over `cfg.episodes` episodes. On a non-finite loss or gradient the run
/// stops and returns the last parameters that produced a finite step.
template <class T>
TrainResult<T> train(const Dataset& ds, ModelState<T> state, const TrainConfig& cfg,
                     const std::function<void(const LogRow&)>& on_row = {}) {
  cfg.validate();
  TrainResult<T> res;
  if (cfg.episodes > 0) ds.check_episodes(cfg.n_way, cfg.k_shot + cfg.q_query);
  for (int e = 1; e <= cfg.episodes; ++e) {
    try {
      const Episode ep = sample_episode(ds, cfg.n_way, cfg.k_shot, cfg.q_query, derive_seed(cfg.seed, 1, e));
      const EpisodeLayout L = layout_of(ep);
      const Tensor<T> clean = concat_batch(std::vector<Tensor<T>>{ep.support.template cast<T>(),
                                                                 ep.query.template cast<T>()});
      std::vector<int> labels = L.support_labels;
      labels.insert(labels.end(), L.query_labels.begin(), L.query_labels.end());

      Tensor<T> batch = clean;
      std::optional<Tensor<T>> offset;
      if (cfg.robust) {
        auto rb = robust_batch(clean, labels, cfg.robust_cfg, derive_seed(cfg.seed, 2, e),
                               [&](const Tensor<T>& x) {
                                 return fgsm_gradient(state, x, L, cfg.loss, cfg.robust_cfg.fgsm_space);
                               });
        batch = std::move(rb.images);
        offset = std::move(rb.feature_offset);
      }

      ad::Tape<T> t;
      auto p = bind_params(t, state, true);
      const auto noise = standard_normal<T>({L.rows(), state.arch.latent_dim}, derive_seed(cfg.seed, 3, e));
      auto loss = helanet_loss_on(t, p, state.arch, t.constant(batch), L, cfg.loss, clean, noise,
                                  offset ? &*offset : nullptr);
      LogRow row{e,
                 double(t.value(loss.total)[0]),
                 double(t.value(loss.cce)[0]),
                 double(t.value(loss.hesim)[0]),
                 double(t.value(loss.rec)[0]),
                 double(t.value(loss.prior)[0]),
                 loss.accuracy};
      if (!std::isfinite(row.total)) throw DomainError("non-finite loss at episode " + std::to_string(e));
      t.backward(loss.total);
      auto grads = collect_grads(t, p);
      for (const auto& [name, g] : grads)
        if (!g.all_finite()) throw DomainError("non-finite gradient for '" + name + "' at episode " + std::to_string(e));
      const T lr = static_cast<T>(cfg.lr);
      for (auto& [name, w] : state.params) {
        const auto& g = grads.at(name);
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
      }
      res.log.push_back(row);
      if (on_row) on_row(row);
    } catch (const DomainError& err) {
      res.diverged = true;
      res.error = err.what();
      break;
    }
  }
  if (!res.log.empty()) state.meta["trained_robust"] = cfg.robust || state.meta.value("trained_robust", false);
  res.state = std::move(state);
  return res;
}

// ---------------------------------------------------------------------------
// evaluation

struct EvalResult {
  double mean = 0.0;
  double ci95 = 0.0;
  std::vector<double> per_episode;
};

/// mean and 1.96 * sample std / sqrt(n).
inline EvalResult summarize(std::vector<double> acc) {
  EvalResult r;
  const double n = static_cast<double>(acc.size());
  for (double a : acc) r.mean += a;
  r.mean /= n;
  double ss = 0.0;
  for (double a : acc) ss += (a - r.mean) * (a - r.mean);
  r.ci95 = acc.size() > 1 ? 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n) : 0.0;
  r.per_episode = std::move(acc);
  return r;
}

struct EvalConfig {
  int n_way = 5;
  int k_shot = 1;
  int q_query = 5;
  int episodes = 100;
  std::uint64_t seed = 2;
  PrototypeMode prototype = PrototypeMode::Mean;
};

/// Episodic accuracy of an arbitrary embedding. `embed(images)` returns one
/// Gaussian per image; `perturb(episode)` returns the query images to score.
template <class EmbedFn, class PerturbFn>
EvalResult evaluate_with(EmbedFn&& embed, const Dataset& ds, const EvalConfig& cfg, PerturbFn&& perturb) {
  if (cfg.episodes < 2) throw ConfigError("eval.episodes must be >= 2");
  ds.check_episodes(cfg.n_way, cfg.k_shot + cfg.q_query);
  std::vector<double> acc(static_cast<std::size_t>(cfg.episodes));
  parallel_for(acc.size(), [&](std::size_t e) {
    const Episode ep = sample_episode(ds, cfg.n_way, cfg.k_shot, cfg.q_query, derive_seed(cfg.seed, e));
    const auto sup = embed(ep.support);
    const auto qry = embed(static_cast<const Tensor<float>&>(perturb(ep)));
    std::vector<DiagGaussian> protos;
    for (int j = 0; j < cfg.n_way; ++j) {
      std::vector<DiagGaussian> members;
      for (std::size_t r = 0; r < sup.size(); ++r)
        if (ep.support_labels[r] == j) members.push_back(sup[r]);
      protos.push_back(class_prototype(members, cfg.prototype));
    }
    int correct = 0;
    for (std::size_t i = 0; i < qry.size(); ++i)
      correct += predict(qry[i], std::span<const DiagGaussian>(protos)) == ep.query_labels[i];
    acc[e] = static_cast<double>(correct) / static_cast<double>(qry.size());
  });
  return summarize(std::move(acc));
}

template <class EmbedFn>
EvalResult evaluate_with(EmbedFn&& embed, const Dataset& ds, const EvalConfig& cfg) {
  return evaluate_with(std::forward<EmbedFn>(embed), ds, cfg, [](const Episode& ep) -> const Tensor<float>& { return ep.query; });
}

template <class T>
auto model_embedder(const ModelState<T>& st) {
  return [&st](const Tensor<float>& images) { return encode(images.template cast<T>(), st).q; };
}

template <class T>
EvalResult evaluate(const ModelState<T>& st, const Dataset& ds, const EvalConfig& cfg) {
  return evaluate_with(model_embedder(st), ds, cfg);
}

}  // namespace anrot
