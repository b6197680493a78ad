#pragma once

// FGSM (input and feature space), Gaussian pixel corruption, and the mixed
// clean/adversarial/gaussian batches used for minimax training.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "anrot/autograd.hpp"
#include "anrot/errors.hpp"
#include "anrot/rng.hpp"
#include "anrot/tensor.hpp"

namespace anrot {

enum class FgsmSpace { Input, Feature };

inline FgsmSpace parse_fgsm_space(std::string_view s) {
  if (s == "input") return FgsmSpace::Input;
  if (s == "feature") return FgsmSpace::Feature;
  throw ConfigError("unknown fgsm space '" + std::string(s) + "' (expected input, feature)");
}

inline std::string_view to_string(FgsmSpace s) { return s == FgsmSpace::Input ? "input" : "feature"; }

struct RobustConfig {
  double epsilon = 0.05;
  double sigma = 0.05;
  std::array<double, 3> mix = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};  // clean, adversarial, gaussian
  FgsmSpace fgsm_space = FgsmSpace::Feature;

  void validate() const {
    if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("robust.epsilon must be >= 0");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("robust.sigma must be >= 0");
    double s = 0.0;
    for (double m : mix) {
      if (!(m >= 0.0)) throw ConfigError("robust.mix entries must be >= 0");
      s += m;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("robust.mix must sum to 1 (got " + std::to_string(s) + ")");
  }
};

namespace detail {

template <class T>
T sign(T g) {
  return g > T(0) ? T(1) : (g < T(0) ? T(-1) : T(0));
}

template <class T>
T clamp01(T v) {
  return std::clamp(v, T(0), T(1));
}

}  // namespace detail

/// clamp01(x + eps * sign(grad)).
template <class T>
Tensor<T> fgsm_step(const Tensor<T>& x, const Tensor<T>& grad, double epsilon) {
  require(x.dims() == grad.dims(), "fgsm: gradient shape " + dims_string(grad.dims()) +
                                       " != input shape " + dims_string(x.dims()));
  if (!(epsilon >= 0.0)) throw DomainError("fgsm: epsilon must be >= 0");
  Tensor<T> out(x.dims());
  const T e = static_cast<T>(epsilon);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(grad[i])) throw DomainError("fgsm: non-finite gradient");
    out[i] = detail::clamp01(x[i] + e * detail::sign(grad[i]));
  }
  return out;
}

/// Input-space FGSM. `loss_fn(tape, x_var)` returns the scalar loss to ascend.
template <class T, class LossFn>
Tensor<T> fgsm_input(const Tensor<T>& x, LossFn&& loss_fn, double epsilon) {
  if (!(epsilon >= 0.0)) throw DomainError("fgsm: epsilon must be >= 0");
  if (epsilon == 0.0) return x;
  ad::Tape<T> t;
  ad::Var xv = t.variable(x);
  ad::Var loss = loss_fn(t, xv);
  if (!std::isfinite(static_cast<double>(t.value(loss)[0])))
    throw DomainError("fgsm: loss is not finite");
  t.backward(loss);
  return fgsm_step(x, t.grad(xv), epsilon);
}

/// Feature-space FGSM: psi2 + eps * sign(grad), no clamp.
template <class T>
Tensor<T> fgsm_feature(const Tensor<T>& psi2, const Tensor<T>& grad_psi2, double epsilon) {
  require(psi2.dims() == grad_psi2.dims(), "fgsm_feature: shape mismatch " +
                                               dims_string(psi2.dims()) + " vs " +
                                               dims_string(grad_psi2.dims()));
  if (!(epsilon >= 0.0)) throw DomainError("fgsm: epsilon must be >= 0");
  Tensor<T> out(psi2.dims());
  for (std::size_t i = 0; i < psi2.size(); ++i)
    out[i] = psi2[i] + static_cast<T>(epsilon) * detail::sign(grad_psi2[i]);
  return out;
}

template <class T>
Tensor<T> gaussian_corrupt(const Tensor<T>& x, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw DomainError("gaussian_corrupt: sigma must be >= 0");
  if (sigma == 0.0) return x;
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  Tensor<T> out(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = detail::clamp01(static_cast<T>(static_cast<double>(x[i]) + n(rng)));
  return out;
}

enum class Variant : std::uint8_t { Clean, Adversarial, Gaussian };

template <class T>
struct RobustBatch {
  Tensor<T> images;
  std::vector<int> labels;
  std::vector<Variant> variant;          // per row
  std::optional<Tensor<T>> feature_offset;  // feature-space FGSM only; zero on non-adversarial rows
};

/// Row counts (clean, adversarial, gaussian) for a batch of B under `mix`.
inline std::array<int, 3> mix_counts(int B, const std::array<double, 3>& mix) {
  const int clean = static_cast<int>(std::lround(mix[0] * B));
  const int adv = std::min(B - clean, static_cast<int>(std::lround(mix[1] * B)));
  return {clean, adv, B - clean - adv};
}

/// Replace a seeded subset of rows by adversarial and gaussian variants in
/// proportion cfg.mix. Row order and labels are kept. `grad_fn(images)` gives
/// the loss gradient w.r.t. the images (Input) or the final feature map
/// (Feature) for the clean batch; it is only called when a row is adversarial.
template <class T, class GradFn>
RobustBatch<T> robust_batch(const Tensor<T>& x, const std::vector<int>& y, const RobustConfig& cfg,
                            std::uint64_t seed, GradFn&& grad_fn) {
  cfg.validate();
  require(x.rank() == 4 && static_cast<int>(y.size()) == x.batch(),
          "robust_batch: one label per image expected");
  const int B = x.batch();
  std::vector<int> order(static_cast<std::size_t>(B));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0));
  std::shuffle(order.begin(), order.end(), rng);
  const auto counts = mix_counts(B, cfg.mix);

  RobustBatch<T> out{x, y, std::vector<Variant>(static_cast<std::size_t>(B), Variant::Clean), {}};
  for (int i = 0; i < B; ++i) {
    const int r = order[static_cast<std::size_t>(i)];
    if (i >= counts[0]) out.variant[r] = i < counts[0] + counts[1] ? Variant::Adversarial : Variant::Gaussian;
  }
  const std::size_t per = x.size() / static_cast<std::size_t>(B);

  if (counts[1] > 0 && cfg.epsilon > 0.0) {
    const Tensor<T> g = grad_fn(x);
    require(g.rank() == 4 && g.batch() == B, "robust_batch: gradient must be batched like the input");
    const std::size_t gper = g.size() / static_cast<std::size_t>(B);
    if (cfg.fgsm_space == FgsmSpace::Input) {
      require(g.dims() == x.dims(), "robust_batch: input gradient shape");
      const Tensor<T> adv = fgsm_step(x, g, cfg.epsilon);
      for (int r = 0; r < B; ++r)
        if (out.variant[r] == Variant::Adversarial)
          std::copy_n(adv.data().begin() + r * per, per, out.images.data().begin() + r * per);
    } else {
      Tensor<T> off(g.dims(), T(0));
      for (int r = 0; r < B; ++r)
        if (out.variant[r] == Variant::Adversarial)
          for (std::size_t i = r * gper; i < (r + 1) * gper; ++i) {
            if (!std::isfinite(g[i])) throw DomainError("fgsm: non-finite gradient");
            off[i] = static_cast<T>(cfg.epsilon) * detail::sign(g[i]);
          }
      out.feature_offset = std::move(off);
    }
  }
  if (counts[2] > 0 && cfg.sigma > 0.0) {
    const Tensor<T> noisy = gaussian_corrupt(x, cfg.sigma, derive_seed(seed, 1));
    for (int r = 0; r < B; ++r)
      if (out.variant[r] == Variant::Gaussian)
        std::copy_n(noisy.data().begin() + r * per, per, out.images.data().begin() + r * per);
  }
  return out;
}

}  // namespace anrot
