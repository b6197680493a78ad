#pragma once

// Shared helpers for the unit suites: random generators and a central
// finite-difference checker that is independent of the tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "anrot/gauss_metrics.hpp"
#include "anrot/network.hpp"

namespace anrot::test {

inline DiagGaussian random_gaussian(std::mt19937_64& rng, std::size_t d, double mean_scale = 1.0,
                                    double var_lo = 0.2, double var_hi = 3.0) {
  std::normal_distribution<double> n(0.0, mean_scale);
  std::uniform_real_distribution<double> u(var_lo, var_hi);
  std::vector<double> m(d), v(d);
  for (std::size_t i = 0; i < d; ++i) {
    m[i] = n(rng);
    v[i] = u(rng);
  }
  return {m, v};
}

inline Tensor<double> random_tensor(std::mt19937_64& rng, std::vector<int> dims, double lo = -1.0,
                                    double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(dims));
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

inline double rel_error(double analytic, double numeric) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / scale;
}

struct GradReport {
  double max_rel = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

/// Central differences over every entry of every tensor in `params`, compared
/// against `analytic` (same names and shapes). `loss` must be evaluated
/// without any reference to the analytic gradient path.
inline GradReport check_gradients(std::map<std::string, Tensor<double>>& params,
                                  const std::map<std::string, Tensor<double>>& analytic,
                                  const std::function<double()>& loss, double step = 1e-4) {
  GradReport r;
  for (auto& [name, t] : params) {
    const auto& g = analytic.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double keep = t[i];
      t[i] = keep + step;
      const double up = loss();
      t[i] = keep - step;
      const double down = loss();
      t[i] = keep;
      const double numeric = (up - down) / (2.0 * step);
      const double e = rel_error(g[i], numeric);
      ++r.checked;
      if (e > r.max_rel) {
        r.max_rel = e;
        r.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(g[i]) +
                  " numeric=" + std::to_string(numeric);
      }
    }
  }
  return r;
}

using TapeBuild = std::function<ad::Var(ad::Tape<double>&, const std::map<std::string, ad::Var>&)>;

/// Analytic gradients of `build` (scalar output) via the tape, checked by
/// central differences of forward-only evaluations.
inline GradReport check_tape(std::map<std::string, Tensor<double>> params, const TapeBuild& build,
                             double step = 1e-4) {
  std::map<std::string, Tensor<double>> analytic;
  {
    ad::Tape<double> t;
    std::map<std::string, ad::Var> vars;
    for (const auto& [k, v] : params) vars.emplace(k, t.variable(v));
    ad::Var loss = build(t, vars);
    t.backward(loss);
    for (const auto& [k, v] : vars) analytic.emplace(k, t.grad(v));
  }
  auto forward = [&] {
    ad::Tape<double> t;
    std::map<std::string, ad::Var> vars;
    for (const auto& [k, v] : params) vars.emplace(k, t.constant(v));
    return t.value(build(t, vars))[0];
  };
  return check_gradients(params, analytic, forward, step);
}

/// Reduce any tensor to a scalar through fixed random weights.
inline ad::Var project(ad::Tape<double>& t, ad::Var y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  auto w = random_tensor(rng, t.value(y).dims());
  return ad::sum(t, ad::mul(t, y, t.constant(w)));
}

/// Micro architecture used by the gradient suites (a few thousand params).
inline Architecture micro_arch(bool attention = true, int latent = 4, int hw = 8) {
  Architecture a;
  a.in_channels = 1;
  a.height = hw;
  a.width = hw;
  a.widths = {4, 8};
  a.attention_after = attention ? std::vector<int>{1, 2} : std::vector<int>{};
  a.reduction = 2;
  a.latent_dim = latent;
  a.spatial_kernel = 3;
  return a;
}

}  // namespace anrot::test
