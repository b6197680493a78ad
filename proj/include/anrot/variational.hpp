#pragma once

// Reparameterized sampling and the prior penalties that regularize a
// posterior toward N(0, I).

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "anrot/errors.hpp"
#include "anrot/gauss_metrics.hpp"

namespace anrot {

struct LatentSample {
  std::vector<double> z;
  DiagGaussian source;
  std::vector<double> noise;
};

/// z = mean + sqrt(var) * noise.
inline LatentSample reparameterize(const DiagGaussian& q, std::span<const double> noise) {
  require(noise.size() == q.dim(), "reparameterize: noise dimension " +
                                       std::to_string(noise.size()) + " != " +
                                       std::to_string(q.dim()));
  std::vector<double> z(q.dim());
  for (std::size_t i = 0; i < q.dim(); ++i) z[i] = q.mean()[i] + std::sqrt(q.var()[i]) * noise[i];
  return {std::move(z), q, std::vector<double>(noise.begin(), noise.end())};
}

/// Gradient with respect to the source (mean, var), given dL/dz.
struct MomentGrad {
  std::vector<double> d_mean;
  std::vector<double> d_var;
};

inline MomentGrad reparameterize_backward(const LatentSample& s, std::span<const double> dz) {
  require(dz.size() == s.z.size(), "reparameterize_backward: gradient dimension mismatch");
  MomentGrad g{std::vector<double>(dz.begin(), dz.end()), std::vector<double>(dz.size())};
  // dz/dsigma = noise; dsigma/dvar = 1 / (2 sigma)
  for (std::size_t i = 0; i < dz.size(); ++i)
    g.d_var[i] = dz[i] * s.noise[i] / (2.0 * std::sqrt(s.source.var()[i]));
  return g;
}

enum class PenaltyType { HellingerELBO, KL_ELBO, WassersteinELBO };

struct PenaltyKind {
  PenaltyType kind = PenaltyType::HellingerELBO;
  double lambda = 1.0;  // only scales the Wasserstein penalty

  PenaltyKind() = default;
  PenaltyKind(PenaltyType k, double l = 1.0) : kind(k), lambda(l) {
    if (!(l >= 0.0)) throw DomainError("penalty lambda must be >= 0");
  }
};

struct PenaltyValue {
  double value = 0.0;
  bool saturated = false;
};

/// -ln((1 - D_H^2)^2) against N(0, I). Evaluated as -2 ln BC so values near
/// the prior keep full precision.
inline PenaltyValue hellinger_elbo_penalty(const DiagGaussian& q) {
  const double log_bc = log_bhattacharyya_coeff(q, DiagGaussian::standard(q.dim()));
  if (std::exp(log_bc) <= 0.0) return {std::numeric_limits<double>::infinity(), true};
  return {std::max(0.0, -2.0 * log_bc), false};
}

inline double kl_elbo_penalty(const DiagGaussian& q) {
  return kl_gaussian(q, DiagGaussian::standard(q.dim()));
}

inline double wasserstein_elbo_penalty(const DiagGaussian& q, double lambda) {
  if (!(lambda >= 0.0)) throw DomainError("wasserstein penalty lambda must be >= 0");
  return lambda * wasserstein2_sq(q, DiagGaussian::standard(q.dim()));
}

inline PenaltyValue penalty(const DiagGaussian& q, const PenaltyKind& kind) {
  switch (kind.kind) {
    case PenaltyType::HellingerELBO: return hellinger_elbo_penalty(q);
    case PenaltyType::KL_ELBO: return {kl_elbo_penalty(q), false};
    case PenaltyType::WassersteinELBO: return {wasserstein_elbo_penalty(q, kind.lambda), false};
  }
  throw ContractViolation("unknown penalty kind");
}

namespace detail {

// Per-dimension penalty value and its partials in (mean, var); shared by the
// value-level API above and the autograd op.
struct PenaltyTerm {
  double value, d_mean, d_var;
};

inline PenaltyTerm penalty_term(PenaltyType kind, double lambda, double m, double v) {
  switch (kind) {
    case PenaltyType::HellingerELBO: {
      const double s = 0.5 * (v + 1.0);
      const double log_bc = 0.25 * std::log(v) - 0.5 * std::log(s) - 0.125 * m * m / s;
      return {-2.0 * log_bc, m / (2.0 * s),
              -2.0 * (0.25 / v - 0.25 / s + m * m / (16.0 * s * s))};
    }
    case PenaltyType::KL_ELBO:
      return {0.5 * (-std::log(v) + v + m * m - 1.0), m, 0.5 * (1.0 - 1.0 / v)};
    case PenaltyType::WassersteinELBO: {
      const double sd = std::sqrt(v);
      return {lambda * (m * m + (sd - 1.0) * (sd - 1.0)), 2.0 * lambda * m,
              lambda * (sd - 1.0) / sd};
    }
  }
  throw ContractViolation("unknown penalty kind");
}

}  // namespace detail

/// Analytic gradient of penalty(q, kind) with respect to (mean, var).
inline MomentGrad penalty_gradient(const DiagGaussian& q, const PenaltyKind& kind) {
  MomentGrad g{std::vector<double>(q.dim()), std::vector<double>(q.dim())};
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const auto t = detail::penalty_term(kind.kind, kind.lambda, q.mean()[i], q.var()[i]);
    g.d_mean[i] = t.d_mean;
    g.d_var[i] = t.d_var;
  }
  return g;
}

inline PenaltyType parse_penalty_type(std::string_view name) {
  if (name == "hellinger") return PenaltyType::HellingerELBO;
  if (name == "kl") return PenaltyType::KL_ELBO;
  if (name == "wasserstein") return PenaltyType::WassersteinELBO;
  throw ConfigError("unknown penalty '" + std::string(name) +
                    "' (expected hellinger, kl, wasserstein)");
}

inline std::string_view to_string(PenaltyType t) {
  switch (t) {
    case PenaltyType::HellingerELBO: return "hellinger";
    case PenaltyType::KL_ELBO: return "kl";
    case PenaltyType::WassersteinELBO: return "wasserstein";
  }
  return "?";
}

}  // namespace anrot
