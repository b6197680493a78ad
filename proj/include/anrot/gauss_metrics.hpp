#pragma once

// Closed-form distances between diagonal Gaussians, plus a numerical
// estimator of the overlap integral used to cross-check them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "anrot/errors.hpp"
#include "anrot/rng.hpp"

namespace anrot {

/// Gaussian with diagonal covariance. Variances below kVarianceFloor are
/// raised to it; non-positive or non-finite entries are rejected.
class DiagGaussian {
 public:
  static constexpr double kVarianceFloor = 1e-8;

  DiagGaussian(std::vector<double> mean, std::vector<double> var)
      : mean_(std::move(mean)), var_(std::move(var)) {
    require(!mean_.empty(), "DiagGaussian: dimension must be >= 1");
    require(mean_.size() == var_.size(), "DiagGaussian: mean and var dimension differ");
    for (std::size_t i = 0; i < var_.size(); ++i) {
      if (!std::isfinite(mean_[i])) throw DomainError("DiagGaussian: non-finite mean");
      if (!(var_[i] > 0.0) || !std::isfinite(var_[i]))
        throw DomainError("DiagGaussian: variance must be positive and finite");
      var_[i] = std::max(var_[i], kVarianceFloor);
    }
  }

  static DiagGaussian standard(std::size_t dim) {
    return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)};
  }

  std::size_t dim() const { return mean_.size(); }
  std::span<const double> mean() const { return mean_; }
  std::span<const double> var() const { return var_; }

  friend bool operator==(const DiagGaussian&, const DiagGaussian&) = default;

 private:
  std::vector<double> mean_;
  std::vector<double> var_;
};

enum class DistanceKind {
  HellingerSq,
  Hellinger,
  BC,
  Bhattacharyya,
  KL,
  Wasserstein2Sq,
  MahalanobisSq
};

struct DistanceValue {
  double value = 0.0;
  DistanceKind kind = DistanceKind::HellingerSq;
  // Set when the value is a +infinity sentinel (zero overlap).
  bool saturated = false;
};

namespace detail {

inline void check_same_dim(const DiagGaussian& p, const DiagGaussian& q) {
  require(p.dim() == q.dim(), "gaussian dimension mismatch: " + std::to_string(p.dim()) +
                                  " vs " + std::to_string(q.dim()));
}

// Per-dimension log Bhattacharyya coefficient. Symmetric in its arguments
// bit-for-bit: every operation below is commutative in IEEE arithmetic.
inline double log_bc_term(double m1, double v1, double m2, double v2) {
  const double s = 0.5 * (v1 + v2);
  const double dm = m1 - m2;
  return 0.25 * std::log(v1) + 0.25 * std::log(v2) - 0.5 * std::log(s) - 0.125 * (dm * dm) / s;
}

inline double gaussian_pdf(double x, double m, double v) {
  const double d = x - m;
  return std::exp(-0.5 * d * d / v) / std::sqrt(2.0 * std::numbers::pi * v);
}

}  // namespace detail

/// ln BC(p, q) summed over dimensions.
inline double log_bhattacharyya_coeff(const DiagGaussian& p, const DiagGaussian& q) {
  detail::check_same_dim(p, q);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.dim(); ++i)
    acc += detail::log_bc_term(p.mean()[i], p.var()[i], q.mean()[i], q.var()[i]);
  return std::min(acc, 0.0);
}

/// Overlap integral of the two densities, in [0, 1].
inline double bhattacharyya_coeff(const DiagGaussian& p, const DiagGaussian& q) {
  return std::clamp(std::exp(log_bhattacharyya_coeff(p, q)), 0.0, 1.0);
}

/// Squared Hellinger distance 1 - BC, clamped to [0, 1].
inline double hellinger_sq(const DiagGaussian& p, const DiagGaussian& q) {
  return std::clamp(1.0 - bhattacharyya_coeff(p, q), 0.0, 1.0);
}

inline double hellinger(const DiagGaussian& p, const DiagGaussian& q) {
  return std::sqrt(hellinger_sq(p, q));
}

/// Reduced form against N(0, I). Goes through the general closed form so the
/// two are identical by construction.
inline double hellinger_sq_vs_standard(const DiagGaussian& q) {
  return hellinger_sq(q, DiagGaussian::standard(q.dim()));
}

/// -ln BC. Zero overlap (BC underflows) yields +inf with `saturated` set.
inline DistanceValue bhattacharyya_dist(const DiagGaussian& p, const DiagGaussian& q) {
  const double bc = bhattacharyya_coeff(p, q);
  if (bc <= 0.0)
    return {std::numeric_limits<double>::infinity(), DistanceKind::Bhattacharyya, true};
  return {std::max(0.0, -std::log(bc)), DistanceKind::Bhattacharyya, false};
}

/// (mu_p - mu_q)^T Sbar^{-1} (mu_p - mu_q), Sbar = (Sigma_p + Sigma_q) / 2.
inline double mahalanobis_sq(const DiagGaussian& p, const DiagGaussian& q) {
  detail::check_same_dim(p, q);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.dim(); ++i) {
    const double dm = p.mean()[i] - q.mean()[i];
    acc += dm * dm / (0.5 * (p.var()[i] + q.var()[i]));
  }
  return acc;
}

/// Bhattacharyya distance assembled from the Mahalanobis term and the
/// determinant ratio, independent of the overlap route.
inline double bhattacharyya_from_mahalanobis(const DiagGaussian& p, const DiagGaussian& q) {
  detail::check_same_dim(p, q);
  double log_det_avg = 0.0, log_det_p = 0.0, log_det_q = 0.0;
  for (std::size_t i = 0; i < p.dim(); ++i) {
    log_det_avg += std::log(0.5 * (p.var()[i] + q.var()[i]));
    log_det_p += std::log(p.var()[i]);
    log_det_q += std::log(q.var()[i]);
  }
  return 0.125 * mahalanobis_sq(p, q) + 0.5 * (log_det_avg - 0.5 * (log_det_p + log_det_q));
}

/// D_KL(q || p).
inline double kl_gaussian(const DiagGaussian& q, const DiagGaussian& p) {
  detail::check_same_dim(q, p);
  double acc = 0.0;
  for (std::size_t i = 0; i < q.dim(); ++i) {
    const double dm = q.mean()[i] - p.mean()[i];
    acc += std::log(p.var()[i] / q.var()[i]) + (q.var()[i] + dm * dm) / p.var()[i] - 1.0;
  }
  return std::max(0.0, 0.5 * acc);
}

/// Squared 2-Wasserstein distance between diagonal Gaussians.
inline double wasserstein2_sq(const DiagGaussian& p, const DiagGaussian& q) {
  detail::check_same_dim(p, q);
  double acc = 0.0;
  for (std::size_t i = 0; i < p.dim(); ++i) {
    const double dm = p.mean()[i] - q.mean()[i];
    const double ds = std::sqrt(p.var()[i]) - std::sqrt(q.var()[i]);
    acc += dm * dm + ds * ds;
  }
  return acc;
}

inline DistanceValue distance(const DiagGaussian& p, const DiagGaussian& q, DistanceKind kind) {
  switch (kind) {
    case DistanceKind::HellingerSq: return {hellinger_sq(p, q), kind};
    case DistanceKind::Hellinger: return {hellinger(p, q), kind};
    case DistanceKind::BC: return {bhattacharyya_coeff(p, q), kind};
    case DistanceKind::Bhattacharyya: return bhattacharyya_dist(p, q);
    case DistanceKind::KL: return {kl_gaussian(p, q), kind};
    case DistanceKind::Wasserstein2Sq: return {wasserstein2_sq(p, q), kind};
    case DistanceKind::MahalanobisSq: return {mahalanobis_sq(p, q), kind};
  }
  throw ContractViolation("unknown distance kind");
}

inline DistanceKind parse_distance_kind(std::string_view name) {
  if (name == "hellinger_sq") return DistanceKind::HellingerSq;
  if (name == "hellinger") return DistanceKind::Hellinger;
  if (name == "bc") return DistanceKind::BC;
  if (name == "bhattacharyya") return DistanceKind::Bhattacharyya;
  if (name == "kl") return DistanceKind::KL;
  if (name == "wasserstein2_sq") return DistanceKind::Wasserstein2Sq;
  if (name == "mahalanobis_sq") return DistanceKind::MahalanobisSq;
  throw ConfigError("unknown metric '" + std::string(name) +
                    "' (expected hellinger_sq, hellinger, bc, bhattacharyya, kl, "
                    "wasserstein2_sq, mahalanobis_sq)");
}

enum class OracleMethod { Quadrature1D, MonteCarlo };

/// Numerical estimate of the overlap integral. Quadrature1D: trapezoid rule
/// with `budget` nodes over mean +/- 12 std of both densities (d = 1 only).
/// MonteCarlo: E_{x~p} sqrt(q(x)/p(x)) over `budget` draws.
inline double oracle_bc(const DiagGaussian& p, const DiagGaussian& q, OracleMethod method,
                        std::uint64_t budget, std::uint64_t seed = 0) {
  detail::check_same_dim(p, q);
  require(budget > 0, "oracle_bc: budget must be positive");
  if (method == OracleMethod::Quadrature1D) {
    require(p.dim() == 1, "oracle_bc: Quadrature1D needs a 1-D pair");
    require(budget >= 2, "oracle_bc: Quadrature1D needs at least 2 nodes");
    const double mp = p.mean()[0], vp = p.var()[0], mq = q.mean()[0], vq = q.var()[0];
    const double lo = std::min(mp - 12.0 * std::sqrt(vp), mq - 12.0 * std::sqrt(vq));
    const double hi = std::max(mp + 12.0 * std::sqrt(vp), mq + 12.0 * std::sqrt(vq));
    const double h = (hi - lo) / static_cast<double>(budget - 1);
    double acc = 0.0;
    for (std::uint64_t i = 0; i < budget; ++i) {
      const double x = lo + h * static_cast<double>(i);
      const double f =
          std::sqrt(detail::gaussian_pdf(x, mp, vp) * detail::gaussian_pdf(x, mq, vq));
      acc += (i == 0 || i + 1 == budget) ? 0.5 * f : f;
    }
    return acc * h;
  }

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = p.dim();
  std::vector<double> x(d);
  double acc = 0.0;
  for (std::uint64_t n = 0; n < budget; ++n) {
    double log_ratio = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      x[i] = p.mean()[i] + std::sqrt(p.var()[i]) * normal(rng);
      const double dp = x[i] - p.mean()[i], dq = x[i] - q.mean()[i];
      // log q - log p, per dimension
      log_ratio += -0.5 * dq * dq / q.var()[i] + 0.5 * dp * dp / p.var()[i] -
                   0.5 * std::log(q.var()[i] / p.var()[i]);
    }
    acc += std::exp(0.5 * log_ratio);
  }
  return acc / static_cast<double>(budget);
}

}  // namespace anrot
