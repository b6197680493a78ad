#pragma once

#include <stdexcept>
#include <string>

namespace anrot {

/// Thrown when a caller breaks a documented precondition (shape, dimension,
/// empty input, unrecorded forward pass).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Numeric value outside the domain of an operation (non-positive variance,
/// non-finite activations, diverged loss).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Configuration or input-file problems that should be reported to a user.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractViolation(what);
}

}  // namespace anrot
