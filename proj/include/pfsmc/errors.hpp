#pragma once

#include <stdexcept>
#include <string>

namespace pfsmc {

/// User-supplied configuration is invalid (maps to exit code 2).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// A numerical procedure failed beyond recovery: total particle degeneracy,
/// stiffness failure, degenerate covariance (maps to exit code 3).
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

/// File could not be read or written (maps to exit code 4).
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pfsmc
