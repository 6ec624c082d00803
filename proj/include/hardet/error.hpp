#pragma once

#include <stdexcept>
#include <string>

namespace hardet {

// Bad input: malformed config, out-of-range argument, broken invariant.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Numerical breakdown: overflow, divergence, failed gradient oracle.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}

}  // namespace detail
}  // namespace hardet
