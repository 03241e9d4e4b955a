// Copyright 2026 The fastsep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#ifndef FASTSEP_ERROR_HPP_
#define FASTSEP_ERROR_HPP_

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fastsep {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad argument shapes, out-of-range parameters, malformed requests.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed or unsupported files (WAV, weight bundles, scene manifests).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A linear solve was rejected by the conditioning guard.
class IllConditioned : public Error {
 public:
  IllConditioned(const std::string& what, double rcond)
      : Error(what + " (reciprocal condition estimate " + std::to_string(rcond) + ")"),
        rcond_(rcond) {}

  double rcond() const noexcept { return rcond_; }

 private:
  double rcond_;
};

/// The demixing update failed at a specific frequency bin even after
/// re-regularization.
class SeparationError : public Error {
 public:
  SeparationError(const std::string& what, std::size_t bin)
      : Error(what + " at frequency bin " + std::to_string(bin)), bin_(bin) {}

  std::size_t bin() const noexcept { return bin_; }

 private:
  std::size_t bin_;
};

}  // namespace fastsep

#endif  // FASTSEP_ERROR_HPP_
