#pragma once

#include <stdexcept>
#include <string>

namespace dwmlab {

/// Base class for every recoverable failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or arguments supplied by the user.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A required input file (dataset, checkpoint, config) does not exist.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss, diverging rollout, degenerate statistics.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Malformed on-disk artifact. The kind distinguishes the failure mode so
/// callers (and tests) can tell a stale file from a corrupted one.
class FormatError : public Error {
 public:
  enum class Kind { bad_magic, version_mismatch, truncated, count_mismatch, checksum_mismatch, malformed_header };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace dwmlab
