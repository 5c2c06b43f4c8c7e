#pragma once

#include <stdexcept>
#include <string>

namespace vara {

// Bad shapes, out-of-range hyperparameters, misuse of an API.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Data that cannot be processed (empty waveform, out-of-vocab token id, too-short mel).
class InvalidInput : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent or degenerate configuration (speed stats, checkpoint digest).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed on-disk artifacts. The message always carries the offending path.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(path) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values reached a place where they must not (loss, gradients, finite differences).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace vara
