#pragma once

#include <stdexcept>
#include <string>

namespace gatefuse {

// Precondition violations (bad shapes, out-of-range ids, bad config values)
// are reported with std::invalid_argument. The types below cover the other
// failure classes the CLI maps to distinct exit codes.

/// NaN/Inf encountered during training; aborts the current step.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file contents (bad magic, truncated payload, bad schema).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A statistic is undefined for the given data (all ties, zero variance).
class DegenerateError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// File could not be opened, read or written.
class IoError : public std::runtime_error {
 public:
  IoError(const std::string& what, const std::string& path)
      : std::runtime_error(what + ": " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace gatefuse
