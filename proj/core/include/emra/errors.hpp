#pragma once

#include <stdexcept>
#include <string>

namespace emra {

// Error taxonomy shared by the whole library. The CLI maps kinds to exit
// codes, tests match on kinds instead of message text.
enum class ErrorKind {
  config,     // invalid or inconsistent configuration
  dimension,  // tensor shape mismatch
  data,       // bad user data (labels, pixels, datasets)
  format,     // malformed file (netpbm, checkpoint, config text)
  numeric,    // non-finite values where finite ones are required
  training,   // training loop failures (divergence, bad gradients)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(ErrorKind::config, msg) {}
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error(ErrorKind::dimension, msg) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(ErrorKind::data, msg) {}
};

// What exactly went wrong while decoding a file.
enum class FormatIssue {
  bad_magic,
  bad_version,
  truncated,
  bad_value,
  shape_mismatch,
  bad_checksum,
};

class FormatError : public Error {
 public:
  FormatError(FormatIssue issue, const std::string& msg, long long byte_offset = -1)
      : Error(ErrorKind::format, msg), issue_(issue), byte_offset_(byte_offset) {}
  FormatIssue issue() const { return issue_; }
  long long byte_offset() const { return byte_offset_; }

 private:
  FormatIssue issue_;
  long long byte_offset_;
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(ErrorKind::numeric, msg) {}
};

class TrainingError : public Error {
 public:
  explicit TrainingError(const std::string& msg) : Error(ErrorKind::training, msg) {}
};

}  // namespace emra
