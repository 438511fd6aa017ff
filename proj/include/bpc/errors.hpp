#pragma once

#include <stdexcept>
#include <string>

namespace bpc {

// Error taxonomy. Each class carries a stable process exit code so the CLI
// can map failures deterministically:
//   2 config/usage, 3 file format or I/O, 4 numeric failure,
//   5 contract/dimension violation, 6 insufficient data.
class Error : public std::runtime_error {
 public:
  Error(std::string msg, int exit_code)
      : std::runtime_error(std::move(msg)), exit_code_(exit_code) {}
  int exit_code() const { return exit_code_; }

 private:
  int exit_code_;
};

// Operand shapes incompatible with an op; message names the op.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& msg) : Error(msg, 5) {}
};

// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error(msg, 5) {}
};

// Non-finite value produced where finiteness is required.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& msg) : Error(msg, 4) {}
};

// Bad magic, bad version, malformed payload.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg, 3) {}
};

// Truncated file or header/payload disagreement.
class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& msg) : Error(msg, 3) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg, 3) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg, 2) {}
};

// Requested operation is undefined for the model family.
class UnsupportedModelError : public Error {
 public:
  explicit UnsupportedModelError(const std::string& msg) : Error(msg, 5) {}
};

// Fewer data points than the operation needs.
class InsufficientDataError : public Error {
 public:
  explicit InsufficientDataError(const std::string& msg) : Error(msg, 6) {}
};

// Index or epoch range outside a buffer; message names the buffer.
class BoundsError : public Error {
 public:
  explicit BoundsError(const std::string& msg) : Error(msg, 5) {}
};

// Trajectory segment with coincident endpoints; callers may resample.
class DegenerateSegmentError : public Error {
 public:
  explicit DegenerateSegmentError(const std::string& msg) : Error(msg, 4) {}
};

// Requested metric is undefined for the model family.
class UnsupportedMetricError : public Error {
 public:
  explicit UnsupportedMetricError(const std::string& msg) : Error(msg, 5) {}
};

}  // namespace bpc
