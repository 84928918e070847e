#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace neuneu {

// Exception hierarchy. The CLI maps each class onto a stable exit code.

struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or out-of-contract input data (bad file, failed validation,
// missing loss file for a checkpoint).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : DataError {
  FormatError(const std::string& what, std::uint64_t offset)
      : DataError(what + " (at byte offset " + std::to_string(offset) + ")"),
        reason(what),
        byte_offset(offset) {}
  std::string reason;
  std::uint64_t byte_offset;
};

// NaN/Inf encountered during training or fitting.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FitError : NumericError {
  FitError(const std::string& what, double best_sse)
      : NumericError(what + " (best residual sse " + std::to_string(best_sse) + ")"),
        best_residual(best_sse) {}
  double best_residual;
};

struct MissingOracle : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace neuneu
