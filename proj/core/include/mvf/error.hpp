#pragma once

#include <stdexcept>
#include <string>

namespace mvf {

// Error taxonomy shared by all components. Everything derives from Error so
// the CLI boundary can map the family onto exit codes.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape disagreement between tensors or between data and config.
struct DimensionError : Error {
  using Error::Error;
};

// An argument value is outside its legal range.
struct ParameterError : Error {
  using Error::Error;
};

// A stateful object was driven through an illegal transition.
struct StateError : Error {
  using Error::Error;
};

// API misuse (for example a non-scalar loss passed to backward).
struct UsageError : Error {
  using Error::Error;
};

// Malformed input file; message carries the line number where known.
struct ParseError : Error {
  using Error::Error;
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
  using Error::Error;
};

// A metric has no defined value on this input (e.g. single-class AUROC).
struct MetricUndefinedError : Error {
  using Error::Error;
};

}  // namespace mvf
