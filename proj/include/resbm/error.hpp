#pragma once

#include <stdexcept>
#include <string>

namespace resbm {

/// Base of every error thrown by the library. The CLI maps subclasses to
/// process exit codes (see tools/resbm.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller violated an operation's precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Bad input data (token ids, corpus files, checkpoints).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration (run configs, selectors, scenarios, routing tables).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A parameter was sent to an optimizer that cannot handle it.
class RoutingError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

}  // namespace resbm
