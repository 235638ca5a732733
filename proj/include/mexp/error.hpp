#pragma once

#include <stdexcept>
#include <string>

namespace mexp {

// Exit codes shared by every CLI subcommand.
enum class ExitCode : int {
  ok = 0,
  usage = 1,
  data = 2,
  divergence = 3,
};

/// Argument outside an operation's mathematical domain (e.g. modulus 0).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// multiplicative_order on a non-unit residue.
class UndefinedOrderError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Malformed, missing or inconsistent input files and tensors.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or arguments supplied by the caller.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Loss became NaN or infinite during training.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace mexp
