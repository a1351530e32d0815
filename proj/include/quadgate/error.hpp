#pragma once

#include <stdexcept>
#include <string>

namespace qg {

// Error taxonomy. The CLI maps config/usage problems to exit code 2 and
// numerical failures to exit code 3.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes disagree with an operation's contract.
struct dim_error : error {
  using error::error;
};

// A configuration value is invalid or inconsistent (divisibility, ranges).
struct config_error : error {
  using error::error;
};

// An API precondition was violated by the caller.
struct contract_error : error {
  using error::error;
};

// An object was used before reaching the required state.
struct state_error : error {
  using error::error;
};

// File parsing / serialization problems.
struct io_error : error {
  using error::error;
};

// Non-finite values where finite ones are required.
struct numeric_error : error {
  using error::error;
};

}  // namespace qg
