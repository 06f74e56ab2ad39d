// Error taxonomy shared by all mvsl modules. Each family maps onto one CLI
// exit code so failures stay diagnosable from scripts (see tools/).
#pragma once

#include <stdexcept>
#include <string>

namespace mvsl {

// Invalid static configuration: bad dimensions, hyperparameters, flag values.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed runtime inputs: shape mismatches, out-of-range labels, ragged data.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Numeric degeneracy: zero-norm rows, non-finite values where finite required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem / serialization problems (missing files, parse failures, short reads).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Artifact produced under a different configuration than the one in use
// (checkpoint fingerprint mismatches, shape-incompatible datasets).
struct IncompatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mvsl
