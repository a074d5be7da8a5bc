#pragma once

#include <stdexcept>
#include <string>

namespace tagcot {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape/size mismatch in tensor or graph operations.
struct DimensionError : Error {
  using Error::Error;
};

// Invalid configuration value, unknown relation, schema violation.
struct ConfigError : Error {
  using Error::Error;
};

// API precondition violated (non-scalar loss, mutation after freeze, ...).
struct ContractError : Error {
  using Error::Error;
};

// Missing, stale, or corrupt artifact file.
struct ArtifactError : Error {
  using Error::Error;
};

// Training diverged (NaN loss) or numeric domain violated.
struct NumericalError : Error {
  using Error::Error;
};

// Tape byte budget exceeded; boundary signal for the max-batch search.
struct BatchMemoryError : Error {
  using Error::Error;
};

}  // namespace tagcot
