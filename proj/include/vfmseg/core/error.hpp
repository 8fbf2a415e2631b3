// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace vfmseg {

/// Process exit codes used by the CLI. Library code throws the typed
/// exceptions below; the CLI maps them to these codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitInternal = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
};

/// Invalid configuration: bad hyperparameters, incompatible shapes declared
/// in a config file, unknown keys, impossible augmentation settings.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Broken or inconsistent input data: missing rasters, label/image mismatch,
/// out-of-range class ids.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite values surfaced during optimization.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Programming-contract violation between modules (mismatched shapes or
/// teacher sets passed between internal calls). Not expected in correct use.
struct ContractViolation : std::logic_error {
  explicit ContractViolation(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace vfmseg
