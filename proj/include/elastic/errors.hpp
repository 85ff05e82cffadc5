// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace elastic {

/// Process exit codes used by the command-line driver.
enum class ExitCode : int {
    kOk = 0,
    kConfig = 2,
    kData = 3,
    kNumerical = 4,
};

class Error : public std::runtime_error {
   public:
    Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ExitCode code() const noexcept { return code_; }

   private:
    ExitCode code_;
};

/// Invalid configuration, submodel bounds or schedule.
class ConfigError : public Error {
   public:
    explicit ConfigError(const std::string& what) : Error(ExitCode::kConfig, what) {}
};

/// Tensor shape disagreement in an operation.
class DimensionError : public Error {
   public:
    explicit DimensionError(const std::string& what) : Error(ExitCode::kConfig, what) {}
};

/// Malformed input files (IDX, checkpoints, CSV) or empty data streams.
class FormatError : public Error {
   public:
    explicit FormatError(const std::string& what) : Error(ExitCode::kData, what) {}
};

/// Non-finite loss or fitness during training.
class NumericalError : public Error {
   public:
    explicit NumericalError(const std::string& what) : Error(ExitCode::kNumerical, what) {}
};

/// Empty candidate sets or fronts in the Pareto search.
class SearchError : public Error {
   public:
    explicit SearchError(const std::string& what) : Error(ExitCode::kData, what) {}
};

}  // namespace elastic
