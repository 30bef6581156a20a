#pragma once

#include <stdexcept>
#include <string>

namespace msimil {

inline constexpr const char* kArtifactVersion = "0.1.0";
inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr int kFeatureFileFormatVersion = 1;
inline constexpr int kResultSchemaVersion = 1;

/// Bad input data or a violated validation contract (CLI exit code 2).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Wrong invocation: bad flag, bad subcommand, bad config key (CLI exit code 1).
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace msimil
