#pragma once

#include <stdexcept>
#include <string>

namespace condense {

/// Process exit codes of the command-line tool.
enum class ExitCode : int { success = 0, usage = 1, data = 2, verification = 3 };

/// Bad or missing input data (corpus, trace, checkpoint, report files).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or command-line usage.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace condense
