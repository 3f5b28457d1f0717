#pragma once

// Command-line front end. Every verb resolves its configuration as
// defaults <- config file <- flags, writes its outputs plus manifest.json into
// --out-dir, and can be replayed with `vfm <verb> --config manifest.json`.

#include <string>
#include <vector>

namespace vfm::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kNumericFailure = 3,
  kThresholdFailure = 4,
};

/// Runs the CLI with argv-style arguments (args[0] is the program name).
int run(const std::vector<std::string>& args);

}  // namespace vfm::cli
