// SPDX-License-Identifier: Apache-2.0
#pragma once

namespace cbn::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 2,
  kIo = 3,
  kNumeric = 4,
  kArtifact = 5,
};

/// Parses the command line and runs one subcommand; errors are reported on
/// standard error and mapped to an exit code.
int run(int argc, const char* const* argv);

}  // namespace cbn::cli
