#pragma once

#include <string>
#include <vector>

#include "desire/errors.hpp"

namespace desire {

/// Process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitIo = 3,
  kExitProtocol = 4,
  kExitNumeric = 5,
};

int exit_code_for(ErrorKind kind);

/// The `desire` command line: gen-data, pretrain, run, ablate.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

/// Worker count from DESIRE_THREADS (default 1).
int worker_threads();

}  // namespace desire
