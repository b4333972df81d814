#pragma once

#include <exception>
#include <ostream>
#include <string>
#include <vector>

namespace medicat::cli {

enum ExitCode : int {
  kOk = 0,
  kUsage = 1,
  kData = 2,
  kNumeric = 3,
};

// Maps a library exception to the process exit code.
int exit_code_for(const std::exception& e);

int dispatch(int argc, char** argv);
// argv[0] excluded; output goes to the given streams.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace medicat::cli
