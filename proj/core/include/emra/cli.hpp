#pragma once

#include <string>
#include <vector>

namespace emra {

// Entry point behind the `emra` binary; exposed so tests can drive the CLI
// in-process. `args` excludes the program name. Exit codes: 0 success,
// 1 usage or configuration error, 2 data/format error, 3 numeric failure.
int cli_main(const std::vector<std::string>& args);

}  // namespace emra
