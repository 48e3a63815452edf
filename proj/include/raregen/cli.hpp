#pragma once

#include <string>
#include <vector>

namespace raregen::harness {

// Subcommand dispatcher behind the `raregen` binary. Returns the process exit
// code: 0 success, 1 validation/runtime failure, 2 usage error.
int cli_dispatch(const std::vector<std::string>& args);

}  // namespace raregen::harness
