#pragma once

#include <string>
#include <vector>

namespace oet {

// Entry point behind the `oet` binary; args exclude argv[0].
// Exit codes: 0 success, 1 runtime failure, 2 config/usage error.
int run_command(const std::vector<std::string>& args);

}  // namespace oet
