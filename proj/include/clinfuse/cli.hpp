#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace clinfuse {

/// Entry point behind the `clinfuse` binary. `args` excludes the program
/// name. Returns 0 on success, 1 for usage or configuration errors and 2
/// for failures while running.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace clinfuse
