#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace aescomp {

/// Runs one `aescomp` command. `args` excludes the program name. Results go
/// to `out`; warnings and the single-line `error: <Kind>: <message>` record
/// go to `err`. Returns 0 on success, 2 on a usage error, 1 otherwise.
int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace aescomp
