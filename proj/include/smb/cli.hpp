#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace smb::cli {

enum ExitCode : int { ok = 0, usage = 1, data = 2, numerical = 3 };

// Runs one command line (without the program name) and returns its exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace smb::cli
