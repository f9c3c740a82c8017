#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fpvt {

// Exit codes shared by every subcommand.
enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitUsage = 2 };

// Entry point of the `fpvt` tool: train, eval, audit, gradcheck, bench.
// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fpvt
