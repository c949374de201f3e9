#pragma once

namespace refop::cli {

// Dispatches to the gen / train / eval / sweep-gamma subcommands.
// Returns the process exit code: 0 success, 2 usage error, 3 data error,
// 4 numerical failure.
int run(int argc, const char* const* argv);

}  // namespace refop::cli
