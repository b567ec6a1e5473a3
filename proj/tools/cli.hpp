#pragma once

#include <iosfwd>

namespace quadprior::cli {

/// Parses arguments, runs one subcommand and returns the exit status: 0 on
/// success, 2 for usage and configuration errors, 1 for any other failure.
/// Artifact paths go to `out`; a failure is one line on `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace quadprior::cli
