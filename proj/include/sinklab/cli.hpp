#pragma once

// Command-line front end. Subcommands: census, outro, bench, ablate, zerok,
// correlate, rerun. Exit codes: 0 success, 2 usage or config, 3 schema,
// 4 numeric failure.

#include <iosfwd>
#include <string>
#include <vector>

namespace sinklab {

inline constexpr const char* kToolVersion = "0.1.0";

// args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run_cli(int argc, const char* const* argv);

}  // namespace sinklab
