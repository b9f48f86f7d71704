#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace lsttm {

// Runs the command line; args excludes the program name. Returns the exit
// status and never leaves partial output files behind.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lsttm
