#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace affmtl {

// Runs one command line. Exit codes: 0 success, 1 invalid input or
// configuration, 2 runtime failure. Diagnostics go to `err`.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace affmtl
