#pragma once
// Command-line front end: train, sample, gradcheck, bench, make-toy, eval.

#include <iosfwd>
#include <string>
#include <vector>

namespace mdsq {

// args excludes the program name. Returns the process exit code:
// 0 success, 1 validation, 2 I/O, 3 numeric failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace mdsq
