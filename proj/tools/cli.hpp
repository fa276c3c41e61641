#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace lsc::cli {

/// Runs the lsc command line. Returns the process exit code: 0 success,
/// 1 computation failure, 2 usage or input error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lsc::cli
