#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mea::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kDataError = 3 };

/// Runs one mea-lab invocation. `args` excludes the program name. Machine
/// output goes to `out`, human logs to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Parallelism cap from MEA_LAB_THREADS, else the number of logical cores.
std::size_t thread_cap();

}  // namespace mea::cli
