#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace llmembed::cli {

/// Runs one command line. Returns the process exit code; diagnostics go to
/// `err` as a single "llmembed: error[<code>]: <message>" line.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace llmembed::cli
