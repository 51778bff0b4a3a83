#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

namespace segcal::cli {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitInternal = 3 };

// Runs one command line; `args` excludes the program name. Diagnostics are one
// line on `err`: "segcal: error[<kind>]: <message>".
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

std::string usage_text();

struct CasePaths {
  std::filesystem::path first;   // probabilities or logits
  std::filesystem::path second;  // labels
};

// LISTFILE: one "first,second" pair per line; blank lines and '#' comments are
// skipped; relative paths are taken from the list file's directory.
std::vector<CasePaths> read_list_file(const std::filesystem::path& path);

}  // namespace segcal::cli
