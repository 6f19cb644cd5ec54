#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace personalize {

// Outcome of one CLI invocation. Exit codes are stable: 0 = success,
// 2 = usage, 3 = data/format, 4 = numerical.
struct CommandResult {
    int exit_code = 0;
    std::vector<std::string> artifacts_written;
    std::vector<std::string> summary;
};

// Dispatches one command; argv starts at the command name, e.g.
// {"train", "--manifest", "data/manifest.json", ...}. Never throws: errors
// land in exit_code plus a summary line.
CommandResult run_command(const std::vector<std::string>& argv);

// Default location for artifacts when --out is omitted; the
// PERSONALIZE_CACHE_DIR environment variable overrides it.
std::filesystem::path artifact_cache_dir();

// main() adapter: runs the command, prints the summary, returns the code.
int cli_main(int argc, char** argv);

}  // namespace personalize
