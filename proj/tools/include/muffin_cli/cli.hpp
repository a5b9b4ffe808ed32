#pragma once

// The `muffin` command line: gen, train, eval, tune, ablate and plot.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "muffin/synthetic.hpp"

namespace muffin::cli {

enum ExitCode : int { kOk = 0, kValidationError = 1, kRuntimeError = 2 };

/// `args[0]` is the program name, as in argv.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

corpus::SyntheticConfig parse_synthetic_config(const std::string& json_text);
std::string synthetic_config_json(const corpus::SyntheticConfig& config);

std::string sha256_hex(std::string_view bytes);
/// Digest over every regular file below `path` (or of the file itself), keyed by relative path.
std::string sha256_path(const std::filesystem::path& path);

/// Worker count from MUFFIN_THREADS; 1 when unset.
std::size_t thread_budget();

}  // namespace muffin::cli
