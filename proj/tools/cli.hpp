#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "pixeldino/gradcheck.hpp"

namespace pixeldino::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

int cmd_generate(const std::filesystem::path& config_path, const std::filesystem::path& out_dir, std::ostream& out);
int cmd_train(const std::filesystem::path& config_path, const std::filesystem::path& out_dir, bool resume,
              std::ostream& out);
// Writes a results CSV to out_path (if non-empty) and a table to `out`.
// `dump_path` receives one line per grid patch: tile,x0,y0,size,pred,truth
// with pred/truth as row-major strings of '0'/'1'.
int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& store,
             const std::filesystem::path& out_path, const std::filesystem::path& dump_path, std::ostream& out);
// `extra` is appended to the standard suite.
int cmd_gradcheck(uint64_t seed, std::ostream& out, const std::vector<GradcheckProblem>& extra = {});

// Parses argv and dispatches. Errors are reported on `err`; the return value
// is the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace pixeldino::cli
