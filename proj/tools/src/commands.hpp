#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace advdet::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;    // config or usage error
inline constexpr int kExitFailure = 3;  // runtime or data failure

struct Invocation {
  std::string command;  // train, attack, evaluate, histogram, calibrate
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;      // overrides `seed`
  std::optional<std::filesystem::path> out;  // overrides `out`
};

const std::vector<std::string>& command_names();

// Runs one command end to end and returns the process exit code. Progress
// goes to `log`, one summary line to `summary`.
int run(const Invocation& invocation, std::ostream& summary, std::ostream& log);

// Data failures that are not file-format problems (e.g. nothing left after
// filtering).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace advdet::cli
