#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "advdet/trainer.hpp"

namespace advdet::cli {

inline constexpr int kConfigVersion = 1;

// Flat `key=value` settings, one per line, `#` starts a comment. The file
// must declare `version=1`. Every read is recorded so that keys no command
// asked for can be rejected and the effective configuration (defaults
// included) can be written to the run manifest.
class Config {
 public:
  static Config parse(std::string_view text, const std::string& origin = "config");
  static Config load(const std::filesystem::path& path);

  // Adds or replaces a value, e.g. from a command-line override.
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string text(const std::string& key) const;
  std::string text_or(const std::string& key, const std::string& fallback) const;
  double real(const std::string& key) const;
  double real_or(const std::string& key, double fallback) const;
  std::size_t count(const std::string& key) const;
  std::size_t count_or(const std::string& key, std::size_t fallback) const;
  std::uint64_t u64_or(const std::string& key, std::uint64_t fallback) const;
  bool flag_or(const std::string& key, bool fallback) const;
  std::optional<double> optional_real(const std::string& key) const;
  std::optional<std::size_t> optional_count(const std::string& key) const;
  // Comma-separated sizes, e.g. `8,16`; an empty value is an empty list.
  std::vector<std::size_t> sizes_or(const std::string& key,
                                    const std::vector<std::size_t>& fallback) const;
  // `epoch:value` pairs, e.g. `0:0.1,50:0.01`.
  Schedule schedule_or(const std::string& key, const Schedule& fallback) const;
  // The value must name an existing file or directory.
  std::filesystem::path existing_path(const std::string& key) const;

  // Throws ConfigError listing every key that was never read.
  void reject_unread(const std::string& command) const;

  // Every key read so far with its effective value.
  const std::map<std::string, std::string>& resolved() const { return resolved_; }

 private:
  std::optional<std::string> lookup(const std::string& key) const;
  void record(const std::string& key, const std::string& value) const;

  std::map<std::string, std::string> values_;
  mutable std::set<std::string> read_;
  mutable std::map<std::string, std::string> resolved_;
};

std::string format_real(double v);
std::string format_schedule(const Schedule& s);
std::string format_sizes(const std::vector<std::size_t>& v);

}  // namespace advdet::cli
