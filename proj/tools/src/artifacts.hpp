#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace advdet::cli {

// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

// Writes through `writer` into a sibling temporary file, then renames it
// over `path`, so readers never observe a partial file.
void write_atomically(const std::filesystem::path& path,
                      const std::function<void(const std::filesystem::path&)>& writer);
void write_text_atomically(const std::filesystem::path& path, const std::string& text);

struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
  double wall_clock_seconds = 0.0;
};

// JSON with the output files' SHA-256 hashes, written atomically to
// <out>/<command>.manifest.json. Returns that path.
std::filesystem::path write_run_manifest(const std::filesystem::path& out,
                                         const RunManifest& manifest);

}  // namespace advdet::cli
