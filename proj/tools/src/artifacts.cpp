#include "artifacts.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <memory>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "advdet/errors.hpp"

namespace advdet::cli {

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot read " + path.string() + " for hashing");
  const std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(),
                                                                    &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("SHA-256 initialisation failed");
  }
  std::array<char, 1 << 16> buf;
  while (is) {
    is.read(buf.data(), buf.size());
    if (is.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<size_t>(is.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest;
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest.data(), &len);
  std::string hex;
  char byte[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(byte, sizeof byte, "%02x", digest[i]);
    hex += byte;
  }
  return hex;
}

void write_atomically(const std::filesystem::path& path,
                      const std::function<void(const std::filesystem::path&)>& writer) {
  std::filesystem::path tmp = path;
  tmp += ".partial";
  try {
    writer(tmp);
    std::filesystem::rename(tmp, path);
  } catch (...) {
    std::error_code ignored;
    std::filesystem::remove(tmp, ignored);
    throw;
  }
}

void write_text_atomically(const std::filesystem::path& path, const std::string& text) {
  write_atomically(path, [&](const std::filesystem::path& tmp) {
    std::ofstream os(tmp, std::ios::binary);
    os << text;
    if (!os.flush()) throw FormatError("cannot write " + tmp.string());
  });
}

std::filesystem::path write_run_manifest(const std::filesystem::path& out,
                                         const RunManifest& m) {
  nlohmann::json outputs = nlohmann::json::object();
  for (const auto& p : m.outputs) {
    outputs[p.filename().string()] = {{"path", p.string()}, {"sha256", sha256_file(p)}};
  }
  nlohmann::json inputs = nlohmann::json::array();
  for (const auto& p : m.inputs) inputs.push_back(p.string());
  const nlohmann::json j = {{"command", m.command},
                            {"config", m.config},
                            {"seed", m.seed},
                            {"inputs", inputs},
                            {"outputs", outputs},
                            {"wall_clock_seconds", m.wall_clock_seconds}};
  const auto path = out / (m.command + ".manifest.json");
  write_text_atomically(path, j.dump(2) + "\n");
  return path;
}

}  // namespace advdet::cli
