#include "config.hpp"

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "advdet/errors.hpp"

namespace advdet::cli {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string part;
  std::istringstream is(s);
  while (std::getline(is, part, sep)) parts.push_back(trim(part));
  return parts;
}

double parse_real(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || errno == ERANGE || !std::isfinite(d)) {
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  }
  return d;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const unsigned long long n = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || v[0] == '-' || *end != '\0' || errno == ERANGE) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return n;
}

}  // namespace

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format_schedule(const Schedule& s) {
  std::string out;
  for (const SchedulePoint& p : s) {
    if (!out.empty()) out += ',';
    out += std::to_string(p.epoch) + ':' + format_real(p.value);
  }
  return out;
}

std::string format_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t n : v) {
    if (!out.empty()) out += ',';
    out += std::to_string(n);
  }
  return out;
}

Config Config::parse(std::string_view text, const std::string& origin) {
  Config c;
  std::istringstream is{std::string(text)};
  std::string line;
  for (std::size_t number = 1; std::getline(is, line); ++number) {
    const std::string body = trim(line.substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = origin + ":" + std::to_string(number);
    if (eq == std::string::npos) throw ConfigError(where + ": expected key=value");
    const std::string key = trim(body.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!c.values_.emplace(key, trim(body.substr(eq + 1))).second) {
      throw ConfigError(where + ": duplicate key " + key);
    }
  }
  const auto version = c.lookup("version");
  if (!version) throw ConfigError(origin + ": missing version=" + std::to_string(kConfigVersion));
  if (*version != std::to_string(kConfigVersion)) {
    throw ConfigError(origin + ": unsupported config version " + *version);
  }
  c.record("version", *version);
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << is.rdbuf();
  return parse(text.str(), path.string());
}

void Config::set(const std::string& key, const std::string& value) { values_[key] = value; }

bool Config::has(const std::string& key) const { return values_.count(key) > 0; }

std::optional<std::string> Config::lookup(const std::string& key) const {
  read_.insert(key);
  const auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

void Config::record(const std::string& key, const std::string& value) const {
  resolved_[key] = value;
}

std::string Config::text(const std::string& key) const {
  const auto v = lookup(key);
  if (!v || v->empty()) throw ConfigError("missing required key " + key);
  record(key, *v);
  return *v;
}

std::string Config::text_or(const std::string& key, const std::string& fallback) const {
  const std::string v = lookup(key).value_or(fallback);
  record(key, v);
  return v;
}

double Config::real(const std::string& key) const { return parse_real(key, text(key)); }

double Config::real_or(const std::string& key, double fallback) const {
  const auto v = lookup(key);
  const double d = v ? parse_real(key, *v) : fallback;
  record(key, format_real(d));
  return d;
}

std::size_t Config::count(const std::string& key) const { return parse_u64(key, text(key)); }

std::size_t Config::count_or(const std::string& key, std::size_t fallback) const {
  return u64_or(key, fallback);
}

std::uint64_t Config::u64_or(const std::string& key, std::uint64_t fallback) const {
  const auto v = lookup(key);
  const std::uint64_t n = v ? parse_u64(key, *v) : fallback;
  record(key, std::to_string(n));
  return n;
}

bool Config::flag_or(const std::string& key, bool fallback) const {
  const auto v = lookup(key);
  bool b = fallback;
  if (v) {
    if (*v == "true") {
      b = true;
    } else if (*v == "false") {
      b = false;
    } else {
      throw ConfigError(key + ": expected true or false, got '" + *v + "'");
    }
  }
  record(key, b ? "true" : "false");
  return b;
}

std::optional<double> Config::optional_real(const std::string& key) const {
  const auto v = lookup(key);
  if (!v || *v == "none") {
    record(key, "none");
    return std::nullopt;
  }
  return real_or(key, 0.0);
}

std::optional<std::size_t> Config::optional_count(const std::string& key) const {
  const auto v = lookup(key);
  if (!v || *v == "none") {
    record(key, "none");
    return std::nullopt;
  }
  return count_or(key, 0);
}

std::vector<std::size_t> Config::sizes_or(const std::string& key,
                                          const std::vector<std::size_t>& fallback) const {
  const auto v = lookup(key);
  std::vector<std::size_t> out = fallback;
  if (v) {
    out.clear();
    if (!v->empty()) {
      for (const std::string& part : split(*v, ',')) out.push_back(parse_u64(key, part));
    }
  }
  record(key, format_sizes(out));
  return out;
}

Schedule Config::schedule_or(const std::string& key, const Schedule& fallback) const {
  const auto v = lookup(key);
  Schedule out = fallback;
  if (v) {
    out.clear();
    for (const std::string& part : split(*v, ',')) {
      const auto colon = part.find(':');
      if (colon == std::string::npos) {
        throw ConfigError(key + ": expected epoch:value pairs, got '" + part + "'");
      }
      out.push_back({parse_u64(key, trim(part.substr(0, colon))),
                     parse_real(key, trim(part.substr(colon + 1)))});
    }
  }
  record(key, format_schedule(out));
  return out;
}

std::filesystem::path Config::existing_path(const std::string& key) const {
  const std::filesystem::path p = text(key);
  if (!std::filesystem::exists(p)) throw ConfigError(key + ": no such file " + p.string());
  return p;
}

void Config::reject_unread(const std::string& command) const {
  std::string unknown;
  for (const auto& [key, value] : values_) {
    if (read_.count(key)) continue;
    if (!unknown.empty()) unknown += ", ";
    unknown += key;
  }
  if (!unknown.empty()) throw ConfigError("unknown keys for " + command + ": " + unknown);
}

}  // namespace advdet::cli
