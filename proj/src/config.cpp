#include "tempo/config.hpp"

#include <fstream>
#include <sstream>

#include "tempo/error.hpp"

namespace tempo {
namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
}

}  // namespace

Config Config::from_file(const std::string& path) {
  std::ifstream f(path);
  TEMPO_CHECK(f.good(), "config: cannot open ", path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_string(ss.str(), path);
}

Config Config::from_string(const std::string& text, const std::string& origin) {
  Config cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    TEMPO_CHECK(eq != std::string::npos, "config: ", origin, ":", lineno,
                ": expected key=value, got '", line, "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    TEMPO_CHECK(!key.empty(), "config: ", origin, ":", lineno, ": empty key");
    cfg.values_[key] = value;
  }
  return cfg;
}

std::string Config::get_str(const std::string& key, const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double Config::get_double(const std::string& key, double fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    TEMPO_CHECK(pos == it->second.size(), "config: key '", key, "' has trailing characters");
    return v;
  } catch (const std::logic_error&) {
    fail("config: key '", key, "' is not a number: '", it->second, "'");
  }
}

long Config::get_int(const std::string& key, long fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  try {
    size_t pos = 0;
    const long v = std::stol(it->second, &pos);
    TEMPO_CHECK(pos == it->second.size(), "config: key '", key, "' has trailing characters");
    return v;
  } catch (const std::logic_error&) {
    fail("config: key '", key, "' is not an integer: '", it->second, "'");
  }
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  const std::string& v = it->second;
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail("config: key '", key, "' is not a boolean: '", v, "'");
}

std::vector<long> Config::get_int_list(const std::string& key,
                                       const std::vector<long>& fallback) const {
  auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::vector<long> out;
  std::istringstream ss(it->second);
  std::string piece;
  while (std::getline(ss, piece, ',')) {
    try {
      out.push_back(std::stol(piece));
    } catch (const std::logic_error&) {
      fail("config: key '", key, "' has a non-integer entry '", piece, "'");
    }
  }
  TEMPO_CHECK(!out.empty(), "config: key '", key, "' is an empty list");
  return out;
}

}  // namespace tempo
