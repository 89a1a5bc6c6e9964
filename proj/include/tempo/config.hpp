#pragma once

#include <map>
#include <string>
#include <vector>

namespace tempo {

// Flat key=value configuration file. '#' starts a comment; blank lines are
// ignored; keys are dotted lowercase ("train.epochs"). Typed getters fall
// back to defaults when the key is absent and reject malformed values.
class Config {
 public:
  Config() = default;
  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text, const std::string& origin = "<string>");

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::string get_str(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  long get_int(const std::string& key, long fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<long> get_int_list(const std::string& key,
                                 const std::vector<long>& fallback) const;

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  std::string origin_;
};

}  // namespace tempo
