#pragma once

// Plain-text key/value run configuration. File syntax:
//   [section]
//   key = value        # comment
// Keys are addressed as "section.key". Command-line overrides use the same
// dotted form. Every key read through a getter is recorded with its resolved
// value, so dump() yields the complete effective configuration.

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace ots {

class Config {
 public:
  Config() = default;

  static Config from_file(const std::string& path);
  void apply_override(const std::string& dotted_key, const std::string& value);
  void parse_override(const std::string& keyval);  // "section.key=value"

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& def);
  int get_int(const std::string& key, int def);
  double get_double(const std::string& key, double def);
  bool get_bool(const std::string& key, bool def);
  std::vector<double> get_doubles(const std::string& key, std::vector<double> def);
  std::vector<int> get_ints(const std::string& key, std::vector<int> def);

  // Effective configuration, suitable for re-parsing.
  std::string dump() const;
  void save(const std::string& path) const;

 private:
  std::string resolve(const std::string& key, const std::string& def);
  std::map<std::string, std::string> values_;
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ots
