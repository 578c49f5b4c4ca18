#include "ots/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ots {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

Config Config::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  Config cfg;
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
    cfg.values_[section.empty() ? key : section + "." + key] = val;
  }
  return cfg;
}

void Config::apply_override(const std::string& key, const std::string& value) {
  values_[key] = value;
}

void Config::parse_override(const std::string& keyval) {
  size_t eq = keyval.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must be section.key=value, got: " + keyval);
  apply_override(trim(keyval.substr(0, eq)), trim(keyval.substr(eq + 1)));
}

std::string Config::resolve(const std::string& key, const std::string& def) {
  auto it = values_.find(key);
  if (it == values_.end()) {
    values_[key] = def;
    return def;
  }
  return it->second;
}

std::string Config::get_str(const std::string& key, const std::string& def) {
  return resolve(key, def);
}

int Config::get_int(const std::string& key, int def) {
  std::string v = resolve(key, std::to_string(def));
  try {
    return std::stoi(v);
  } catch (...) {
    throw ConfigError("config key '" + key + "' is not an integer: " + v);
  }
}

double Config::get_double(const std::string& key, double def) {
  std::ostringstream d;
  d << def;
  std::string v = resolve(key, d.str());
  try {
    return std::stod(v);
  } catch (...) {
    throw ConfigError("config key '" + key + "' is not a number: " + v);
  }
}

bool Config::get_bool(const std::string& key, bool def) {
  std::string v = resolve(key, def ? "true" : "false");
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "' is not a boolean: " + v);
}

std::vector<double> Config::get_doubles(const std::string& key, std::vector<double> def) {
  std::ostringstream d;
  for (size_t i = 0; i < def.size(); ++i) d << (i ? "," : "") << def[i];
  std::string v = resolve(key, d.str());
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      out.push_back(std::stod(item));
    } catch (...) {
      throw ConfigError("config key '" + key + "' has a non-numeric element: " + item);
    }
  }
  return out;
}

std::vector<int> Config::get_ints(const std::string& key, std::vector<int> def) {
  std::vector<double> dd(def.begin(), def.end());
  auto v = get_doubles(key, dd);
  return std::vector<int>(v.begin(), v.end());
}

std::string Config::dump() const {
  // group by section for readability
  std::map<std::string, std::map<std::string, std::string>> sections;
  for (const auto& [k, v] : values_) {
    size_t dot = k.find('.');
    if (dot == std::string::npos)
      sections[""][k] = v;
    else
      sections[k.substr(0, dot)][k.substr(dot + 1)] = v;
  }
  std::ostringstream os;
  for (const auto& [sec, kv] : sections) {
    if (!sec.empty()) os << "[" << sec << "]\n";
    for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
    os << "\n";
  }
  return os.str();
}

void Config::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write config snapshot: " + path);
  os << dump();
}

}  // namespace ots
