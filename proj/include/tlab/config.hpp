#pragma once
// Strict INI-style experiment configs: [section] headers, key = value pairs,
// '#' or ';' comments. Strictness lives at two levels: the parser rejects
// malformed lines and duplicate keys, and each consumer declares the keys it
// understands so anything unrecognized fails the run instead of being
// silently ignored. Every getter records the resolved value (default or
// explicit), so a run can write back the exact configuration it used.

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace tlab {

struct config_error : std::runtime_error {
  explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

namespace detail_cfg {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail_cfg

class Config {
 public:
  static Config parse_text(const std::string& text, const std::string& origin = "<string>") {
    Config cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string t = detail_cfg::trim(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      auto fail = [&](const std::string& why) {
        throw config_error(origin + ":" + std::to_string(lineno) + ": " + why);
      };
      if (t.front() == '[') {
        if (t.back() != ']') fail("unterminated section header");
        section = detail_cfg::trim(t.substr(1, t.size() - 2));
        if (section.empty()) fail("empty section name");
        cfg.sections_[section];
        continue;
      }
      std::size_t eq = t.find('=');
      if (eq == std::string::npos) fail("expected key = value");
      std::string key = detail_cfg::trim(t.substr(0, eq));
      std::string val = detail_cfg::trim(t.substr(eq + 1));
      if (key.empty()) fail("empty key");
      if (section.empty()) fail("key outside any [section]");
      auto& sec = cfg.sections_[section];
      if (sec.count(key)) fail("duplicate key '" + key + "'");
      sec[key] = val;
    }
    return cfg;
  }

  static Config parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot open config file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_text(ss.str(), path);
  }

  bool has(const std::string& section, const std::string& key) const {
    auto s = sections_.find(section);
    return s != sections_.end() && s->second.count(key) > 0;
  }

  std::string get_str(const std::string& section, const std::string& key,
                      const std::string& def) const {
    std::string v = has(section, key) ? sections_.at(section).at(key) : def;
    resolved_[section][key] = v;
    return v;
  }

  std::string require_str(const std::string& section, const std::string& key) const {
    if (!has(section, key))
      throw config_error("missing required key [" + section + "] " + key);
    return get_str(section, key, "");
  }

  double get_double(const std::string& section, const std::string& key, double def) const {
    if (!has(section, key)) {
      resolved_[section][key] = format_double(def);
      return def;
    }
    return parse_double(section, key, sections_.at(section).at(key));
  }

  std::int64_t get_int(const std::string& section, const std::string& key,
                       std::int64_t def) const {
    if (!has(section, key)) {
      resolved_[section][key] = std::to_string(def);
      return def;
    }
    const std::string& raw = sections_.at(section).at(key);
    std::size_t pos = 0;
    std::int64_t v = 0;
    try {
      v = std::stoll(raw, &pos);
    } catch (const std::exception&) {
      pos = std::string::npos;
    }
    if (pos != raw.size())
      throw config_error("[" + section + "] " + key + ": not an integer: '" + raw + "'");
    resolved_[section][key] = raw;
    return v;
  }

  bool get_bool(const std::string& section, const std::string& key, bool def) const {
    if (!has(section, key)) {
      resolved_[section][key] = def ? "true" : "false";
      return def;
    }
    const std::string& raw = sections_.at(section).at(key);
    resolved_[section][key] = raw;
    if (raw == "true" || raw == "1" || raw == "yes") return true;
    if (raw == "false" || raw == "0" || raw == "no") return false;
    throw config_error("[" + section + "] " + key + ": not a boolean: '" + raw + "'");
  }

  std::vector<std::int64_t> get_int_list(const std::string& section, const std::string& key,
                                         const std::vector<std::int64_t>& def) const {
    if (!has(section, key)) {
      std::string s;
      for (std::size_t i = 0; i < def.size(); ++i) s += (i ? "," : "") + std::to_string(def[i]);
      resolved_[section][key] = s;
      return def;
    }
    const std::string& raw = sections_.at(section).at(key);
    std::vector<std::int64_t> out;
    std::istringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = detail_cfg::trim(item);
      if (item.empty())
        throw config_error("[" + section + "] " + key + ": empty list element");
      std::size_t pos = 0;
      out.push_back(std::stoll(item, &pos));
      if (pos != item.size())
        throw config_error("[" + section + "] " + key + ": not an integer: '" + item + "'");
    }
    if (out.empty()) throw config_error("[" + section + "] " + key + ": empty list");
    resolved_[section][key] = raw;
    return out;
  }

  // Rejects any section or key the command did not declare. The allowed map
  // is section -> set of keys; a missing section means the whole section is
  // unknown.
  void require_known(const std::map<std::string, std::set<std::string>>& allowed) const {
    for (const auto& [section, keys] : sections_) {
      auto it = allowed.find(section);
      if (it == allowed.end()) throw config_error("unknown config section [" + section + "]");
      for (const auto& [key, val] : keys)
        if (!it->second.count(key))
          throw config_error("unknown config key [" + section + "] " + key);
    }
  }

  // Records an effective value decided outside the file (a command-line
  // override, for example) so the resolved dump reflects the actual run.
  void note(const std::string& section, const std::string& key, const std::string& value) const {
    resolved_[section][key] = value;
  }

  // Canonical dump of every value the run resolved (defaults included),
  // sorted by section and key.
  std::string resolved_dump() const {
    std::ostringstream out;
    for (const auto& [section, keys] : resolved_) {
      out << "[" << section << "]\n";
      for (const auto& [key, val] : keys) out << key << " = " << val << "\n";
      out << "\n";
    }
    return out.str();
  }

  const std::map<std::string, std::map<std::string, std::string>>& sections() const {
    return sections_;
  }

 private:
  static std::string format_double(double v) {
    std::ostringstream ss;
    ss.precision(17);
    ss << v;
    return ss.str();
  }

  double parse_double(const std::string& section, const std::string& key,
                      const std::string& raw) const {
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(raw, &pos);
    } catch (const std::exception&) {
      pos = std::string::npos;
    }
    if (pos != raw.size())
      throw config_error("[" + section + "] " + key + ": not a number: '" + raw + "'");
    resolved_[section][key] = raw;
    return v;
  }

  std::map<std::string, std::map<std::string, std::string>> sections_;
  mutable std::map<std::string, std::map<std::string, std::string>> resolved_;
};

}  // namespace tlab
