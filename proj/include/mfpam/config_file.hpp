#pragma once

#include <charconv>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mfpam/tensor.hpp"

namespace mfpam {

/// Sectioned `key = value` text. Lines starting with '#' or ';' are
/// comments. Readers consume keys through the typed getters; any key left
/// unread is reported by `reject_unknown`.
class KeyValueFile {
 public:
  static KeyValueFile parse(const std::string& text, const std::string& origin = "config") {
    KeyValueFile f;
    std::istringstream in(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::string t = trim(line);
      if (t.empty() || t[0] == '#' || t[0] == ';') continue;
      const std::string where = origin + ":" + std::to_string(lineno) + ": ";
      if (t.front() == '[') {
        if (t.back() != ']') throw FormatError(where + "unterminated section header");
        section = trim(t.substr(1, t.size() - 2));
        f.sections_[section];
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw FormatError(where + "expected key = value");
      const std::string key = trim(t.substr(0, eq));
      if (key.empty()) throw FormatError(where + "empty key");
      auto& sec = f.sections_[section];
      if (sec.count(key)) throw FormatError(where + "duplicate key '" + key + "'");
      sec[key] = trim(t.substr(eq + 1));
    }
    return f;
  }

  bool has_section(const std::string& s) const { return sections_.count(s) > 0; }
  bool has(const std::string& s, const std::string& k) const {
    auto it = sections_.find(s);
    return it != sections_.end() && it->second.count(k);
  }

  void set(const std::string& s, const std::string& k, std::string v) {
    sections_[s][k] = std::move(v);
  }

  std::string get_string(const std::string& s, const std::string& k, std::string fallback) {
    if (!has(s, k)) return fallback;
    used_.insert({s, k});
    return sections_[s][k];
  }

  double get_double(const std::string& s, const std::string& k, double fallback) {
    if (!has(s, k)) return fallback;
    return parse_double(s, k, get_string(s, k, ""));
  }

  std::size_t get_size(const std::string& s, const std::string& k, std::size_t fallback) {
    if (!has(s, k)) return fallback;
    return std::size_t(parse_uint(s, k, get_string(s, k, "")));
  }

  std::uint64_t get_u64(const std::string& s, const std::string& k, std::uint64_t fallback) {
    if (!has(s, k)) return fallback;
    return parse_uint(s, k, get_string(s, k, ""));
  }

  bool get_bool(const std::string& s, const std::string& k, bool fallback) {
    if (!has(s, k)) return fallback;
    const auto v = get_string(s, k, "");
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw FormatError("[" + s + "] " + k + ": expected boolean, got '" + v + "'");
  }

  std::vector<double> get_doubles(const std::string& s, const std::string& k,
                                  std::vector<double> fallback) {
    if (!has(s, k)) return fallback;
    std::vector<double> out;
    for (const auto& item : split(get_string(s, k, ""))) out.push_back(parse_double(s, k, item));
    return out;
  }

  std::vector<std::size_t> get_sizes(const std::string& s, const std::string& k,
                                     std::vector<std::size_t> fallback) {
    if (!has(s, k)) return fallback;
    std::vector<std::size_t> out;
    for (const auto& item : split(get_string(s, k, "")))
      out.push_back(std::size_t(parse_uint(s, k, item)));
    return out;
  }

  std::vector<std::string> get_strings(const std::string& s, const std::string& k,
                                       std::vector<std::string> fallback) {
    if (!has(s, k)) return fallback;
    return split(get_string(s, k, ""));
  }

  /// Throws for any key in `allowed_sections` (or any section when empty)
  /// that no getter consumed, and for sections outside the allowed set.
  void reject_unknown(const std::set<std::string>& allowed_sections) const {
    for (const auto& [sec, kv] : sections_) {
      if (!allowed_sections.count(sec))
        throw FormatError("unknown config section [" + sec + "]");
      for (const auto& [k, v] : kv)
        if (!used_.count({sec, k}))
          throw FormatError("unknown config key '" + k + "' in [" + sec + "]");
    }
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

  static std::vector<std::string> split(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) {
      auto t = trim(cur);
      if (!t.empty()) out.push_back(t);
    }
    return out;
  }

 private:
  static double parse_double(const std::string& s, const std::string& k, const std::string& v) {
    try {
      std::size_t pos = 0;
      const double d = std::stod(v, &pos);
      if (pos == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw FormatError("[" + s + "] " + k + ": expected number, got '" + v + "'");
  }

  static std::uint64_t parse_uint(const std::string& s, const std::string& k,
                                  const std::string& v) {
    std::uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw FormatError("[" + s + "] " + k + ": expected non-negative integer, got '" + v + "'");
    return out;
  }

  std::map<std::string, std::map<std::string, std::string>> sections_;
  std::set<std::pair<std::string, std::string>> used_;
};

}  // namespace mfpam
