#pragma once

// TOML-style key/value configuration: `[section]` headers, `key = value`
// lines, `#` comments, double-quoted or bare scalar values. Arrays, inline
// tables and multi-line strings are not supported; they are rejected rather
// than misread. Keys are flattened to "section.key".

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>

#include "trace/error.hpp"

namespace trace::config {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

class KeyValues {
 public:
  static KeyValues parse(std::string_view text, std::string_view origin = "<config>") {
    KeyValues kv;
    std::string section;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
      auto end = text.find('\n', pos);
      if (end == std::string_view::npos) end = text.size();
      std::string_view line = text.substr(pos, end - pos);
      pos = end + 1;
      ++line_no;
      auto fail = [&](const std::string& why) {
        throw CodedError("CONFIG_PARSE", std::string(origin) + ":" + std::to_string(line_no) + ": " + why);
      };
      line = trim(strip_comment(line));
      if (line.empty()) {
        if (end == text.size()) break;
        continue;
      }
      if (line.front() == '[') {
        if (line.back() != ']' || line.size() < 3) fail("bad section header");
        section = std::string(trim(line.substr(1, line.size() - 2)));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string_view::npos) fail("expected key = value");
      const auto key = trim(line.substr(0, eq));
      auto value = trim(line.substr(eq + 1));
      if (key.empty()) fail("empty key");
      if (value.empty()) fail("empty value for '" + std::string(key) + "'");
      std::string parsed;
      if (value.front() == '"') {
        if (value.size() < 2 || value.back() != '"') fail("unterminated string");
        parsed = unescape(value.substr(1, value.size() - 2));
      } else {
        if (value.front() == '[' || value.front() == '{') fail("arrays and inline tables are not supported");
        parsed = std::string(value);
      }
      const std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
      if (kv.values_.count(full)) fail("duplicate key '" + full + "'");
      kv.values_[full] = std::move(parsed);
      if (end == text.size()) break;
    }
    return kv;
  }

  static KeyValues load(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw CodedError("CONFIG_PARSE", "cannot open " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), p.string());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }

  std::optional<std::string> get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  std::string get_or(const std::string& key, std::string fallback) const {
    return get(key).value_or(std::move(fallback));
  }

  std::optional<double> get_number(const std::string& key) const {
    auto v = get(key);
    if (!v) return std::nullopt;
    double out = 0;
    const char* b = v->data();
    const char* e = b + v->size();
    auto [p, ec] = std::from_chars(b, e, out);
    if (ec != std::errc{} || p != e) throw CodedError("CONFIG_PARSE", key + ": not a number: '" + *v + "'");
    return out;
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

 private:
  static std::string_view strip_comment(std::string_view line) {
    bool in_str = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
      if (line[i] == '#' && !in_str) return line.substr(0, i);
    }
    return line;
  }

  static std::string unescape(std::string_view s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '\\' && i + 1 < s.size()) {
        ++i;
        switch (s[i]) {
          case 'n': out.push_back('\n'); break;
          case 't': out.push_back('\t'); break;
          default: out.push_back(s[i]);
        }
      } else {
        out.push_back(s[i]);
      }
    }
    return out;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace trace::config
