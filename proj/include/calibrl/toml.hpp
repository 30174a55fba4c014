#pragma once

// Minimal TOML subset for run configuration: [section] headers, key = value
// pairs, comments, blank lines. Values: integers, floats, booleans (stored as
// integer 0/1), double-quoted strings, and flat arrays of numbers. That is
// the whole grammar the configs use; anything else is a validation error
// naming the offending line.

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "calibrl/common.hpp"

namespace calibrl::toml {

using Value = std::variant<std::int64_t, double, std::string, std::vector<double>>;
using Table = std::map<std::string, Value>;
// Keyed by section name; the root table lives under "".
using Document = std::map<std::string, Table>;

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) {
    s.remove_prefix(1);
  }
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) {
    s.remove_suffix(1);
  }
  return s;
}

// Strips a trailing comment that is not inside a quoted string.
inline std::string_view strip_comment(std::string_view s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"') quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

inline bool valid_key(std::string_view key) {
  if (key.empty()) return false;
  for (char c : key) {
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-') {
      return false;
    }
  }
  return true;
}

inline std::string error_at(int line, const std::string& what) {
  return "toml: line " + std::to_string(line) + ": " + what;
}

inline double parse_number(std::string_view text, int line) {
  const std::string s(text);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ValidationError(error_at(line, "malformed number '" + s + "'"));
  }
  if (used != s.size()) {
    throw ValidationError(error_at(line, "malformed number '" + s + "'"));
  }
  return v;
}

inline bool looks_integer(std::string_view s) {
  std::size_t i = (s.front() == '+' || s.front() == '-') ? 1 : 0;
  if (i == s.size()) return false;
  for (; i < s.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  }
  return true;
}

inline Value parse_scalar(std::string_view text, int line) {
  if (text.empty()) throw ValidationError(error_at(line, "missing value"));
  if (text == "true") return std::int64_t{1};
  if (text == "false") return std::int64_t{0};
  if (text.front() == '"') {
    if (text.size() < 2 || text.back() != '"') {
      throw ValidationError(error_at(line, "unterminated string"));
    }
    const std::string_view body = text.substr(1, text.size() - 2);
    std::string out;
    for (std::size_t i = 0; i < body.size(); ++i) {
      if (body[i] == '"') {
        throw ValidationError(error_at(line, "unescaped quote in string"));
      }
      if (body[i] == '\\') {
        if (i + 1 >= body.size() || (body[i + 1] != '"' && body[i + 1] != '\\')) {
          throw ValidationError(error_at(line, "unsupported escape in string"));
        }
        out.push_back(body[++i]);
      } else {
        out.push_back(body[i]);
      }
    }
    return out;
  }
  if (text.front() == '[') {
    if (text.back() != ']') {
      throw ValidationError(error_at(line, "unterminated array"));
    }
    std::vector<double> items;
    std::string_view body = trim(text.substr(1, text.size() - 2));
    while (!body.empty()) {
      const auto comma = body.find(',');
      const std::string_view item =
          trim(comma == std::string_view::npos ? body : body.substr(0, comma));
      if (item.empty()) {
        throw ValidationError(error_at(line, "empty array element"));
      }
      items.push_back(parse_number(item, line));
      if (comma == std::string_view::npos) break;
      body = trim(body.substr(comma + 1));
      if (body.empty()) {
        throw ValidationError(error_at(line, "trailing comma in array"));
      }
    }
    return items;
  }
  if (looks_integer(text)) {
    try {
      return static_cast<std::int64_t>(std::stoll(std::string(text)));
    } catch (const std::exception&) {
      throw ValidationError(error_at(line, "integer out of range"));
    }
  }
  return parse_number(text, line);
}

}  // namespace detail

inline Document parse(std::string_view text) {
  Document doc;
  doc[""];  // root table always present
  std::string section;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view raw =
        text.substr(pos, nl == std::string_view::npos ? text.size() - pos
                                                      : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const std::string_view line = detail::trim(detail::strip_comment(raw));
    if (line.empty()) continue;

    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ValidationError(
            detail::error_at(line_no, "malformed section header"));
      }
      const std::string_view name = detail::trim(line.substr(1, line.size() - 2));
      if (!detail::valid_key(name)) {
        throw ValidationError(
            detail::error_at(line_no, "invalid section name"));
      }
      section = std::string(name);
      doc[section];
      continue;
    }

    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ValidationError(
          detail::error_at(line_no, "expected 'key = value'"));
    }
    const std::string_view key = detail::trim(line.substr(0, eq));
    if (!detail::valid_key(key)) {
      throw ValidationError(detail::error_at(
          line_no, "invalid key '" + std::string(key) + "'"));
    }
    const std::string_view value = detail::trim(line.substr(eq + 1));
    auto& table = doc[section];
    const std::string key_str(key);
    if (table.count(key_str) != 0) {
      throw ValidationError(
          detail::error_at(line_no, "duplicate key '" + key_str + "'"));
    }
    table[key_str] = detail::parse_scalar(value, line_no);
  }
  return doc;
}

inline Document parse_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("toml: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

inline std::string serialize_value(const Value& v) {
  if (const auto* i = std::get_if<std::int64_t>(&v)) return std::to_string(*i);
  if (const auto* d = std::get_if<double>(&v)) return format_double(*d);
  if (const auto* s = std::get_if<std::string>(&v)) {
    std::string out = "\"";
    for (char c : *s) {
      if (c == '"' || c == '\\') out.push_back('\\');
      out.push_back(c);
    }
    out.push_back('"');
    return out;
  }
  const auto& arr = std::get<std::vector<double>>(v);
  std::string out = "[";
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (i) out += ", ";
    out += format_double(arr[i]);
  }
  out += "]";
  return out;
}

// Deterministic: sections and keys in sorted order, root table first.
inline std::string serialize(const Document& doc) {
  std::string out;
  const auto emit = [&out](const Table& table) {
    for (const auto& [key, value] : table) {
      out += key;
      out += " = ";
      out += serialize_value(value);
      out += '\n';
    }
  };
  if (const auto root = doc.find(""); root != doc.end()) emit(root->second);
  for (const auto& [name, table] : doc) {
    if (name.empty()) continue;
    if (!out.empty()) out += '\n';
    out += '[' + name + "]\n";
    emit(table);
  }
  return out;
}

// ---- typed accessors (missing key falls back to the provided default) ----

inline std::int64_t get_int(const Table& t, const std::string& key,
                            std::int64_t fallback) {
  const auto it = t.find(key);
  if (it == t.end()) return fallback;
  if (const auto* i = std::get_if<std::int64_t>(&it->second)) return *i;
  throw ValidationError("toml: key '" + key + "' must be an integer");
}

inline double get_double(const Table& t, const std::string& key,
                         double fallback) {
  const auto it = t.find(key);
  if (it == t.end()) return fallback;
  if (const auto* d = std::get_if<double>(&it->second)) return *d;
  if (const auto* i = std::get_if<std::int64_t>(&it->second)) {
    return static_cast<double>(*i);
  }
  throw ValidationError("toml: key '" + key + "' must be a number");
}

inline bool get_bool(const Table& t, const std::string& key, bool fallback) {
  return get_int(t, key, fallback ? 1 : 0) != 0;
}

inline std::string get_string(const Table& t, const std::string& key,
                              const std::string& fallback) {
  const auto it = t.find(key);
  if (it == t.end()) return fallback;
  if (const auto* s = std::get_if<std::string>(&it->second)) return *s;
  throw ValidationError("toml: key '" + key + "' must be a string");
}

}  // namespace calibrl::toml
