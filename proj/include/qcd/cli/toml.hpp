#ifndef QCD_CLI_TOML_HPP
#define QCD_CLI_TOML_HPP

// Reader and writer for the TOML subset used by run configurations: tables
// ([a] and [a.b]), bare keys, strings, integers, floats, booleans and
// (possibly multi-line) arrays of those. Values land in an ordered JSON tree.

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace qcd::toml {

using Json = nlohmann::ordered_json;

class ParseError : public std::runtime_error {
 public:
  ParseError(int line, const std::string& what) : std::runtime_error("line " + std::to_string(line) + ": " + what) {}
};

namespace detail {

class Parser {
 public:
  explicit Parser(std::string_view text) : s_(text) {}

  Json parse() {
    Json root = Json::object();
    Json* table = &root;
    for (;;) {
      skip_blank_lines();
      if (eof()) break;
      if (peek() == '[') {
        ++i_;
        std::vector<std::string> path = dotted_key(']');
        expect(']');
        table = &root;
        for (const auto& part : path) {
          Json& next = (*table)[part];
          if (next.is_null()) next = Json::object();
          if (!next.is_object()) fail("'" + part + "' is not a table");
          table = &next;
        }
      } else {
        std::vector<std::string> path = dotted_key('=');
        skip_spaces();
        expect('=');
        skip_spaces();
        Json* target = table;
        for (std::size_t k = 0; k + 1 < path.size(); ++k) {
          Json& next = (*target)[path[k]];
          if (next.is_null()) next = Json::object();
          target = &next;
        }
        if (target->contains(path.back())) fail("duplicate key '" + path.back() + "'");
        (*target)[path.back()] = value();
      }
      end_of_line();
    }
    return root;
  }

 private:
  bool eof() const { return i_ >= s_.size(); }
  char peek() const { return eof() ? '\0' : s_[i_]; }
  [[noreturn]] void fail(const std::string& what) const { throw ParseError(line_, what); }

  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++i_;
  }
  void skip_spaces() {
    while (!eof() && (peek() == ' ' || peek() == '\t')) ++i_;
  }
  void skip_comment() {
    if (peek() == '#') {
      while (!eof() && peek() != '\n') ++i_;
    }
  }
  void skip_blank_lines() {
    for (;;) {
      skip_spaces();
      skip_comment();
      if (peek() == '\r') ++i_;
      if (peek() == '\n') {
        ++i_;
        ++line_;
        continue;
      }
      return;
    }
  }
  // Whitespace, comments and newlines inside arrays.
  void skip_any() {
    for (;;) {
      skip_blank_lines();
      if (peek() != '\n') return;
    }
  }
  void end_of_line() {
    skip_spaces();
    skip_comment();
    if (peek() == '\r') ++i_;
    if (!eof() && peek() != '\n') fail("unexpected trailing characters");
  }

  std::vector<std::string> dotted_key(char stop) {
    std::vector<std::string> parts;
    for (;;) {
      skip_spaces();
      std::string key;
      if (peek() == '"') {
        key = string();
      } else {
        while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-')) {
          key += s_[i_++];
        }
      }
      if (key.empty()) fail("empty key");
      parts.push_back(key);
      skip_spaces();
      if (peek() == '.') {
        ++i_;
        continue;
      }
      if (peek() != stop) fail(std::string("expected '") + stop + "' after key");
      return parts;
    }
  }

  std::string string() {
    expect('"');
    std::string out;
    for (;;) {
      if (eof() || peek() == '\n') fail("unterminated string");
      char c = s_[i_++];
      if (c == '"') return out;
      if (c == '\\') {
        if (eof()) fail("bad escape");
        char e = s_[i_++];
        switch (e) {
          case 'n': out += '\n'; break;
          case 't': out += '\t'; break;
          case '"': out += '"'; break;
          case '\\': out += '\\'; break;
          default: fail(std::string("unsupported escape \\") + e);
        }
      } else {
        out += c;
      }
    }
  }

  Json value() {
    const char c = peek();
    if (c == '"') return string();
    if (c == '[') return array();
    if (s_.substr(i_, 4) == "true") {
      i_ += 4;
      return true;
    }
    if (s_.substr(i_, 5) == "false") {
      i_ += 5;
      return false;
    }
    return number();
  }

  Json array() {
    expect('[');
    Json arr = Json::array();
    for (;;) {
      skip_any();
      if (peek() == ']') {
        ++i_;
        return arr;
      }
      arr.push_back(value());
      skip_any();
      if (peek() == ',') {
        ++i_;
        continue;
      }
      skip_any();
      expect(']');
      return arr;
    }
  }

  Json number() {
    std::string tok;
    while (!eof() && (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '+' || peek() == '-' ||
                      peek() == '.' || peek() == '_')) {
      if (peek() != '_') tok += peek();
      ++i_;
    }
    if (tok.empty()) fail("expected a value");
    if (tok == "inf" || tok == "+inf") return std::numeric_limits<double>::infinity();
    if (tok == "-inf") return -std::numeric_limits<double>::infinity();
    const bool is_float = tok.find_first_of(".eE") != std::string::npos;
    const char* b = tok.data();
    const char* e = tok.data() + tok.size();
    if (*b == '+') ++b;
    if (is_float) {
      double v = 0.0;
      auto r = std::from_chars(b, e, v);
      if (r.ec != std::errc() || r.ptr != e) fail("bad number '" + tok + "'");
      return v;
    }
    std::int64_t v = 0;
    auto r = std::from_chars(b, e, v);
    if (r.ec == std::errc::result_out_of_range && *b != '-') {
      std::uint64_t u = 0;
      auto ru = std::from_chars(b, e, u);
      if (ru.ec == std::errc() && ru.ptr == e) return u;
    }
    if (r.ec != std::errc() || r.ptr != e) fail("bad value '" + tok + "'");
    return v;
  }

  std::string_view s_;
  std::size_t i_ = 0;
  int line_ = 1;
};

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  // Shortest of %.15g..%.17g that reads back exactly.
  char buf[32];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

inline std::string scalar(const Json& v) {
  if (v.is_string()) return quote(v.get<std::string>());
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_float()) return format_double(v.get<double>());
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
  if (v.is_array()) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + scalar(v[i]);
    return out + "]";
  }
  throw std::invalid_argument("toml: cannot serialize value");
}

inline void emit(const Json& table, const std::string& prefix, std::ostringstream& os) {
  bool wrote = false;
  for (auto it = table.begin(); it != table.end(); ++it) {
    if (it.value().is_object()) continue;
    os << it.key() << " = " << scalar(it.value()) << "\n";
    wrote = true;
  }
  for (auto it = table.begin(); it != table.end(); ++it) {
    if (!it.value().is_object()) continue;
    const std::string name = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (wrote || os.tellp() > 0) os << "\n";
    os << "[" << name << "]\n";
    emit(it.value(), name, os);
    wrote = false;
  }
}

}  // namespace detail

inline Json parse(std::string_view text) { return detail::Parser(text).parse(); }

/// Canonical text: scalars of a table first, then its sub-tables, in the
/// tree's order. Floats always carry a '.' or exponent so they re-parse as floats.
inline std::string serialize(const Json& root) {
  std::ostringstream os;
  detail::emit(root, "", os);
  return os.str();
}

}  // namespace qcd::toml

#endif  // QCD_CLI_TOML_HPP
