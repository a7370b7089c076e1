#ifndef QCD_CLI_CSV_HPP
#define QCD_CLI_CSV_HPP

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace qcd::csv {

/// Nine significant digits; non-finite values as nan, inf, -inf.
inline std::string number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string number(std::uint64_t v) { return std::to_string(v); }

/// RFC 4180: quote fields holding a comma, quote, CR or LF; double inner quotes.
inline std::string field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

/// Rows end in CRLF as RFC 4180 prescribes.
inline void write_row(std::ostream& os, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) os << ',';
    os << field(cells[i]);
  }
  os << "\r\n";
}

}  // namespace qcd::csv

#endif  // QCD_CLI_CSV_HPP
