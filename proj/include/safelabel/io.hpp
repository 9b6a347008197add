#ifndef SAFELABEL_IO_HPP
#define SAFELABEL_IO_HPP

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "safelabel/error.hpp"

namespace safelabel::io {

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double x) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, x);
  if (ec != std::errc{}) throw std::runtime_error("format_double: conversion failed");
  return std::string(buf, end);
}

inline std::string_view trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

/// Strict decimal parse ("." separator, no trailing garbage). Returns
/// nullopt on malformed input; does not accept nan/inf.
inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(out)) return std::nullopt;
  return out;
}

/// RFC 4180 reader: quoted fields may contain separators, doubled quotes and
/// newlines. Returns one vector of fields per record; blank lines are skipped.
class CsvReader {
public:
  explicit CsvReader(std::istream& in, char sep = ',') : in_(in), sep_(sep) {}

  /// Reads the next record into `fields`. Returns false at end of input.
  bool next(std::vector<std::string>& fields) {
    fields.clear();
    std::string field;
    bool in_quotes = false;
    bool any = false;
    bool field_started = false;
    int c;
    while ((c = in_.get()) != EOF) {
      any = true;
      const char ch = static_cast<char>(c);
      if (in_quotes) {
        if (ch == '"') {
          if (in_.peek() == '"') {
            field.push_back('"');
            in_.get();
          } else {
            in_quotes = false;
          }
        } else {
          if (ch == '\n') ++line_;
          field.push_back(ch);
        }
        continue;
      }
      if (ch == '"' && !field_started) {
        in_quotes = true;
        field_started = true;
      } else if (ch == sep_) {
        fields.push_back(std::move(field));
        field.clear();
        field_started = false;
      } else if (ch == '\n') {
        ++line_;
        if (fields.empty() && field.empty() && !field_started) {
          any = false;
          continue;
        }
        fields.push_back(std::move(field));
        return true;
      } else if (ch == '\r') {
        // CRLF line endings
      } else {
        field.push_back(ch);
        field_started = true;
      }
    }
    if (in_quotes) throw ParseError("unterminated quoted field", line_ + 1);
    if (!any && fields.empty() && field.empty()) return false;
    fields.push_back(std::move(field));
    return true;
  }

  /// 1-based physical line count consumed so far.
  std::size_t line() const noexcept { return line_; }

private:
  std::istream& in_;
  char sep_;
  std::size_t line_ = 0;
};

inline std::string csv_escape(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write file: " + path.string());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace safelabel::io

#endif
