#pragma once

// Minimal CSV reading/writing for the flat numeric tables this project emits.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "powercap/errors.hpp"

namespace powercap::csv {

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

class Writer {
 public:
  Writer(const std::filesystem::path& path, const std::vector<std::string>& header)
      : out_(path) {
    if (!out_) throw FormatError("cannot open " + path.string() + " for writing");
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

  template <typename... Ts>
  void values(const Ts&... vs) {
    std::vector<std::string> cells;
    (cells.push_back(cell(vs)), ...);
    row(cells);
  }

 private:
  static std::string cell(double v) { return format_number(v); }
  static std::string cell(int v) { return std::to_string(v); }
  static std::string cell(long v) { return std::to_string(v); }
  static std::string cell(long long v) { return std::to_string(v); }
  static std::string cell(unsigned long v) { return std::to_string(v); }
  static std::string cell(unsigned long long v) { return std::to_string(v); }
  static std::string cell(bool v) { return v ? "1" : "0"; }
  static std::string cell(const std::string& v) { return v; }
  static std::string cell(const char* v) { return v; }

  std::ofstream out_;
};

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw FormatError("missing CSV column '" + std::string(name) + "'");
  }
};

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    cells.push_back(cell);
  }
  return cells;
}

inline Table read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": empty CSV");
  t.header = split_line(line);
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto cells = split_line(line);
    if (cells.size() != t.header.size())
      throw FormatError(path.string() + ": row width does not match header");
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline double to_double(const std::string& s) {
  try {
    std::size_t pos = 0;
    double v = std::stod(s, &pos);
    if (pos != s.size()) throw FormatError("trailing characters in number '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw FormatError("not a number: '" + s + "'");
  }
}

}  // namespace powercap::csv
