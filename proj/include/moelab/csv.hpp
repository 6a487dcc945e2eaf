// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace moelab {

// Deterministic number formatting so identical runs emit byte-identical CSV.
inline std::string csv_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

inline std::string csv_num(int64_t v) { return std::to_string(v); }

struct CsvWriter {
  std::ostringstream out;
  bool line_started = false;

  void field(const std::string& s) {
    if (line_started) out << ',';
    const bool quote = s.find_first_of(",\"\n") != std::string::npos;
    if (quote) {
      out << '"';
      for (char c : s) {
        if (c == '"') out << '"';
        out << c;
      }
      out << '"';
    } else {
      out << s;
    }
    line_started = true;
  }
  void field(double v) { field(csv_num(v)); }
  void field(int64_t v) { field(std::to_string(v)); }
  void endrow() {
    out << '\n';
    line_started = false;
  }
  std::string str() const { return out.str(); }
};

inline void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << content;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Minimal CSV line splitter for the trace files (no embedded quotes there).
inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace moelab
