#pragma once
// SPDX-License-Identifier: Apache-2.0

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "asyncrl/errors.hpp"

namespace asyncrl::io {

/// %.17g keeps doubles round-trip exact, so equal runs produce equal bytes.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Minimal column-oriented CSV table: fixed header, rows of doubles.
/// Values never contain separators, so no quoting layer is needed.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

  void add_row(const std::vector<double>& row) {
    if (row.size() != columns_.size()) throw DomainError("csv row width mismatch");
    rows_.push_back(row);
  }

  const std::vector<std::string>& columns() const { return columns_; }
  const std::vector<std::vector<double>>& rows() const { return rows_; }

  std::string to_string() const {
    std::ostringstream out;
    for (std::size_t c = 0; c < columns_.size(); ++c) {
      out << (c ? "," : "") << columns_[c];
    }
    out << "\n";
    for (const auto& row : rows_) {
      for (std::size_t c = 0; c < row.size(); ++c) {
        out << (c ? "," : "") << format_double(row[c]);
      }
      out << "\n";
    }
    return out.str();
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw ResourceError("cannot open " + path + " for writing");
    f << to_string();
    if (!f) throw ResourceError("short write to " + path);
  }

  /// Column values by name; SchemaError names the missing column.
  std::vector<double> column(const std::string& name) const {
    for (std::size_t c = 0; c < columns_.size(); ++c) {
      if (columns_[c] == name) {
        std::vector<double> out;
        out.reserve(rows_.size());
        for (const auto& row : rows_) out.push_back(row[c]);
        return out;
      }
    }
    throw SchemaError("metrics column not found: " + name);
  }

  static CsvTable load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ResourceError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw SchemaError("empty csv: " + path);
    CsvTable table(split_header(line));
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::vector<double> row;
      row.reserve(table.columns_.size());
      std::size_t start = 0;
      while (true) {
        const std::size_t comma = line.find(',', start);
        const std::string cell = line.substr(start, comma - start);
        double v = 0.0;
        auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
        if (ec != std::errc()) throw SchemaError("bad number in " + path + ": " + cell);
        row.push_back(v);
        if (comma == std::string::npos) break;
        start = comma + 1;
      }
      table.add_row(row);
    }
    return table;
  }

 private:
  static std::vector<std::string> split_header(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      out.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return out;
  }

  std::vector<std::string> columns_;
  std::vector<std::vector<double>> rows_;
};

}  // namespace asyncrl::io
