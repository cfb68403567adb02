#pragma once
// Minimal CSV emitter for the experiment reports. One writer per file,
// header mandatory, every row checked against the column count. Doubles are
// written in full-precision scientific notation so reruns can be compared
// byte for byte.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace tlab {

using CsvCell = std::variant<std::string, double, std::int64_t>;

inline std::string csv_format(const CsvCell& cell) {
  if (std::holds_alternative<std::string>(cell)) return std::get<std::string>(cell);
  if (std::holds_alternative<std::int64_t>(cell))
    return std::to_string(std::get<std::int64_t>(cell));
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17e", std::get<double>(cell));
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& columns)
      : path_(path), n_cols_(columns.size()), out_(path) {
    if (!out_) throw std::runtime_error("csv: cannot open " + path);
    if (columns.empty()) throw std::invalid_argument("csv: need at least one column");
    for (std::size_t i = 0; i < columns.size(); ++i) out_ << (i ? "," : "") << columns[i];
    out_ << "\n";
  }

  void row(const std::vector<CsvCell>& cells) {
    if (cells.size() != n_cols_)
      throw std::invalid_argument("csv: row width mismatch in " + path_);
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << csv_format(cells[i]);
    out_ << "\n";
    if (!out_) throw std::runtime_error("csv: write failed for " + path_);
  }

  void close() {
    out_.close();
    if (!out_) throw std::runtime_error("csv: close failed for " + path_);
  }

 private:
  std::string path_;
  std::size_t n_cols_;
  std::ofstream out_;
};

}  // namespace tlab
