#include "flowppf/core/csv.hpp"

#include <cstdio>
#include <sstream>

namespace flowppf {

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::data, "csv: cannot open '" + path + "'");
  CsvTable t;
  std::string line;
  bool first = true;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    if (first) {
      t.header = cells;
      first = false;
      continue;
    }
    require(cells.size() == t.header.size(), ErrorCode::data,
            "csv: row " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                " cells, expected " + std::to_string(t.header.size()) + " in '" + path + "'");
    std::vector<double> row;
    row.reserve(cells.size());
    for (const std::string& c : cells) {
      try {
        std::size_t used = 0;
        double v = std::stod(c, &used);
        require(used == c.size(), ErrorCode::data, "csv: trailing characters in cell '" + c + "'");
        row.push_back(v);
      } catch (const std::exception&) {
        raise(ErrorCode::data,
              "csv: non-numeric cell '" + c + "' at line " + std::to_string(lineno) + " of '" +
                  path + "'");
      }
    }
    t.rows.push_back(std::move(row));
  }
  require(!t.header.empty(), ErrorCode::data, "csv: empty file '" + path + "'");
  return t;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::string& path) : out_(path), path_(path) {
  require(out_.good(), ErrorCode::data, "csv: cannot write '" + path + "'");
}

void CsvWriter::write_header(const std::vector<std::string>& names) {
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) out_ << ',';
    out_ << names[i];
  }
  out_ << '\n';
}

void CsvWriter::write_row(const std::vector<double>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out_ << ',';
    out_ << format_double(values[i]);
  }
  out_ << '\n';
}

void CsvWriter::close() {
  out_.close();
  require(out_.good(), ErrorCode::data, "csv: write failed for '" + path_ + "'");
}

}  // namespace flowppf
