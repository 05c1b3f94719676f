#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "flowppf/core/common.hpp"

namespace flowppf {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  int column(const std::string& name) const;  // -1 when absent
};

CsvTable read_csv(const std::string& path);

// Doubles are printed with %.17g so that a written file round-trips bitwise.
std::string format_double(double v);

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path);
  void write_header(const std::vector<std::string>& names);
  void write_row(const std::vector<double>& values);
  void close();

 private:
  std::ofstream out_;
  std::string path_;
};

}  // namespace flowppf
