#pragma once

#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ncdpo/rl.hpp"

namespace ncdpo {

const std::vector<std::string>& metrics_columns();
std::string metrics_header();
// Integers as-is, reals in shortest round-trip form.
std::string metrics_row(const IterationMetrics& m);

class MetricsWriter {
 public:
  // Truncates; writes the header.
  explicit MetricsWriter(const std::filesystem::path& path);
  void write(const IterationMetrics& m);

 private:
  std::ofstream out_;
};

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  std::size_t column(const std::string& name) const;  // throws CsvError if absent
  std::vector<double> values(const std::string& name) const;
};

// Numeric CSV with a header line. Errors name the file and 1-based line.
CsvTable parse_csv(const std::string& text, const std::string& source = "<csv>");
CsvTable read_csv(const std::filesystem::path& path);

struct PlotSeries {
  std::string label;
  std::vector<CsvTable> runs;  // seeds
};

// Mean +/- std band per series over runs, aligned by row and truncated to the
// shortest run. x from the env_steps column. Pure function of its inputs.
std::string render_svg(const std::vector<PlotSeries>& series, const std::string& y_column,
                       const std::string& title);

}  // namespace ncdpo
