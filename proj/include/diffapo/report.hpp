// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

// Metrics CSV parsing and SVG plots: a loss overlay, a defect-rate overlay and
// a bar table comparing the final evaluation of each run.

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "diffapo/errors.hpp"
#include "diffapo/pipeline.hpp"

namespace diffapo::report {

class CsvError : public Error {
 public:
  CsvError(const std::string& path, std::size_t line, const std::string& detail)
      : Error(path + ":" + std::to_string(line) + ": " + detail), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

struct MetricsTable {
  std::string label;  ///< file name without directory
  std::vector<pipeline::MetricsRow> rows;
};

/// Parses a metrics CSV. Throws CsvError with the 1-based line number of the
/// first malformed line.
MetricsTable parse_metrics_csv(const std::string& text, const std::string& path);
MetricsTable read_metrics_csv(const std::string& path);

std::string loss_svg(const std::vector<MetricsTable>& tables);
std::string defect_rate_svg(const std::vector<MetricsTable>& tables);
std::string comparison_svg(const std::vector<MetricsTable>& tables);

/// Writes loss.svg, defect_rate.svg and comparison.svg into `out_dir` and
/// returns their paths.
std::vector<std::string> write_reports(const std::vector<std::string>& csv_paths, const std::string& out_dir);

}  // namespace diffapo::report
