// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include "diffapo/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>

namespace diffapo::report {

using pipeline::MetricsRow;
using pipeline::Stage;

namespace {

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    out.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::optional<double> parse_optional(const std::string& s, const std::string& path, std::size_t line,
                                     const char* column) {
  if (s.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw CsvError(path, line, std::string("bad value for ") + column + ": '" + s + "'");
}

int parse_step(const std::string& s, const std::string& path, std::size_t line, const char* column) {
  try {
    std::size_t used = 0;
    const long v = std::stol(s, &used);
    if (used == s.size() && v >= 0 && v <= std::numeric_limits<int>::max()) return static_cast<int>(v);
  } catch (const std::exception&) {
  }
  throw CsvError(path, line, std::string("bad integer for ") + column + ": '" + s + "'");
}

}  // namespace

MetricsTable parse_metrics_csv(const std::string& text, const std::string& path) {
  MetricsTable table;
  table.label = std::filesystem::path(path).filename().string();
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (number == 1) {
      if (line != pipeline::kMetricsHeader) throw CsvError(path, 1, "unexpected header");
      continue;
    }
    if (line.empty()) continue;
    const auto f = split_commas(line);
    if (f.size() != 8) throw CsvError(path, number, "expected 8 fields, got " + std::to_string(f.size()));
    MetricsRow row;
    row.step = parse_step(f[0], path, number, "step");
    const auto stage = pipeline::stage_from_name(f[1]);
    if (!stage) throw CsvError(path, number, "unknown stage '" + f[1] + "'");
    row.stage = *stage;
    row.loss = parse_optional(f[2], path, number, "loss");
    row.margin = parse_optional(f[3], path, number, "margin");
    const auto defect = parse_optional(f[4], path, number, "defect_rate");
    const auto follow = parse_optional(f[5], path, number, "follow_rate");
    const auto quality = parse_optional(f[6], path, number, "mean_quality");
    const bool any = defect || follow || quality || !f[7].empty();
    if (any) {
      if (!(defect && follow && quality && !f[7].empty())) {
        throw CsvError(path, number, "evaluation columns must be all present or all empty");
      }
      row.eval = synth::EvalReport{*defect, *follow, *quality, parse_step(f[7], path, number, "nfe")};
    }
    table.rows.push_back(row);
  }
  if (number == 0) throw CsvError(path, 1, "missing header");
  return table;
}

MetricsTable read_metrics_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_metrics_csv(ss.str(), path);
}

// ---------------------------------------------------------------------------
// SVG

namespace {

constexpr double kWidth = 760, kHeight = 420;
constexpr double kLeft = 70, kRight = 200, kTop = 40, kBottom = 50;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

std::string f3(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string tick(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

const char* color(std::size_t i) { return kPalette[i % std::size(kPalette)]; }

struct Range {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void finish(double default_lo, double default_hi) {
    if (!(lo <= hi)) {
      lo = default_lo;
      hi = default_hi;
    } else if (lo == hi) {
      const double pad = lo == 0.0 ? 1.0 : std::abs(lo) * 0.1;
      lo -= pad;
      hi += pad;
    }
  }
};

using Points = std::vector<std::pair<double, double>>;

struct Series {
  std::string label;
  std::size_t color_index = 0;
  std::vector<Points> segments;
};

// Position of each row on a shared step axis: stages are laid end to end in
// the order they first appear.
std::vector<double> global_steps(const MetricsTable& table) {
  std::vector<Stage> order;
  std::map<Stage, int> extent;
  for (const auto& r : table.rows) {
    if (!extent.count(r.stage)) order.push_back(r.stage);
    extent[r.stage] = std::max(extent[r.stage], r.step + 1);
  }
  std::map<Stage, double> offset;
  double acc = 0.0;
  for (Stage s : order) {
    offset[s] = acc;
    acc += extent[s];
  }
  std::vector<double> out;
  for (const auto& r : table.rows) out.push_back(offset[r.stage] + r.step);
  return out;
}

template <typename Value>
std::vector<Series> collect(const std::vector<MetricsTable>& tables, Value&& value) {
  std::vector<Series> out;
  for (std::size_t i = 0; i < tables.size(); ++i) {
    Series s{tables[i].label, i, {}};
    const auto xs = global_steps(tables[i]);
    std::optional<Stage> current;
    for (std::size_t r = 0; r < tables[i].rows.size(); ++r) {
      const auto& row = tables[i].rows[r];
      const std::optional<double> y = value(row);
      if (!y) continue;
      if (!current || *current != row.stage) {
        s.segments.emplace_back();
        current = row.stage;
      }
      s.segments.back().emplace_back(xs[r], *y);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void axes(std::ostringstream& os, const std::string& title, const std::string& xlabel, const std::string& ylabel,
          const Range& xr, const Range& yr) {
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  os << "<text x=\"" << f3(kWidth / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << escape(title)
     << "</text>\n";
  os << "<rect x=\"" << f3(x0) << "\" y=\"" << f3(y1) << "\" width=\"" << f3(x1 - x0) << "\" height=\"" << f3(y0 - y1)
     << "\" fill=\"none\" stroke=\"#000\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double fx = x0 + (x1 - x0) * k / 4.0, fy = y0 - (y0 - y1) * k / 4.0;
    os << "<text x=\"" << f3(fx) << "\" y=\"" << f3(y0 + 16) << "\" text-anchor=\"middle\" font-size=\"11\">"
       << tick(xr.lo + (xr.hi - xr.lo) * k / 4.0) << "</text>\n";
    os << "<text x=\"" << f3(x0 - 6) << "\" y=\"" << f3(fy + 4) << "\" text-anchor=\"end\" font-size=\"11\">"
       << tick(yr.lo + (yr.hi - yr.lo) * k / 4.0) << "</text>\n";
  }
  os << "<text x=\"" << f3((x0 + x1) / 2) << "\" y=\"" << f3(kHeight - 12)
     << "\" text-anchor=\"middle\" font-size=\"12\">" << escape(xlabel) << "</text>\n";
  os << "<text x=\"16\" y=\"" << f3((y0 + y1) / 2) << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
     << f3((y0 + y1) / 2) << ")\">" << escape(ylabel) << "</text>\n";
}

void legend(std::ostringstream& os, const std::vector<std::string>& labels) {
  const double x = kWidth - kRight + 14;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double y = kTop + 10 + 18.0 * static_cast<double>(i);
    os << "<rect x=\"" << f3(x) << "\" y=\"" << f3(y - 9) << "\" width=\"12\" height=\"10\" fill=\"" << color(i)
       << "\"/>\n";
    os << "<text x=\"" << f3(x + 18) << "\" y=\"" << f3(y) << "\" font-size=\"11\">" << escape(labels[i]) << "</text>\n";
  }
}

std::string header() {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + f3(kWidth) + "\" height=\"" + f3(kHeight) +
         "\" viewBox=\"0 0 " + f3(kWidth) + " " + f3(kHeight) + "\">\n<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n";
}

std::string line_plot(const std::vector<Series>& series, const std::string& title, const std::string& ylabel) {
  Range xr, yr;
  for (const auto& s : series) {
    for (const auto& seg : s.segments) {
      for (const auto& [x, y] : seg) {
        xr.add(x);
        yr.add(y);
      }
    }
  }
  xr.finish(0.0, 1.0);
  yr.finish(0.0, 1.0);
  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
  auto px = [&](double x) { return x0 + (x - xr.lo) / (xr.hi - xr.lo) * (x1 - x0); };
  auto py = [&](double y) { return y0 - (y - yr.lo) / (yr.hi - yr.lo) * (y0 - y1); };

  std::ostringstream os;
  os << header();
  axes(os, title, "step", ylabel, xr, yr);
  std::vector<std::string> labels;
  for (const auto& s : series) {
    labels.push_back(s.label);
    for (const auto& seg : s.segments) {
      if (seg.size() == 1) {
        os << "<circle cx=\"" << f3(px(seg[0].first)) << "\" cy=\"" << f3(py(seg[0].second)) << "\" r=\"2.5\" fill=\""
           << color(s.color_index) << "\"/>\n";
        continue;
      }
      os << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << color(s.color_index) << "\" points=\"";
      for (std::size_t k = 0; k < seg.size(); ++k) {
        os << (k ? " " : "") << f3(px(seg[k].first)) << ',' << f3(py(seg[k].second));
      }
      os << "\"/>\n";
    }
  }
  legend(os, labels);
  os << "</svg>\n";
  return os.str();
}

}  // namespace

std::string loss_svg(const std::vector<MetricsTable>& tables) {
  return line_plot(collect(tables, [](const MetricsRow& r) { return r.loss; }), "Training loss per stage", "loss");
}

std::string defect_rate_svg(const std::vector<MetricsTable>& tables) {
  return line_plot(collect(tables,
                           [](const MetricsRow& r) -> std::optional<double> {
                             if (!r.eval) return std::nullopt;
                             return r.eval->defect_rate;
                           }),
                   "Defect rate", "defect rate");
}

std::string comparison_svg(const std::vector<MetricsTable>& tables) {
  struct Entry {
    std::string label;
    std::optional<synth::EvalReport> eval;
    std::string stage;
  };
  std::vector<Entry> entries;
  Range yr;
  yr.add(0.0);
  for (const auto& t : tables) {
    Entry e{t.label, std::nullopt, ""};
    for (auto it = t.rows.rbegin(); it != t.rows.rend(); ++it) {
      if (it->eval) {
        e.eval = it->eval;
        e.stage = pipeline::stage_name(it->stage);
        yr.add(it->eval->defect_rate);
        break;
      }
    }
    entries.push_back(e);
  }
  yr.finish(0.0, 1.0);
  if (yr.hi <= 0.0) yr.hi = 1.0;

  const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom - 80, y1 = kTop;
  std::ostringstream os;
  os << header();
  os << "<text x=\"" << f3(kWidth / 2) << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">Final defect rate</text>\n";
  os << "<rect x=\"" << f3(x0) << "\" y=\"" << f3(y1) << "\" width=\"" << f3(x1 - x0) << "\" height=\"" << f3(y0 - y1)
     << "\" fill=\"none\" stroke=\"#000\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double fy = y0 - (y0 - y1) * k / 4.0;
    os << "<text x=\"" << f3(x0 - 6) << "\" y=\"" << f3(fy + 4) << "\" text-anchor=\"end\" font-size=\"11\">"
       << tick(yr.hi * k / 4.0) << "</text>\n";
  }
  const double slot = entries.empty() ? 0.0 : (x1 - x0) / static_cast<double>(entries.size());
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    labels.push_back(entries[i].label);
    if (!entries[i].eval) continue;
    const double h = entries[i].eval->defect_rate / yr.hi * (y0 - y1);
    os << "<rect x=\"" << f3(x0 + slot * (static_cast<double>(i) + 0.2)) << "\" y=\"" << f3(y0 - h) << "\" width=\""
       << f3(slot * 0.6) << "\" height=\"" << f3(h) << "\" fill=\"" << color(i) << "\"/>\n";
  }
  // Numeric table under the bars.
  const double ty = y0 + 24;
  const char* columns[] = {"run", "stage", "defect", "follow", "quality", "nfe"};
  const double cx[] = {x0, x0 + 200, x0 + 290, x0 + 360, x0 + 430, x0 + 500};
  for (std::size_t c = 0; c < 6; ++c) {
    os << "<text x=\"" << f3(cx[c]) << "\" y=\"" << f3(ty) << "\" font-size=\"11\" font-weight=\"bold\">" << columns[c]
       << "</text>\n";
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const double y = ty + 16.0 * static_cast<double>(i + 1);
    std::vector<std::string> cells{entries[i].label, entries[i].stage, "", "", "", ""};
    if (entries[i].eval) {
      cells[2] = f3(entries[i].eval->defect_rate);
      cells[3] = f3(entries[i].eval->follow_rate);
      cells[4] = f3(entries[i].eval->mean_quality);
      cells[5] = std::to_string(entries[i].eval->nfe_per_sample);
    }
    for (std::size_t c = 0; c < 6; ++c) {
      os << "<text x=\"" << f3(cx[c]) << "\" y=\"" << f3(y) << "\" font-size=\"11\">" << escape(cells[c]) << "</text>\n";
    }
  }
  legend(os, labels);
  os << "</svg>\n";
  return os.str();
}

std::vector<std::string> write_reports(const std::vector<std::string>& csv_paths, const std::string& out_dir) {
  if (csv_paths.empty()) throw Error("report: at least one metrics CSV is required");
  std::vector<MetricsTable> tables;
  for (const auto& p : csv_paths) tables.push_back(read_metrics_csv(p));

  const std::pair<const char*, std::string> files[] = {
      {"loss.svg", loss_svg(tables)},
      {"defect_rate.svg", defect_rate_svg(tables)},
      {"comparison.svg", comparison_svg(tables)},
  };
  std::vector<std::string> written;
  for (const auto& [name, body] : files) {
    const std::string path = (std::filesystem::path(out_dir) / name).string();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << body;
    if (!out) throw Error("failed writing '" + path + "'");
    written.push_back(path);
  }
  return written;
}

}  // namespace diffapo::report
