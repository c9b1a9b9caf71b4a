// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include "diffapo/synthworld.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace diffapo::synth {

using nd::Shape;
using nd::Tensor;

void TaskSpec::validate() const {
  if (num_modes < 2) throw ConfigError("task: num_modes must be >= 2");
  if (!(mode_std > 0.0 && defect_radius > mode_std && radius > defect_radius) || !std::isfinite(radius)) {
    throw ConfigError("task: need radius > defect_radius > mode_std > 0");
  }
}

void OracleConfig::validate() const {
  if (!(flip_prob >= 0.0 && flip_prob < 0.5)) throw ConfigError("oracle: flip_prob must be in [0, 0.5)");
}

namespace {

void check_condition(int c, const TaskSpec& task) {
  if (c < 0 || c >= task.num_modes) throw std::out_of_range("condition " + std::to_string(c) + " out of range");
}

double distance(const Tensor& x, const Tensor& y) { return std::hypot(x[0] - y[0], x[1] - y[1]); }

}  // namespace

Tensor mode_center(int c, const TaskSpec& task) {
  check_condition(c, task);
  const double angle = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(task.num_modes);
  return Tensor::vector({task.radius * std::cos(angle), task.radius * std::sin(angle)});
}

Tensor sample_clean(int c, const TaskSpec& task, Rng& rng) {
  Tensor x = mode_center(c, task);
  x[0] += task.mode_std * rng.normal();
  x[1] += task.mode_std * rng.normal();
  return x;
}

double quality(const Tensor& x, int c, const TaskSpec& task) { return -distance(x, mode_center(c, task)); }

bool is_defect(const Tensor& x, int c, const TaskSpec& task) {
  return distance(x, mode_center(c, task)) > task.defect_radius;
}

bool follows_instruction(const Tensor& x, int c, const TaskSpec& task) {
  check_condition(c, task);
  int best = 0;
  double best_d = distance(x, mode_center(0, task));
  for (int k = 1; k < task.num_modes; ++k) {
    const double d = distance(x, mode_center(k, task));
    if (d < best_d) {
      best = k;
      best_d = d;
    }
  }
  return best == c;
}

Verdict rank_pair(const Tensor& a, const Tensor& b, int c, const OracleConfig& oracle, const TaskSpec& task,
                  Rng& rng) {
  const double qa = quality(a, c, task);
  const double qb = quality(b, c, task);
  const bool flip = rng.bernoulli(oracle.flip_prob);
  if (qa == qb) return Verdict::a_chosen;
  const bool a_wins = qa > qb;
  return a_wins != flip ? Verdict::a_chosen : Verdict::b_chosen;
}

Tensor corrupt_sample(int c, const TaskSpec& task, Rng& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Tensor x;
    if (rng.bernoulli(0.5)) {
      const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double length = 0.5 + 0.5 * rng.uniform();
      x = mode_center(c, task);
      x[0] += length * std::cos(angle);
      x[1] += length * std::sin(angle);
    } else {
      const int other = (c + 1 + rng.uniform_int(0, task.num_modes - 2)) % task.num_modes;
      x = sample_clean(other, task, rng);
    }
    if (is_defect(x, c, task) || !follows_instruction(x, c, task)) return x;
  }
  throw Error("corrupt_sample: could not produce a defective sample for this task");
}

OfflineDataset gen_offline_dataset(int n_pos, int n_neg, const TaskSpec& task, Rng& rng) {
  if (n_pos < 0 || n_neg < 0) throw std::invalid_argument("gen_offline_dataset: counts must be >= 0");
  OfflineDataset out;
  for (int i = 0; i < n_pos; ++i) {
    const int c = rng.uniform_int(0, task.num_modes - 1);
    out.records.push_back({c, sample_clean(c, task, rng), AnchorLabel::chosen_anchor});
  }
  for (int i = 0; i < n_neg; ++i) {
    const int c = rng.uniform_int(0, task.num_modes - 1);
    out.records.push_back({c, corrupt_sample(c, task, rng), AnchorLabel::rejected_anchor});
  }
  for (int i = 0; i < n_pos; ++i) {
    const int c = rng.uniform_int(0, task.num_modes - 1);
    Tensor rejected = corrupt_sample(c, task, rng);
    Tensor chosen = sample_clean(c, task, rng);
    for (int attempt = 0; quality(chosen, c, task) <= quality(rejected, c, task); ++attempt) {
      if (attempt > 1000) throw Error("gen_offline_dataset: chosen sample never beat the rejected one");
      chosen = sample_clean(c, task, rng);
    }
    out.pairs.push_back({c, std::move(chosen), std::move(rejected), apo::PairSource::offline});
  }
  return out;
}

EvalReport score_samples(const Tensor& samples, const std::vector<int>& conditions, const TaskSpec& task) {
  const std::size_t n = conditions.size();
  if (n == 0 || samples.rank() != 2 || samples.dim(0) != n || samples.dim(1) != 2) {
    throw ShapeError("score_samples", "expected n x 2 samples matching the conditions");
  }
  std::size_t defects = 0, follows = 0;
  double q = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor x = Tensor::vector({samples.at(i, 0), samples.at(i, 1)});
    defects += is_defect(x, conditions[i], task) ? 1 : 0;
    follows += follows_instruction(x, conditions[i], task) ? 1 : 0;
    q += quality(x, conditions[i], task);
  }
  const auto dn = static_cast<double>(n);
  return EvalReport{static_cast<double>(defects) / dn, static_cast<double>(follows) / dn, q / dn, 0};
}

EvalReport evaluate(const diffusion::Denoiser& model, const diffusion::NoiseSchedule& sched,
                    const diffusion::InferenceGrid& grid, const std::optional<diffusion::GuidanceConfig>& guidance,
                    const TaskSpec& task, int n_eval, std::uint64_t seed) {
  if (n_eval < 1) throw std::invalid_argument("evaluate: n_eval must be >= 1");
  std::vector<int> conditions(static_cast<std::size_t>(n_eval));
  for (int i = 0; i < n_eval; ++i) conditions[static_cast<std::size_t>(i)] = i % task.num_modes;
  const auto result = diffusion::sample_reverse(model, conditions, grid, sched, guidance, seed);
  EvalReport report = score_samples(result.x0, conditions, task);
  report.nfe_per_sample = result.nfe;
  return report;
}

// ---------------------------------------------------------------------------
// TSV files

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  return out;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, '\t')) fields.push_back(field);
  return fields;
}

double parse_double(const std::string& s, const std::string& path, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(path + ":" + std::to_string(line) + ": bad number '" + s + "'");
  }
}

int parse_int(const std::string& s, const std::string& path, std::size_t line) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(path + ":" + std::to_string(line) + ": bad integer '" + s + "'");
  }
}

template <typename RowFn>
void read_tsv(const std::string& path, const char* header, std::size_t fields, RowFn&& row) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != header) throw Error(path + ":1: unexpected header");
  std::size_t number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    const auto parts = split_tabs(line);
    if (parts.size() != fields) throw Error(path + ":" + std::to_string(number) + ": expected " +
                                            std::to_string(fields) + " fields");
    row(parts, number);
  }
}

}  // namespace

void write_records_tsv(const std::string& path, const std::vector<OfflineRecord>& records) {
  auto out = open_out(path);
  out << kRecordsHeader << '\n';
  for (const auto& r : records) {
    out << r.condition << '\t' << fmt(r.sample[0]) << '\t' << fmt(r.sample[1]) << '\t'
        << (r.label == AnchorLabel::chosen_anchor ? 'P' : 'N') << '\n';
  }
  if (!out) throw Error("failed writing '" + path + "'");
}

std::vector<OfflineRecord> read_records_tsv(const std::string& path) {
  std::vector<OfflineRecord> records;
  read_tsv(path, kRecordsHeader, 4, [&](const std::vector<std::string>& f, std::size_t line) {
    if (f[3] != "P" && f[3] != "N") throw Error(path + ":" + std::to_string(line) + ": label must be P or N");
    records.push_back({parse_int(f[0], path, line),
                       Tensor::vector({parse_double(f[1], path, line), parse_double(f[2], path, line)}),
                       f[3] == "P" ? AnchorLabel::chosen_anchor : AnchorLabel::rejected_anchor});
  });
  return records;
}

void write_pairs_tsv(const std::string& path, const std::vector<apo::PreferencePair>& pairs) {
  auto out = open_out(path);
  out << kPairsHeader << '\n';
  for (const auto& p : pairs) {
    out << p.condition << '\t' << fmt(p.chosen[0]) << '\t' << fmt(p.chosen[1]) << '\t' << fmt(p.rejected[0]) << '\t'
        << fmt(p.rejected[1]) << '\t' << apo::pair_source_tag(p.source) << '\n';
  }
  if (!out) throw Error("failed writing '" + path + "'");
}

std::vector<apo::PreferencePair> read_pairs_tsv(const std::string& path) {
  std::vector<apo::PreferencePair> pairs;
  read_tsv(path, kPairsHeader, 6, [&](const std::vector<std::string>& f, std::size_t line) {
    apo::PairSource source;
    try {
      source = apo::pair_source_from_tag(f[5]);
    } catch (const std::invalid_argument&) {
      throw Error(path + ":" + std::to_string(line) + ": unknown source '" + f[5] + "'");
    }
    pairs.push_back({parse_int(f[0], path, line),
                     Tensor::vector({parse_double(f[1], path, line), parse_double(f[2], path, line)}),
                     Tensor::vector({parse_double(f[3], path, line), parse_double(f[4], path, line)}), source});
  });
  return pairs;
}

}  // namespace diffapo::synth
