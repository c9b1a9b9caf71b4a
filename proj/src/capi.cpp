// Copyright 2026 The diffapo Authors
// SPDX-License-Identifier: Apache-2.0

#include "diffapo/diffapo.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include "diffapo/checkpoint.hpp"
#include "diffapo/config.hpp"
#include "diffapo/pipeline.hpp"
#include "diffapo/report.hpp"
#include "json.hpp"

struct dapo_config {
  diffapo::RunConfig cfg;
};

struct dapo_model {
  std::unique_ptr<diffapo::diffusion::Denoiser> net;
};

namespace {

namespace fs = std::filesystem;
using diffapo::pipeline::Stage;

thread_local std::string g_last_error;

class StatusError : public std::runtime_error {
 public:
  StatusError(dapo_status status, const std::string& msg) : std::runtime_error(msg), status_(status) {}
  dapo_status status() const noexcept { return status_; }

 private:
  dapo_status status_;
};

template <typename Fn>
dapo_status guarded(Fn&& fn) {
  g_last_error.clear();
  try {
    fn();
    return DAPO_OK;
  } catch (const StatusError& e) {
    g_last_error = e.what();
    return e.status();
  } catch (const diffapo::NonFiniteError& e) {
    g_last_error = e.what();
    return DAPO_ERR_NON_FINITE;
  } catch (const diffapo::CheckpointError& e) {
    g_last_error = e.what();
    return DAPO_ERR_CHECKPOINT;
  } catch (const diffapo::report::CsvError& e) {
    g_last_error = e.what();
    return DAPO_ERR_CSV;
  } catch (const diffapo::ConfigError& e) {
    g_last_error = e.what();
    return DAPO_ERR_CONFIG;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return DAPO_ERR_FAILURE;
  } catch (...) {
    g_last_error = "unknown error";
    return DAPO_ERR_FAILURE;
  }
}

void require(bool ok, const char* what) {
  if (!ok) throw StatusError(DAPO_ERR_ARGUMENT, what);
}

// Creates `dir` if needed and checks that files can be created in it.
void ensure_writable(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw StatusError(DAPO_ERR_UNWRITABLE, "cannot create output directory '" + dir.string() + "'");
  }
  const fs::path probe = dir / ".diffapo_write_probe";
  {
    std::ofstream out(probe, std::ios::trunc);
    if (!out) throw StatusError(DAPO_ERR_UNWRITABLE, "output directory '" + dir.string() + "' is not writable");
  }
  fs::remove(probe, ec);
}

void copy_out(const std::string& s, char* buf, size_t cap, size_t* needed) {
  if (needed) *needed = s.size() + 1;
  if (buf && cap > 0) {
    const size_t n = std::min(cap - 1, s.size());
    std::memcpy(buf, s.data(), n);
    buf[n] = '\0';
    if (cap < s.size() + 1) throw StatusError(DAPO_ERR_ARGUMENT, "buffer too small");
  }
}

std::string checkpoint_path(const fs::path& out, Stage stage) {
  return (out / (diffapo::pipeline::stage_name(stage) + ".apockpt")).string();
}

void load_offline_data(diffapo::pipeline::Pipeline& p, const fs::path& out) {
  const fs::path records = out / "records.tsv";
  const fs::path pairs = out / "pairs.tsv";
  if (!fs::exists(records) || !fs::exists(pairs)) return;
  diffapo::synth::OfflineDataset data;
  data.records = diffapo::synth::read_records_tsv(records.string());
  data.pairs = diffapo::synth::read_pairs_tsv(pairs.string());
  p.set_dataset(std::move(data));
}

bool is_student_checkpoint(const fs::path& path) {
  const std::string stem = path.stem().string();
  return stem == "distill" || stem == "distill_aware";
}

}  // namespace

extern "C" {

const char* dapo_last_error(void) { return g_last_error.c_str(); }

const char* dapo_status_name(dapo_status status) {
  switch (status) {
    case DAPO_OK: return "ok";
    case DAPO_ERR_FAILURE: return "failure";
    case DAPO_ERR_UNWRITABLE: return "unwritable path";
    case DAPO_ERR_MISSING_STAGE: return "missing prerequisite stage";
    case DAPO_ERR_NON_FINITE: return "non-finite abort";
    case DAPO_ERR_CHECKPOINT: return "bad checkpoint";
    case DAPO_ERR_CSV: return "bad csv";
    case DAPO_ERR_CONFIG: return "invalid config";
    case DAPO_ERR_ARGUMENT: return "invalid argument";
  }
  return "unknown";
}

const char* dapo_version(void) { return "0.1.0"; }

dapo_status dapo_config_default(dapo_config** out) {
  return guarded([&] {
    require(out != nullptr, "dapo_config_default: out is null");
    *out = new dapo_config{};
  });
}

dapo_status dapo_config_load(const char* path, dapo_config** out) {
  return guarded([&] {
    require(path && out, "dapo_config_load: null argument");
    *out = nullptr;
    auto cfg = std::make_unique<dapo_config>(dapo_config{diffapo::load_config(path)});
    *out = cfg.release();
  });
}

dapo_status dapo_config_parse(const char* json, dapo_config** out) {
  return guarded([&] {
    require(json && out, "dapo_config_parse: null argument");
    *out = nullptr;
    auto cfg = std::make_unique<dapo_config>(dapo_config{diffapo::parse_config(json)});
    *out = cfg.release();
  });
}

void dapo_config_free(dapo_config* cfg) { delete cfg; }

dapo_status dapo_config_set_seed(dapo_config* cfg, uint64_t seed) {
  return guarded([&] {
    require(cfg != nullptr, "dapo_config_set_seed: null config");
    cfg->cfg.seed = seed;
  });
}

dapo_status dapo_config_set_output_dir(dapo_config* cfg, const char* dir) {
  return guarded([&] {
    require(cfg && dir && *dir, "dapo_config_set_output_dir: empty argument");
    cfg->cfg.output_dir = dir;
  });
}

dapo_status dapo_config_output_dir(const dapo_config* cfg, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    require(cfg != nullptr, "dapo_config_output_dir: null config");
    copy_out(cfg->cfg.output_dir, buf, cap, needed);
  });
}

dapo_status dapo_config_hash(const dapo_config* cfg, char* buf, size_t cap) {
  return guarded([&] {
    require(cfg && buf && cap >= 17, "dapo_config_hash: need a 17-byte buffer");
    copy_out(diffapo::config_hash_hex(cfg->cfg), buf, cap, nullptr);
  });
}

dapo_status dapo_config_to_json(const dapo_config* cfg, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    require(cfg != nullptr, "dapo_config_to_json: null config");
    copy_out(diffapo::config_to_json(cfg->cfg), buf, cap, needed);
  });
}

dapo_status dapo_gen_data(const dapo_config* cfg, size_t* n_records, size_t* n_pairs) {
  return guarded([&] {
    require(cfg != nullptr, "dapo_gen_data: null config");
    const fs::path out = cfg->cfg.output_dir;
    ensure_writable(out);
    const auto data = diffapo::pipeline::generate_dataset(cfg->cfg);
    diffapo::synth::write_records_tsv((out / "records.tsv").string(), data.records);
    diffapo::synth::write_pairs_tsv((out / "pairs.tsv").string(), data.pairs);
    if (n_records) *n_records = data.records.size();
    if (n_pairs) *n_pairs = data.pairs.size();
  });
}

dapo_status dapo_run(const dapo_config* cfg, const char* stage) {
  return guarded([&] {
    require(cfg != nullptr, "dapo_run: null config");
    const diffapo::RunConfig& rc = cfg->cfg;
    const fs::path out = rc.output_dir;

    if (stage == nullptr) {
      ensure_writable(out);
      diffapo::pipeline::Pipeline p(rc);
      load_offline_data(p, out);
      p.run_all(out.string());
      return;
    }

    const auto which = diffapo::pipeline::stage_from_name(stage);
    if (!which) throw StatusError(DAPO_ERR_ARGUMENT, std::string("unknown stage '") + stage + "'");
    const auto prev = diffapo::pipeline::previous_stage(*which);
    diffapo::nd::ParamSet start;
    if (prev) {
      const std::string path = checkpoint_path(out, *prev);
      if (!fs::exists(path)) {
        throw StatusError(DAPO_ERR_MISSING_STAGE, "stage " + std::string(stage) + " needs the " +
                                                      diffapo::pipeline::stage_name(*prev) + " checkpoint '" + path +
                                                      "'; run stage " + diffapo::pipeline::stage_name(*prev) +
                                                      " first");
      }
      start = diffapo::nd::load_checkpoint(path);
    }
    ensure_writable(out);
    diffapo::pipeline::Pipeline p(rc);
    if (prev) p.load_model(std::move(start), *prev);
    load_offline_data(p, out);
    p.run_stage(*which);
    diffapo::nd::save_checkpoint(p.model().params(), checkpoint_path(out, *which));
    p.metrics().write_csv((out / ("metrics_" + std::string(stage) + ".csv")).string());
  });
}

dapo_status dapo_eval(const dapo_config* cfg, const char* checkpoint, dapo_eval_report* report) {
  return guarded([&] {
    require(cfg && checkpoint, "dapo_eval: null argument");
    const diffapo::RunConfig& rc = cfg->cfg;
    const auto sched = diffapo::diffusion::NoiseSchedule::linear(rc.T);
    const auto grid = diffapo::diffusion::build_inference_grid(rc.eval.grid_steps, rc.eval.deployment_shift, rc.T);
    auto params = diffapo::nd::load_checkpoint(checkpoint);
    const bool stub = params.find(diffapo::diffusion::PointMassDenoiser::kEntryName).has_value();
    const auto net = diffapo::diffusion::load_denoiser(std::move(params), sched, rc.model.skip_layer);
    std::optional<diffapo::diffusion::GuidanceConfig> guidance;
    if (!stub && !is_student_checkpoint(checkpoint)) guidance = rc.eval.guidance;
    const auto r = diffapo::synth::evaluate(*net, sched, grid, guidance, rc.task, rc.eval.n_eval,
                                            diffapo::derive_seed(rc.seed, "eval"));

    const fs::path out = rc.output_dir;
    ensure_writable(out);
    nlohmann::ordered_json j;
    j["checkpoint"] = fs::path(checkpoint).filename().string();
    j["defect_rate"] = r.defect_rate;
    j["follow_rate"] = r.follow_rate;
    j["mean_quality"] = r.mean_quality;
    j["nfe"] = r.nfe_per_sample;
    j["guided"] = guidance.has_value();
    j["config_hash"] = diffapo::config_hash_hex(rc);
    const fs::path json_path = out / (fs::path(checkpoint).filename().string() + ".eval.json");
    std::ofstream f(json_path, std::ios::binary | std::ios::trunc);
    if (!f) throw StatusError(DAPO_ERR_UNWRITABLE, "cannot write '" + json_path.string() + "'");
    f << j.dump(2) << '\n';
    if (report) *report = dapo_eval_report{r.defect_rate, r.follow_rate, r.mean_quality, r.nfe_per_sample};
  });
}

dapo_status dapo_report(const char* const* csv_paths, size_t n_paths, const char* out_dir) {
  return guarded([&] {
    require(out_dir != nullptr, "dapo_report: null output directory");
    require(n_paths > 0 && csv_paths != nullptr, "dapo_report: at least one CSV is required");
    std::vector<std::string> paths(csv_paths, csv_paths + n_paths);
    for (const auto& p : paths) {
      if (!fs::exists(p)) throw StatusError(DAPO_ERR_FAILURE, "cannot open '" + p + "'");
    }
    ensure_writable(out_dir);
    diffapo::report::write_reports(paths, out_dir);
  });
}

dapo_status dapo_model_load(const char* path, dapo_model** out) {
  return guarded([&] {
    require(path && out, "dapo_model_load: null argument");
    *out = nullptr;
    auto params = diffapo::nd::load_checkpoint(path);
    auto m = std::make_unique<dapo_model>();
    m->net = diffapo::diffusion::load_denoiser(std::move(params), diffapo::diffusion::NoiseSchedule::linear(1000));
    *out = m.release();
  });
}

dapo_status dapo_model_save(const dapo_model* model, const char* path) {
  return guarded([&] {
    require(model && path, "dapo_model_save: null argument");
    diffapo::nd::save_checkpoint(model->net->params(), path);
  });
}

void dapo_model_free(dapo_model* model) { delete model; }

dapo_status dapo_model_parameter_count(const dapo_model* model, size_t* count) {
  return guarded([&] {
    require(model && count, "dapo_model_parameter_count: null argument");
    *count = model->net->params().parameter_count();
  });
}

dapo_status dapo_model_predict(const dapo_model* model, const double* x_t, const int* t, const int* c, size_t rows,
                               double* out) {
  return guarded([&] {
    require(model && x_t && t && c && out && rows > 0, "dapo_model_predict: null argument");
    diffapo::diffusion::Batch b;
    b.x_t = diffapo::nd::Tensor({rows, 2}, std::vector<double>(x_t, x_t + 2 * rows));
    b.t.assign(t, t + rows);
    b.c.assign(c, c + rows);
    const auto eps = model->net->predict(b);
    std::memcpy(out, eps.data().data(), eps.size() * sizeof(double));
  });
}

}  // extern "C"
