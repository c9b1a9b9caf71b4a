/* Copyright 2026 The diffapo Authors
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the diffapo library. Every function returns a dapo_status;
 * on failure dapo_last_error() describes what went wrong (per thread, valid
 * until the next call on that thread). Handles are opaque and owned by the
 * caller, who releases them with the matching *_free function.
 */

#ifndef DIFFAPO_DIFFAPO_H_
#define DIFFAPO_DIFFAPO_H_

#include <stddef.h>
#include <stdint.h>

#if defined(DIFFAPO_BUILDING)
#define DAPO_API __attribute__((visibility("default")))
#else
#define DAPO_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Values 0-6 double as command-line exit codes. */
typedef enum dapo_status {
  DAPO_OK = 0,
  DAPO_ERR_FAILURE = 1,
  DAPO_ERR_UNWRITABLE = 2,
  DAPO_ERR_MISSING_STAGE = 3,
  DAPO_ERR_NON_FINITE = 4,
  DAPO_ERR_CHECKPOINT = 5,
  DAPO_ERR_CSV = 6,
  DAPO_ERR_CONFIG = 7,
  DAPO_ERR_ARGUMENT = 8
} dapo_status;

typedef struct dapo_config dapo_config;
typedef struct dapo_model dapo_model;

typedef struct dapo_eval_report {
  double defect_rate;
  double follow_rate;
  double mean_quality;
  int nfe; /* model evaluations per sample */
} dapo_eval_report;

DAPO_API const char* dapo_last_error(void);
DAPO_API const char* dapo_status_name(dapo_status status);
DAPO_API const char* dapo_version(void);

/* ---- configuration ---- */

DAPO_API dapo_status dapo_config_default(dapo_config** out);
DAPO_API dapo_status dapo_config_load(const char* path, dapo_config** out);
DAPO_API dapo_status dapo_config_parse(const char* json, dapo_config** out);
DAPO_API void dapo_config_free(dapo_config* cfg);
DAPO_API dapo_status dapo_config_set_seed(dapo_config* cfg, uint64_t seed);
DAPO_API dapo_status dapo_config_set_output_dir(dapo_config* cfg, const char* dir);
/* Copies the output directory (NUL-terminated) into buf. *needed receives the
 * required size including the terminator. */
DAPO_API dapo_status dapo_config_output_dir(const dapo_config* cfg, char* buf, size_t cap, size_t* needed);
/* 16 lowercase hex digits plus NUL; cap must be >= 17. */
DAPO_API dapo_status dapo_config_hash(const dapo_config* cfg, char* buf, size_t cap);
/* Canonical JSON of the effective configuration. */
DAPO_API dapo_status dapo_config_to_json(const dapo_config* cfg, char* buf, size_t cap, size_t* needed);

/* ---- commands ---- */

/* Writes <out>/records.tsv and <out>/pairs.tsv. */
DAPO_API dapo_status dapo_gen_data(const dapo_config* cfg, size_t* n_records, size_t* n_pairs);

/* Runs one stage by name, or every stage when stage is NULL. A single stage
 * after pretrain starts from <out>/<previous>.apockpt. Writes
 * <out>/<stage>.apockpt per stage and <out>/metrics.csv (all stages) or
 * <out>/metrics_<stage>.csv (one stage). Offline data comes from
 * <out>/records.tsv and <out>/pairs.tsv when both exist. */
DAPO_API dapo_status dapo_run(const dapo_config* cfg, const char* stage);

/* Evaluates a checkpoint and writes <out>/<checkpoint name>.eval.json.
 * Guidance is applied unless the checkpoint is a distilled student
 * (distill*.apockpt) or a point-mass stub. */
DAPO_API dapo_status dapo_eval(const dapo_config* cfg, const char* checkpoint, dapo_eval_report* report);

/* Writes loss.svg, defect_rate.svg and comparison.svg into out_dir. */
DAPO_API dapo_status dapo_report(const char* const* csv_paths, size_t n_paths, const char* out_dir);

/* ---- models ---- */

DAPO_API dapo_status dapo_model_load(const char* path, dapo_model** out);
DAPO_API dapo_status dapo_model_save(const dapo_model* model, const char* path);
DAPO_API void dapo_model_free(dapo_model* model);
DAPO_API dapo_status dapo_model_parameter_count(const dapo_model* model, size_t* count);
/* Unguided noise prediction for `rows` queries; x_t and out are rows x 2. */
DAPO_API dapo_status dapo_model_predict(const dapo_model* model, const double* x_t, const int* t, const int* c,
                                        size_t rows, double* out);

#ifdef __cplusplus
}
#endif

#endif /* DIFFAPO_DIFFAPO_H_ */
