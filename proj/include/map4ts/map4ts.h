#ifndef MAP4TS_H
#define MAP4TS_H

/* C interface to the map4ts forecasting pipeline.
 *
 * Every call returns a map4ts_status. On failure the message of the most
 * recent error on the calling thread is available from map4ts_last_error().
 * Strings returned through char** out-parameters are owned by the caller and
 * released with map4ts_string_free(). */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define MAP4TS_API __declspec(dllexport)
#else
#define MAP4TS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum map4ts_status {
  MAP4TS_OK = 0,
  /* validation */
  MAP4TS_INVALID_ARGUMENT = 1,
  MAP4TS_INVALID_CONFIG,
  MAP4TS_MISSING_COLUMN,
  MAP4TS_UNPARSEABLE_VALUE,
  MAP4TS_NON_MONOTONIC_TIMESTAMPS,
  MAP4TS_FREQUENCY_MISMATCH,
  MAP4TS_EMPTY_SERIES,
  MAP4TS_EMPTY_INPUT,
  MAP4TS_SERIES_TOO_SHORT,
  MAP4TS_CONSTANT_SERIES,
  MAP4TS_LAG_TOO_LARGE,
  MAP4TS_TOO_SHORT,
  MAP4TS_PERIOD_TOO_LARGE,
  MAP4TS_DEGENERATE_GROUPS,
  MAP4TS_TOO_FEW_WINDOWS,
  MAP4TS_UNKNOWN_SCALE,
  MAP4TS_UNKNOWN_DATASET,
  MAP4TS_LENGTH_MISMATCH,
  MAP4TS_DIM_MISMATCH,
  MAP4TS_UNKNOWN_VARIANT,
  MAP4TS_RANK_TOO_LARGE,
  MAP4TS_PROMPT_TOO_LONG,
  MAP4TS_MISSING_ANALYSES,
  MAP4TS_SHAPE_MISMATCH,
  MAP4TS_INVALID_CARD,
  /* runtime */
  MAP4TS_INDEX_MISSING,
  MAP4TS_TOKENIZER_UNAVAILABLE,
  MAP4TS_REMOTE_UNAVAILABLE,
  MAP4TS_RECORDING_DISABLED,
  MAP4TS_NON_FINITE_LOSS,
  MAP4TS_IO_FAILURE,
  MAP4TS_FORMAT_ERROR,
  MAP4TS_INTERNAL
} map4ts_status;

/* 0 for MAP4TS_OK, 1 for validation errors, 2 for runtime failures. */
MAP4TS_API int map4ts_status_category(map4ts_status s);
MAP4TS_API const char* map4ts_status_name(map4ts_status s);
MAP4TS_API const char* map4ts_last_error(void);
MAP4TS_API const char* map4ts_version(void);
MAP4TS_API void map4ts_string_free(char* s);

typedef struct map4ts_config map4ts_config;
typedef struct map4ts_experiment map4ts_experiment;
typedef struct map4ts_table map4ts_table;

/* Configuration documents (JSON). Relative paths resolve against base_dir,
 * or against the file's directory for map4ts_config_load. */
MAP4TS_API map4ts_status map4ts_config_load(const char* path, map4ts_config** out);
MAP4TS_API map4ts_status map4ts_config_parse(const char* json, const char* base_dir, map4ts_config** out);
MAP4TS_API map4ts_status map4ts_config_set_seed(map4ts_config* cfg, uint64_t seed);
MAP4TS_API map4ts_status map4ts_config_set_output_dir(map4ts_config* cfg, const char* dir);
/* Replaces one field by dotted path ("train.epochs", "masks") with a JSON value. */
MAP4TS_API map4ts_status map4ts_config_override(map4ts_config* cfg, const char* key, const char* json_value);
MAP4TS_API map4ts_status map4ts_config_to_json(const map4ts_config* cfg, char** out);
MAP4TS_API void map4ts_config_free(map4ts_config* cfg);

/* Loads every dataset, splits it, builds cluster indexes and prompts. */
MAP4TS_API map4ts_status map4ts_experiment_create(const map4ts_config* cfg, map4ts_experiment** out);
MAP4TS_API void map4ts_experiment_free(map4ts_experiment* e);
/* Notes and warnings gathered so far, newline separated. */
MAP4TS_API map4ts_status map4ts_experiment_log(const map4ts_experiment* e, char** out);
/* JSON summary: per dataset channels, lengths, split bounds, window counts. */
MAP4TS_API map4ts_status map4ts_experiment_summary(const map4ts_experiment* e, char** out);
/* Cluster index with descriptions for one dataset channel. */
MAP4TS_API map4ts_status map4ts_experiment_save_index(const map4ts_experiment* e, const char* dataset,
                                                      size_t channel, const char* index_path,
                                                      const char* prompt_cache_path);
/* JSON lines, one per window: dataset, split, channel, start, texts and token counts. */
MAP4TS_API map4ts_status map4ts_experiment_dump_prompts(const map4ts_experiment* e, const char* path);

/* Trains the configured cell (first mask, variant, encoder) on a dataset.
 * Writes the checkpoint and, when trace_csv is non-null, the loss trace. */
MAP4TS_API map4ts_status map4ts_train(map4ts_experiment* e, const char* dataset, const char* checkpoint_path,
                                      const char* trace_csv);
/* Scores a checkpoint on a dataset's test split; one-row table. */
MAP4TS_API map4ts_status map4ts_eval(map4ts_experiment* e, const char* dataset, const char* checkpoint_path,
                                     map4ts_table** out);
/* Labelled attention matrices for one test window of a checkpoint. */
MAP4TS_API map4ts_status map4ts_attention(map4ts_experiment* e, const char* dataset,
                                          const char* checkpoint_path, size_t test_window, char** out);

typedef enum map4ts_sweep { MAP4TS_SWEEP_PROMPTS = 0, MAP4TS_SWEEP_ALIGN = 1, MAP4TS_SWEEP_ENCODER = 2 } map4ts_sweep;

/* Runs a sweep; when records_path is non-null, one JSON line per cell is written there. */
MAP4TS_API map4ts_status map4ts_sweep_run(map4ts_experiment* e, map4ts_sweep kind, const char* records_path,
                                          map4ts_table** out);
/* targets: comma separated dataset names. */
MAP4TS_API map4ts_status map4ts_zero_shot(map4ts_experiment* e, const char* source, const char* targets,
                                          map4ts_table** out);

/* Result tables. format: "csv", "markdown" or "plot-data". */
MAP4TS_API map4ts_status map4ts_table_read_csv(const char* path, map4ts_table** out);
MAP4TS_API map4ts_status map4ts_table_render(const map4ts_table* t, const char* format, char** out);
MAP4TS_API map4ts_status map4ts_table_emit(const map4ts_table* t, const char* format, const char* path);
MAP4TS_API size_t map4ts_table_rows(const map4ts_table* t);
MAP4TS_API size_t map4ts_table_cols(const map4ts_table* t);
/* Borrowed pointer valid until the table is freed; row SIZE_MAX is the header. */
MAP4TS_API const char* map4ts_table_cell(const map4ts_table* t, size_t row, size_t col);
MAP4TS_API void map4ts_table_free(map4ts_table* t);

#ifdef __cplusplus
}
#endif

#endif
