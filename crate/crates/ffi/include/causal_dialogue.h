#ifndef CAUSAL_DIALOGUE_H
#define CAUSAL_DIALOGUE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CfdlgStatus {
  CFDLG_STATUS_OK = 0,
  CFDLG_STATUS_NULL_POINTER = 1,
  CFDLG_STATUS_INVALID_UTF8 = 2,
  CFDLG_STATUS_CONFIG = 3,
  CFDLG_STATUS_IO = 4,
  CFDLG_STATUS_FORMAT = 5,
  CFDLG_STATUS_DIMENSION = 6,
  CFDLG_STATUS_STAGE = 7,
  CFDLG_STATUS_NUMERIC = 8,
  CFDLG_STATUS_OTHER = 9,
  CFDLG_STATUS_PANIC = 10,
} CfdlgStatus;

// Opaque pipeline configuration.
typedef struct CfdlgConfig CfdlgConfig;

// Opaque trained reward model.
typedef struct CfdlgReward CfdlgReward;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *cfdlg_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *cfdlg_version(void);

// Default configuration. Free with `cfdlg_config_free`.
//
// # Safety
// `out` must be a valid pointer.
enum CfdlgStatus cfdlg_config_new(struct CfdlgConfig **out);

// Configuration read from an INI file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CfdlgStatus cfdlg_config_from_file(const char *path, struct CfdlgConfig **out);

// Sets one config key, using the CLI flag names.
//
// # Safety
// `config` must come from this library; `key` and `value` must be
// NUL-terminated strings.
enum CfdlgStatus cfdlg_config_set(struct CfdlgConfig *config, const char *key, const char *value);

// # Safety
// `config` must come from this library or be null; it is invalid afterwards.
void cfdlg_config_free(struct CfdlgConfig *config);

// Runs one named stage. `skipped` (may be null) receives 1 when the stage
// was already complete.
//
// # Safety
// `config` must come from this library and `stage` be a NUL-terminated string.
enum CfdlgStatus cfdlg_run_stage(const struct CfdlgConfig *config,
                                 const char *stage,
                                 int32_t *skipped);

// Runs every stage. `ground_truth` (may be null) receives the final
// cumulative predicted donation of the corpus dialogues.
//
// # Safety
// `config` must come from this library.
enum CfdlgStatus cfdlg_run_pipeline(const struct CfdlgConfig *config, double *ground_truth);

// Loads a reward model checkpoint. Free with `cfdlg_reward_free`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum CfdlgStatus cfdlg_reward_load(const char *path, struct CfdlgReward **out);

// Embedding dimension the reward model expects.
//
// # Safety
// `model` must come from this library and `dim` be a valid pointer.
enum CfdlgStatus cfdlg_reward_input_dim(const struct CfdlgReward *model, uintptr_t *dim);

// Predicted donation of a dialogue given as `n_utterances` row-major
// embeddings of width `dim`.
//
// # Safety
// `embeddings` must point to `n_utterances * dim` floats and `out` be a
// valid pointer.
enum CfdlgStatus cfdlg_reward_predict(const struct CfdlgReward *model,
                                      const float *embeddings,
                                      uintptr_t n_utterances,
                                      uintptr_t dim,
                                      double *out);

// # Safety
// `model` must come from this library or be null; it is invalid afterwards.
void cfdlg_reward_free(struct CfdlgReward *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAUSAL_DIALOGUE_H */
