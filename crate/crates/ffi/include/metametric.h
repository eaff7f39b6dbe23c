#ifndef METAMETRIC_H
#define METAMETRIC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call. Values match the command-line exit codes where the
// failure classes coincide.
typedef enum MmStatus {
  MM_STATUS_OK = 0,
  MM_STATUS_INVALID_ARGUMENT = 1,
  MM_STATUS_CONFIG = 2,
  MM_STATUS_DATA = 3,
  MM_STATUS_NON_FINITE = 4,
  MM_STATUS_IO = 5,
  MM_STATUS_CHECKPOINT = 6,
  MM_STATUS_PANIC = 7,
} MmStatus;

// A meta-trained learner: Θ plus the current learner parameters, which
// start as `c0` and are replaced by [`mm_model_adapt`].
typedef struct MmModel MmModel;

// A list of tasks loaded from a data directory.
typedef struct MmTasks MmTasks;

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *mm_last_error(void);

// Library version as a static string.
const char *mm_version(void);

// Loads a checkpoint written by `metametric train`.
//
// # Safety
// `path` must be a nul-terminated string and `out` a writable pointer.
enum MmStatus mm_model_load(const char *path, struct MmModel **out);

// # Safety
// `model` must come from [`mm_model_load`] and not be used afterwards.
void mm_model_free(struct MmModel *model);

// Feature length the model expects.
//
// # Safety
// `model` must be a live handle.
enum MmStatus mm_model_input_dim(const struct MmModel *model, size_t *out);

// Number of learner parameters.
//
// # Safety
// `model` must be a live handle.
enum MmStatus mm_model_param_count(const struct MmModel *model, size_t *out);

// Copies the current learner parameters into `out[0..len]`.
//
// # Safety
// `out` must hold `len` values and `len` must equal the parameter count.
enum MmStatus mm_model_params(const struct MmModel *model, double *out, size_t len);

// Restores the learner parameters to the meta-learned `c0`.
//
// # Safety
// `model` must be a live handle.
enum MmStatus mm_model_reset(struct MmModel *model);

// Runs `steps` meta-learner updates from `c0` on `n` labelled examples and
// keeps the result as the model's learner parameters. Each class needs at
// least two examples; they are split in half per class into the train and
// test roles.
//
// # Safety
// `features` must hold `n * input_dim` values and `labels` `n` values.
enum MmStatus mm_model_adapt(struct MmModel *model,
                             const double *features,
                             const uint32_t *labels,
                             size_t n,
                             size_t steps,
                             size_t shots,
                             uint64_t seed);

// Class probabilities for `n_query` queries given a labelled support set.
// `out` receives `n_query * n_classes` values, one row per query.
//
// # Safety
// Feature buffers must hold `count * input_dim` values, `support_labels`
// `n_support` values and `out` `n_query * n_classes` values.
enum MmStatus mm_model_predict(const struct MmModel *model,
                               const double *support_features,
                               const uint32_t *support_labels,
                               size_t n_support,
                               size_t n_classes,
                               const double *query_features,
                               size_t n_query,
                               double *out);

// Loads every task under a `metametric gen` data directory.
//
// # Safety
// `dir` must be a nul-terminated string and `out` a writable pointer.
enum MmStatus mm_tasks_load(const char *dir, struct MmTasks **out);

// # Safety
// `tasks` must come from [`mm_tasks_load`] and not be used afterwards.
void mm_tasks_free(struct MmTasks *tasks);

// # Safety
// `tasks` must be a live handle.
enum MmStatus mm_tasks_count(const struct MmTasks *tasks, size_t *out);

// Mean accuracy of the model's current parameters on `episodes` sampled
// `n_way`-way `shots`-shot episodes of task `index` (0 for `n_way` uses
// every class).
//
// # Safety
// Both handles must be live.
enum MmStatus mm_tasks_evaluate(const struct MmTasks *tasks,
                                size_t index,
                                const struct MmModel *model,
                                size_t shots,
                                size_t queries_per_class,
                                size_t n_way,
                                size_t episodes,
                                uint64_t seed,
                                double *out);

#endif  /* METAMETRIC_H */
