#ifndef VTA_H
#define VTA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VtaStatus {
  VTA_STATUS_OK = 0,
  VTA_STATUS_NULL_POINTER = 1,
  VTA_STATUS_INVALID_ARGUMENT = 2,
  VTA_STATUS_IO = 3,
  VTA_STATUS_CORRUPT = 4,
  VTA_STATUS_CONFIG = 5,
  VTA_STATUS_NON_FINITE = 6,
  VTA_STATUS_PANIC = 7,
} VtaStatus;

typedef enum VtaEnvKind {
  VTA_ENV_KIND_BALLS = 0,
  VTA_ENV_KIND_MAZE = 1,
} VtaEnvKind;

typedef enum VtaMode {
  VTA_MODE_HRSSM = 0,
  VTA_MODE_RSSM = 1,
} VtaMode;

// Opaque dataset handle.
typedef struct VtaDataset VtaDataset;

// Opaque model handle: parameters plus the training configuration.
typedef struct VtaModel VtaModel;

typedef struct VtaDatasetInfo {
  size_t count;
  size_t steps;
  size_t height;
  size_t width;
  size_t channels;
  bool has_actions;
  bool has_goals;
  bool has_events;
  // Mean event flag; negative without events.
  double event_rate;
} VtaDatasetInfo;

typedef struct VtaModelInfo {
  enum VtaMode mode;
  size_t image_size;
  size_t channels;
  size_t num_actions;
  // Modelled frames per sequence.
  size_t seq_len;
  // Leading context frames per stored sequence.
  size_t context_len;
  // Optimiser steps taken.
  size_t step;
} VtaModelInfo;

// Per-frame ELBO terms in nats.
typedef struct VtaElbo {
  double total;
  double reconstruction;
  double kl_boundary;
  double kl_z;
  double kl_s;
} VtaElbo;

typedef struct VtaEpisode {
  uint32_t reward;
  bool reached;
  uint32_t steps;
  double transitions_per_candidate;
} VtaEpisode;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *vta_last_error(void);

// Library version, a static NUL-terminated string.
const char *vta_version(void);

// Generates `count` sequences of `steps` frames with the built-in generators.
//
// # Safety
// `out` must be a valid pointer to writable storage for a handle.
enum VtaStatus vta_dataset_generate(enum VtaEnvKind kind,
                                    size_t count,
                                    size_t steps,
                                    uint64_t seed,
                                    struct VtaDataset **out);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum VtaStatus vta_dataset_read(const char *path, struct VtaDataset **out);

// # Safety
// `ds` must be a live handle and `path` a NUL-terminated string.
enum VtaStatus vta_dataset_write(const struct VtaDataset *ds, const char *path);

// # Safety
// `ds` must be a live handle and `out` writable.
enum VtaStatus vta_dataset_info(const struct VtaDataset *ds, struct VtaDatasetInfo *out);

// Copies frame `t` of sequence `seq` (`height * width * channels` bytes,
// row-major, channel last) into `buf`.
//
// # Safety
// `ds` must be a live handle and `buf` valid for `len` bytes.
enum VtaStatus vta_dataset_frame(const struct VtaDataset *ds,
                                 size_t seq,
                                 size_t t,
                                 uint8_t *buf,
                                 size_t len);

// # Safety
// `ds` must be null or a handle not yet freed.
void vta_dataset_free(struct VtaDataset *ds);

// Loads a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum VtaStatus vta_model_load(const char *path, struct VtaModel **out);

// Trains a model on `ds`. `config_text` holds `key=value` lines applied
// over the defaults (may be null). Checkpoints and metrics go to `out_dir`.
//
// # Safety
// `ds` must be a live handle, the strings NUL-terminated, `out` writable.
enum VtaStatus vta_model_train(const struct VtaDataset *ds,
                               const char *config_text,
                               const char *out_dir,
                               struct VtaModel **out);

// Writes the model as a checkpoint file.
//
// # Safety
// `m` must be a live handle and `path` a NUL-terminated string.
enum VtaStatus vta_model_save(const struct VtaModel *m, const char *path);

// # Safety
// `m` must be a live handle and `out` writable.
enum VtaStatus vta_model_info(const struct VtaModel *m, struct VtaModelInfo *out);

// Mean per-frame ELBO terms over the first `max_sequences` sequences.
//
// # Safety
// `m` and `ds` must be live handles and `out` writable.
enum VtaStatus vta_model_eval_elbo(const struct VtaModel *m,
                                   const struct VtaDataset *ds,
                                   size_t max_sequences,
                                   uint64_t seed,
                                   struct VtaElbo *out);

// Boundary indicators of sequence `seq` at the posterior mode, one byte
// per modelled step (`seq_len` bytes); 1 marks the last step of a
// subsequence.
//
// # Safety
// `m` and `ds` must be live handles and `indicators` valid for `len` bytes.
enum VtaStatus vta_model_segment(const struct VtaModel *m,
                                 const struct VtaDataset *ds,
                                 size_t seq,
                                 uint8_t *indicators,
                                 size_t len);

// One navigation episode on the built-in maze with imagination length
// `l_img`; start and goal are drawn from `seed`.
//
// # Safety
// `m` must be a live handle and `out` writable.
enum VtaStatus vta_model_navigate(const struct VtaModel *m,
                                  uint64_t seed,
                                  size_t l_img,
                                  struct VtaEpisode *out);

// # Safety
// `m` must be null or a handle not yet freed.
void vta_model_free(struct VtaModel *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VTA_H */
