#ifndef ESPPCT_H
#define ESPPCT_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum {
  ESP_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  ESP_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  ESP_STATUS_INVALID_UTF8 = 2,
  /**
   * Invalid configuration or argument value.
   */
  ESP_STATUS_INVALID_CONFIG = 3,
  /**
   * File, format or dataset problem.
   */
  ESP_STATUS_DATA = 4,
  /**
   * Non-finite values or a failed numeric check.
   */
  ESP_STATUS_NUMERIC = 5,
  /**
   * A panic was caught at the boundary.
   */
  ESP_STATUS_INTERNAL = 6,
} EspStatus;

/**
 * A trained model.
 */
typedef struct EspModel EspModel;

/**
 * A point-cloud sequence.
 */
typedef struct EspSequence EspSequence;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call into the library from the same thread.
 */
const char *esp_last_error(void);

/**
 * Creates an empty, unlabeled sequence.
 *
 * # Safety
 * `out_seq` must be a valid pointer.
 */
EspStatus esp_sequence_new(EspSequence **out_seq);

/**
 * Reads a sequence file.
 *
 * # Safety
 * `path` is a NUL-terminated string and `out_seq` a valid pointer.
 */
EspStatus esp_sequence_load(const char *path, EspSequence **out_seq);

/**
 * Writes a sequence file.
 *
 * # Safety
 * `seq` comes from this library; `path` is a NUL-terminated string.
 */
EspStatus esp_sequence_write(const EspSequence *seq, const char *path);

/**
 * Appends a frame of `n_points` points. `points` holds `5 * n_points`
 * doubles, each point as x, y, z, velocity, intensity. Timestamps must
 * strictly increase across frames.
 *
 * # Safety
 * `seq` comes from this library; `points` is readable for `5 * n_points`
 * doubles (it may be null when `n_points` is 0).
 */
EspStatus esp_sequence_push_frame(EspSequence *seq,
                                  uint64_t timestamp,
                                  const double *points,
                                  size_t n_points);

/**
 * # Safety
 * `seq` comes from this library; `out_count` is a valid pointer.
 */
EspStatus esp_sequence_frame_count(const EspSequence *seq, size_t *out_count);

/**
 * # Safety
 * `seq` comes from this library; `out_count` is a valid pointer.
 */
EspStatus esp_sequence_point_count(const EspSequence *seq, size_t frame, size_t *out_count);

/**
 * # Safety
 * `seq` is null or comes from this library and is not used afterwards.
 */
void esp_sequence_free(EspSequence *seq);

/**
 * Loads a checkpoint written by `espctl train`.
 *
 * # Safety
 * `path` is a NUL-terminated string and `out_model` a valid pointer.
 */
EspStatus esp_model_load(const char *path, EspModel **out_model);

/**
 * Number of classes the model predicts.
 *
 * # Safety
 * `model` comes from this library; `out_count` is a valid pointer.
 */
EspStatus esp_model_class_count(const EspModel *model, size_t *out_count);

/**
 * Predicted class and its softmax probability. Either output may be null.
 *
 * # Safety
 * `model` and `seq` come from this library; outputs are null or valid.
 */
EspStatus esp_model_classify(const EspModel *model,
                             const EspSequence *seq,
                             uint32_t *out_label,
                             double *out_confidence);

/**
 * # Safety
 * `model` is null or comes from this library and is not used afterwards.
 */
void esp_model_free(EspModel *model);

/**
 * FLOP and parameter counts as JSON for a config (JSON text, or null for
 * the defaults) on input of `frames` × `points`. Release the string with
 * [`esp_string_free`].
 *
 * # Safety
 * `config_json` is null or a NUL-terminated string; `out_json` is valid.
 */
EspStatus esp_cost_report_json(const char *config_json,
                               uint64_t frames,
                               uint64_t points,
                               char **out_json);

/**
 * # Safety
 * `s` is null or a string returned by this library, not yet freed.
 */
void esp_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ESPPCT_H */
