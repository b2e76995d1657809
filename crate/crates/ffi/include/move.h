#ifndef MOVE_H
#define MOVE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum MoveStatus {
  MOVE_STATUS_OK = 0,
  MOVE_STATUS_NULL_POINTER = 1,
  MOVE_STATUS_INVALID_ARGUMENT = 2,
  MOVE_STATUS_IO = 3,
  MOVE_STATUS_CHECKPOINT = 4,
  MOVE_STATUS_SHAPE = 5,
  MOVE_STATUS_OUT_OF_RANGE = 6,
  MOVE_STATUS_AUDIO_TOO_SHORT = 7,
  MOVE_STATUS_BUFFER_TOO_SMALL = 8,
  MOVE_STATUS_INTERNAL = 9,
} MoveStatus;

/**
 * Opaque mono audio buffer owned by the library.
 */
typedef struct MoveAudio MoveAudio;

/**
 * Opaque loaded checkpoint.
 */
typedef struct MoveModel MoveModel;

/**
 * Shape facts of a loaded model.
 */
typedef struct MoveModelInfo {
  uint32_t latent_dim;
  uint32_t num_instruments;
  uint32_t bins;
  uint32_t frames;
  uint32_t sample_rate;
} MoveModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *move_last_error(void);

/**
 * Loads the checkpoint directory `path` into `*out`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum MoveStatus move_model_load(const char *path, struct MoveModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from `move_model_load` not yet freed.
 */
void move_model_free(struct MoveModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum MoveStatus move_model_info(const struct MoveModel *model, struct MoveModelInfo *out);

/**
 * Posterior mean of one log-magnitude chunk (`frames × bins`, row-major)
 * written to `z_out` (`latent_dim` entries).
 *
 * # Safety
 * `chunk` must hold `chunk_len` floats and `z_out` `z_len` floats.
 */
enum MoveStatus move_model_encode(const struct MoveModel *model,
                                  const float *chunk,
                                  uintptr_t chunk_len,
                                  uint32_t pitch_class,
                                  uint32_t octave,
                                  uint32_t instrument,
                                  float *z_out,
                                  uintptr_t z_len);

/**
 * Decodes latent point `z` into a log-magnitude chunk (`frames × bins`).
 *
 * # Safety
 * `z` must hold `z_len` floats and `out` `out_len` floats.
 */
enum MoveStatus move_model_decode(const struct MoveModel *model,
                                  const float *z,
                                  uintptr_t z_len,
                                  uint32_t pitch_class,
                                  uint32_t octave,
                                  uint32_t instrument,
                                  float *out,
                                  uintptr_t out_len);

/**
 * Transfers mono audio from instrument `source` to `target`, resampling
 * the input if needed. Pitch is tracked from the audio.
 *
 * # Safety
 * `samples` must hold `len` floats and `out` must be a valid pointer.
 */
enum MoveStatus move_transfer(const struct MoveModel *model,
                              const float *samples,
                              uintptr_t len,
                              uint32_t sample_rate,
                              uint32_t source,
                              uint32_t target,
                              uint32_t gl_iterations,
                              struct MoveAudio **out);

/**
 * Number of samples in `audio`, 0 for null.
 *
 * # Safety
 * `audio` must be null or a live handle.
 */
uintptr_t move_audio_len(const struct MoveAudio *audio);

/**
 * Sample rate of `audio`, 0 for null.
 *
 * # Safety
 * `audio` must be null or a live handle.
 */
uint32_t move_audio_sample_rate(const struct MoveAudio *audio);

/**
 * Borrowed view of the samples, valid until `move_audio_free`.
 *
 * # Safety
 * `audio` must be null or a live handle.
 */
const float *move_audio_data(const struct MoveAudio *audio);

/**
 * # Safety
 * `audio` must be null or a handle from `move_transfer` not yet freed.
 */
void move_audio_free(struct MoveAudio *audio);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOVE_H */
