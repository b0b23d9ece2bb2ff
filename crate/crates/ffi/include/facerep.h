#ifndef FACEREP_H
#define FACEREP_H

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

typedef enum FrStatus {
  FR_STATUS_OK = 0,
  FR_STATUS_NULL_ARGUMENT = 1,
  FR_STATUS_INVALID_ARGUMENT = 2,
  FR_STATUS_DATA = 3,
  FR_STATUS_NUMERIC = 4,
  FR_STATUS_BUFFER_TOO_SMALL = 5,
  FR_STATUS_PANIC = 6,
} FrStatus;

/**
 * Opaque network handle.
 */
typedef struct FrNetwork FrNetwork;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *fr_last_error(void);

/**
 * Loads a model container from `path` into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FrStatus fr_network_load(const char *path, struct FrNetwork **out);

/**
 * Builds a named reference architecture at `crop`×`crop` with MSRA weights
 * drawn from `seed`.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum FrStatus fr_network_from_builtin(const char *name,
                                      size_t crop,
                                      bool fnl,
                                      uint64_t seed,
                                      struct FrNetwork **out);

/**
 * Builds a network from descriptor text with MSRA weights drawn from `seed`.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum FrStatus fr_network_from_descriptor(const char *text, uint64_t seed, struct FrNetwork **out);

/**
 * # Safety
 * `net` must come from this library; `path` must be a NUL-terminated string.
 */
enum FrStatus fr_network_save(const struct FrNetwork *net, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `net` must come from this library and not be used afterwards.
 */
void fr_network_free(struct FrNetwork *net);

/**
 * Writes the per-sample input shape (channels, height, width).
 *
 * # Safety
 * `net` must come from this library; `dims` must hold 3 writable values.
 */
enum FrStatus fr_network_input_shape(const struct FrNetwork *net, size_t *dims);

/**
 * Length of the feature vector.
 *
 * # Safety
 * `net` must come from this library; `len` must be writable.
 */
enum FrStatus fr_network_feature_len(const struct FrNetwork *net, bool pre_relu, size_t *len);

/**
 * Feature vector of one already-preprocessed C×H×W input.
 *
 * # Safety
 * `net` must come from this library; `input` must hold `input_len` floats
 * and `out` `out_len` writable floats.
 */
enum FrStatus fr_network_extract(const struct FrNetwork *net,
                                 const float *input,
                                 size_t input_len,
                                 bool pre_relu,
                                 float *out,
                                 size_t out_len);

/**
 * Feature vector of a PGM/PPM image, with the model's mean subtraction and
 * centre crop applied.
 *
 * # Safety
 * `net` must come from this library; `path` must be a NUL-terminated string
 * and `out` must hold `out_len` writable floats.
 */
enum FrStatus fr_network_extract_image(const struct FrNetwork *net,
                                       const char *path,
                                       bool pre_relu,
                                       float *out,
                                       size_t out_len);

/**
 * Cosine similarity of two length-`len` vectors.
 *
 * # Safety
 * `a` and `b` must hold `len` floats; `out` must be writable.
 */
enum FrStatus fr_cosine(const float *a, const float *b, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FACEREP_H */
