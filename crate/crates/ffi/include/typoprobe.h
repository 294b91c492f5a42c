/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef TYPOPROBE_H
#define TYPOPROBE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TpStatus {
  TP_STATUS_OK = 0,
  TP_STATUS_NULL_POINTER = 1,
  TP_STATUS_INVALID_ARGUMENT = 2,
  TP_STATUS_IO = 3,
  TP_STATUS_FORMAT = 4,
  TP_STATUS_DIMENSION_MISMATCH = 5,
  TP_STATUS_MISSING = 6,
  TP_STATUS_NUMERICAL = 7,
  TP_STATUS_VALIDATION = 8,
  TP_STATUS_BUFFER_TOO_SMALL = 9,
  TP_STATUS_PANIC = 10,
} TpStatus;

typedef struct TpCentroid TpCentroid;

typedef struct TpEmbeddings TpEmbeddings;

typedef struct TpProbe TpProbe;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to at least `len` writable bytes.
 */
size_t tp_last_error_message(char *buf, size_t len);

/**
 * Reads an embedding file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TpStatus tp_embeddings_read(const char *path, struct TpEmbeddings **out);

/**
 * Writes `h` to `path`. Refuses matrices holding NaN or infinity.
 *
 * # Safety
 * `h` must come from this library; `path` must be a NUL-terminated string.
 */
enum TpStatus tp_embeddings_write(const struct TpEmbeddings *h, const char *path);

/**
 * Builds a matrix from `count * dim` row-major values. `dtype` is 0 for
 * f32 storage and 1 for f64.
 *
 * # Safety
 * `language` and `encoder` must be NUL-terminated strings, `data` must
 * point to `count * dim` doubles and `out` must be writable.
 */
enum TpStatus tp_embeddings_from_rows(const char *language,
                                      const char *encoder,
                                      uint16_t layer,
                                      uint8_t dtype,
                                      const double *data,
                                      size_t count,
                                      size_t dim,
                                      struct TpEmbeddings **out);

/**
 * # Safety
 * `h` must come from this library; `count` must be writable.
 */
enum TpStatus tp_embeddings_count(const struct TpEmbeddings *h, size_t *count);

/**
 * # Safety
 * `h` must come from this library; `dim` must be writable.
 */
enum TpStatus tp_embeddings_dim(const struct TpEmbeddings *h, size_t *dim);

/**
 * Copies the row-major values of `h` into `buf`, which must hold
 * `count * dim` doubles.
 *
 * # Safety
 * `h` must come from this library; `buf` must point to `len` doubles.
 */
enum TpStatus tp_embeddings_copy_data(const struct TpEmbeddings *h, double *buf, size_t len);

/**
 * # Safety
 * `h` must be null or a handle from this library not yet freed.
 */
void tp_embeddings_free(struct TpEmbeddings *h);

/**
 * # Safety
 * `h` must come from this library; `out` must be writable.
 */
enum TpStatus tp_centroid_compute(const struct TpEmbeddings *h, struct TpCentroid **out);

/**
 * # Safety
 * `c` must come from this library; `dim` must be writable.
 */
enum TpStatus tp_centroid_dim(const struct TpCentroid *c, size_t *dim);

/**
 * # Safety
 * `c` must come from this library; `buf` must point to `len` doubles.
 */
enum TpStatus tp_centroid_copy(const struct TpCentroid *c, double *buf, size_t len);

/**
 * # Safety
 * `c` must be null or a handle from this library not yet freed.
 */
void tp_centroid_free(struct TpCentroid *c);

/**
 * Subtracts `h`'s own centroid from every row.
 *
 * # Safety
 * `h` must come from this library; `out` must be writable.
 */
enum TpStatus tp_self_neutralise(const struct TpEmbeddings *h, struct TpEmbeddings **out);

/**
 * Subtracts centroid `c` (usually another language's) from every row.
 *
 * # Safety
 * `h` and `c` must come from this library; `out` must be writable.
 */
enum TpStatus tp_cross_neutralise(const struct TpEmbeddings *h,
                                  const struct TpCentroid *c,
                                  struct TpEmbeddings **out);

/**
 * Loads a probe directory written by a run (`probes/<task>`).
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum TpStatus tp_probe_load(const char *dir, struct TpProbe **out);

/**
 * # Safety
 * `p` must come from this library; `k` must be writable.
 */
enum TpStatus tp_probe_num_classes(const struct TpProbe *p, size_t *k);

/**
 * # Safety
 * `p` must come from this library; `dim` must be writable.
 */
enum TpStatus tp_probe_dim(const struct TpProbe *p, size_t *dim);

/**
 * Writes one predicted class index per row of `h` into `labels`.
 *
 * # Safety
 * `p` and `h` must come from this library; `labels` must point to `len`
 * writable `size_t`.
 */
enum TpStatus tp_probe_predict(const struct TpProbe *p,
                               const struct TpEmbeddings *h,
                               size_t *labels,
                               size_t len);

/**
 * Fraction of rows of `h` predicted as class `gold`.
 *
 * # Safety
 * `p` and `h` must come from this library; `accuracy` must be writable.
 */
enum TpStatus tp_probe_accuracy(const struct TpProbe *p,
                                const struct TpEmbeddings *h,
                                size_t gold,
                                double *accuracy);

/**
 * # Safety
 * `p` must be null or a handle from this library not yet freed.
 */
void tp_probe_free(struct TpProbe *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TYPOPROBE_H */
