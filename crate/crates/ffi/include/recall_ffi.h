#ifndef RECALL_FFI_H
#define RECALL_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define RECALL_MODE_OUTSIDE 0

#define RECALL_MODE_INSIDE 1

typedef enum RecallStatus {
  RECALL_STATUS_OK = 0,
  RECALL_STATUS_NULL_POINTER = 1,
  RECALL_STATUS_INVALID_CONFIG = 2,
  RECALL_STATUS_INVALID_CONTINUATION = 3,
  RECALL_STATUS_BUFFER_TOO_SMALL = 4,
  RECALL_STATUS_LENGTH_MISMATCH = 5,
  RECALL_STATUS_OUT_OF_RANGE = 6,
  RECALL_STATUS_INTERNAL = 7,
} RecallStatus;

/**
 * Opaque decoder handle.
 */
typedef struct RecallDecoder RecallDecoder;

/**
 * Summary of one recall span.
 */
typedef struct RecallSpanInfo {
  /**
   * Number of span tokens (delimiters excluded).
   */
  size_t len;
  /**
   * Half-open position of the span in the generated stream.
   */
  size_t gen_start;
  size_t gen_end;
  /**
   * Context length when the span opened.
   */
  size_t snapshot_len;
  /**
   * Occurrences of the span in its snapshot.
   */
  size_t n_positions;
  /**
   * First occurrence, or `SIZE_MAX` when there is none.
   */
  size_t first_position;
  bool truncated;
} RecallSpanInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * # Safety
 * `prompt` must point to `prompt_len` readable `u32`s (or be null when
 * `prompt_len` is 0); `out` must be a valid pointer to write the handle to.
 */
enum RecallStatus recall_decoder_new(const uint32_t *prompt,
                                     size_t prompt_len,
                                     uint32_t r_start_id,
                                     uint32_t r_end_id,
                                     size_t vocab_size,
                                     bool include_prior_spans,
                                     bool include_delimiters,
                                     struct RecallDecoder **out);

/**
 * # Safety
 * `dec` must come from [`recall_decoder_new`] and not be used afterwards.
 */
void recall_decoder_free(struct RecallDecoder *dec);

/**
 * Feeds one sampled token. A rejected token leaves the state unchanged.
 *
 * # Safety
 * `dec` must be a live handle.
 */
enum RecallStatus recall_decoder_observe(struct RecallDecoder *dec, uint32_t token);

/**
 * Writes one byte per vocabulary entry (1 = allowed) into `out`.
 *
 * # Safety
 * `dec` must be a live handle and `out` must point to `out_len` writable
 * bytes.
 */
enum RecallStatus recall_decoder_mask(struct RecallDecoder *dec, uint8_t *out, size_t out_len);

/**
 * Writes the mask as a little-endian packed bitset (bit `i` = token `i`)
 * into `out`, which needs `ceil(vocab_size / 8)` bytes.
 *
 * # Safety
 * As for [`recall_decoder_mask`].
 */
enum RecallStatus recall_decoder_mask_bits(struct RecallDecoder *dec, uint8_t *out, size_t out_len);

/**
 * Sets disallowed entries of `logits` to negative infinity in place.
 * Allowed entries are left bit-identical.
 *
 * # Safety
 * `dec` must be a live handle and `logits` must point to `len` writable
 * floats.
 */
enum RecallStatus recall_decoder_apply_mask(struct RecallDecoder *dec, float *logits, size_t len);

/**
 * # Safety
 * `dec` must be a live handle; `out` must be writable.
 */
enum RecallStatus recall_decoder_mode(struct RecallDecoder *dec, int32_t *out);

/**
 * Number of spans: closed ones plus the open one, if any.
 *
 * # Safety
 * `dec` must be a live handle; `out` must be writable.
 */
enum RecallStatus recall_decoder_span_count(struct RecallDecoder *dec, size_t *out);

/**
 * # Safety
 * `dec` must be a live handle; `out` must be writable.
 */
enum RecallStatus recall_decoder_span_info(struct RecallDecoder *dec,
                                           size_t index,
                                           struct RecallSpanInfo *out);

/**
 * Copies the tokens of span `index` into `out` and stores the span length
 * in `out_len`. When `cap` is too small nothing is copied, `out_len` still
 * receives the required length and `BufferTooSmall` is returned.
 *
 * # Safety
 * `dec` must be a live handle, `out` must point to `cap` writable `u32`s
 * (may be null when `cap` is 0) and `out_len` must be writable.
 */
enum RecallStatus recall_decoder_span_tokens(struct RecallDecoder *dec,
                                             size_t index,
                                             uint32_t *out,
                                             size_t cap,
                                             size_t *out_len);

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to fit, into `buf`. Returns the full message length in bytes
 * (excluding the terminator); 0 means no error has been recorded.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes, or be null with `cap` 0.
 */
size_t recall_last_error(char *buf, size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RECALL_FFI_H */
