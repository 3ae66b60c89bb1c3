#ifndef SKETCHLOC_H
#define SKETCHLOC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SklStatus {
  SKL_STATUS_OK = 0,
  SKL_STATUS_NULL_ARGUMENT = 1,
  SKL_STATUS_INVALID_UTF8 = 2,
  SKL_STATUS_IO = 3,
  SKL_STATUS_CHECKPOINT = 4,
  SKL_STATUS_VALIDATION = 5,
  SKL_STATUS_DECODE = 6,
  SKL_STATUS_NOT_FOUND = 7,
  SKL_STATUS_INTERNAL = 8,
  SKL_STATUS_PANIC = 9,
} SklStatus;

/**
 * A loaded, read-only model. Safe to share across threads for
 * [`skl_localize_json`] and [`skl_model_digest`].
 */
typedef struct SklModel SklModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint. On success `*out` owns a model to be released with
 * [`skl_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SklStatus skl_model_load(const char *path, struct SklModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`skl_model_load`] and not be used afterwards.
 */
void skl_model_free(struct SklModel *model);

/**
 * Architecture digest of the loaded model, as a new string.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum SklStatus skl_model_digest(const struct SklModel *model, char **out);

/**
 * Runs one localization. `request_json` uses the HTTP `/localize` body
 * schema (the image must be inline base64 PNG); `*out` receives the response
 * JSON. On a request error the message names the offending field.
 *
 * # Safety
 * `model` must be a live handle, `request_json` NUL-terminated, `out` writable.
 */
enum SklStatus skl_localize_json(const struct SklModel *model,
                                 const char *request_json,
                                 char **out);

/**
 * Frees a string returned by this library; null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void skl_string_free(char *s);

/**
 * Message of the last failed call on this thread (empty after a success).
 * Valid until the next library call on the same thread.
 */
const char *skl_last_error(void);

/**
 * Library version, statically allocated.
 */
const char *skl_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SKETCHLOC_H */
