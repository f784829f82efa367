#ifndef WSISEG_H
#define WSISEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call. Values match the CLI exit codes.
typedef enum WsisegStatus {
  WSISEG_STATUS_OK = 0,
  WSISEG_STATUS_OTHER = 1,
  WSISEG_STATUS_FORMAT = 2,
  WSISEG_STATUS_VOCABULARY = 3,
  WSISEG_STATUS_GEOMETRY = 4,
  WSISEG_STATUS_CONFIGURATION = 5,
  WSISEG_STATUS_CAPACITY = 6,
  WSISEG_STATUS_IO = 7,
  WSISEG_STATUS_NULL_POINTER = 8,
  WSISEG_STATUS_PANIC = 9,
} WsisegStatus;

// Pipeline configuration.
typedef struct WsisegConfig WsisegConfig;

// Binary mask placed in slide coordinates.
typedef struct WsisegMask WsisegMask;

// Merged instances of one slide.
typedef struct WsisegSlideSet WsisegSlideSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *wsiseg_version(void);

// Message of the last failed call on this thread, empty after success.
// Valid until the next call into the library on the same thread.
const char *wsiseg_last_error(void);

// # Safety
// `s` must come from this library and not have been freed.
void wsiseg_string_free(char *s);

enum WsisegStatus wsiseg_config_default(struct WsisegConfig **out);

// Parses a configuration JSON object; missing fields take defaults.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum WsisegStatus wsiseg_config_from_json(const char *json, struct WsisegConfig **out);

// # Safety
// `cfg` must come from this library and not have been freed.
void wsiseg_config_free(struct WsisegConfig *cfg);

// Builds a mask from column-major run lengths (background first) of a
// `height` x `width` window whose top-left corner is `(x, y)`.
//
// # Safety
// `counts` must point to `n_counts` readable values.
enum WsisegStatus wsiseg_mask_from_rle(uint32_t height,
                                       uint32_t width,
                                       const uint32_t *counts,
                                       size_t n_counts,
                                       uint32_t x,
                                       uint32_t y,
                                       struct WsisegMask **out);

// # Safety
// `m` must be a live mask handle; `out` must be writable.
enum WsisegStatus wsiseg_mask_area(const struct WsisegMask *m, uint64_t *out);

// Intersection over union of two masks.
//
// # Safety
// `a` and `b` must be live mask handles; `out` must be writable.
enum WsisegStatus wsiseg_mask_iou(const struct WsisegMask *a,
                                  const struct WsisegMask *b,
                                  double *out);

// # Safety
// `m` must come from this library and not have been freed.
void wsiseg_mask_free(struct WsisegMask *m);

// Reads a tile plan and a directory of per-tile prediction files, then
// edge-filters and merges them into one slide set.
//
// # Safety
// String arguments must be NUL-terminated; `cfg` a live handle.
enum WsisegStatus wsiseg_merge_files(const struct WsisegConfig *cfg,
                                     const char *slide_id,
                                     uint32_t width,
                                     uint32_t height,
                                     const char *plan_path,
                                     const char *predictions_dir,
                                     struct WsisegSlideSet **out);

// Applies per-class thresholds (glomerulus, arteriole, artery) and the
// small-instance and cross-class filters, in place.
//
// # Safety
// `set` must be a live handle.
enum WsisegStatus wsiseg_slide_set_finish(struct WsisegSlideSet *set,
                                          double t_glomerulus,
                                          double t_arteriole,
                                          double t_artery);

// # Safety
// `set` must be a live handle; `out` must be writable.
enum WsisegStatus wsiseg_slide_set_active_count(const struct WsisegSlideSet *set, size_t *out);

// The full set, all candidates with their statuses, as JSON.
//
// # Safety
// `set` must be a live handle; free the result with `wsiseg_string_free`.
enum WsisegStatus wsiseg_slide_set_to_json(const struct WsisegSlideSet *set, char **out);

// Active instances as a GeoJSON FeatureCollection.
//
// # Safety
// `set` must be a live handle; free the result with `wsiseg_string_free`.
enum WsisegStatus wsiseg_slide_set_to_geojson(const struct WsisegSlideSet *set, char **out);

// # Safety
// `set` must come from this library and not have been freed.
void wsiseg_slide_set_free(struct WsisegSlideSet *set);

// Runs the whole pipeline described by a run file.
//
// # Safety
// `run_file` must be a NUL-terminated path.
enum WsisegStatus wsiseg_run(const char *run_file);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WSISEG_H */
