#ifndef APTRACK_H
#define APTRACK_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum AptStatus {
  APT_STATUS_OK = 0,
  APT_STATUS_NULL_POINTER = 1,
  APT_STATUS_INVALID_ARGUMENT = 2,
  APT_STATUS_IO = 3,
  APT_STATUS_FORMAT = 4,
  APT_STATUS_CONFIG = 5,
  APT_STATUS_TRACKER = 6,
  APT_STATUS_EVAL = 7,
  APT_STATUS_NOT_INITIALIZED = 8,
  APT_STATUS_PANIC = 9,
} AptStatus;

/**
 * Trained weights and configuration.
 */
typedef struct AptModel AptModel;

/**
 * Tracking session over one sequence.
 */
typedef struct AptTracker AptTracker;

/**
 * Box in pixels, center convention. `score` is negative when absent.
 */
typedef struct AptBox {
  double cx;
  double cy;
  double w;
  double h;
  double score;
} AptBox;

typedef struct AptMetrics {
  double precision_at_20;
  double success_auc;
  double mpr_at_20;
  double msr_auc;
  double f_score;
} AptMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t apt_last_error(char *buf, size_t len);

/**
 * Loads a training output directory (checkpoint plus `config.txt`).
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum AptStatus apt_model_load(const char *dir, struct AptModel **out);

/**
 * # Safety
 * `model` must come from [`apt_model_load`] and not be freed twice.
 */
void apt_model_free(struct AptModel *model);

/**
 * Opens a tracking session. The session keeps the model alive.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum AptStatus apt_tracker_new(const struct AptModel *model, struct AptTracker **out);

/**
 * # Safety
 * `t` must come from [`apt_tracker_new`] and not be freed twice.
 */
void apt_tracker_free(struct AptTracker *t);

/**
 * Starts tracking `init` on the given frame. Buffers are interleaved
 * 8-bit RGB of `width * height * 3` bytes; single-channel X data is
 * replicated across the three channels by the caller.
 *
 * # Safety
 * `t` must be live; `rgb` and `x` must point to `width * height * 3` bytes.
 */
enum AptStatus apt_tracker_init(struct AptTracker *t,
                                const uint8_t *rgb,
                                const uint8_t *x,
                                size_t width,
                                size_t height,
                                struct AptBox init);

/**
 * Tracks one frame. `updated` (optional) reports a dynamic-template refresh.
 *
 * # Safety
 * As [`apt_tracker_init`]; `out` must be writable, `updated` null or writable.
 */
enum AptStatus apt_tracker_step(struct AptTracker *t,
                                const uint8_t *rgb,
                                const uint8_t *x,
                                size_t width,
                                size_t height,
                                struct AptBox *out,
                                bool *updated);

double apt_iou(struct AptBox a, struct AptBox b);

double apt_giou(struct AptBox a, struct AptBox b);

/**
 * Scores one sequence. `gt_x` may be null to reuse `gt`; `visible` may be
 * null when every frame is visible.
 *
 * # Safety
 * Non-null arrays must hold `n` elements; `out` must be writable.
 */
enum AptStatus apt_evaluate(const struct AptBox *preds,
                            const struct AptBox *gt,
                            const struct AptBox *gt_x,
                            const uint8_t *visible,
                            size_t n,
                            struct AptMetrics *out);

/**
 * Writes `count` synthetic sequences under `dir`. `preset` is 0 for the
 * default scene, 1 for random scenes, 2 for random scenes with
 * alternating single-modality blackouts.
 *
 * # Safety
 * `dir` must be a NUL-terminated string.
 */
enum AptStatus apt_synth_write(const char *dir,
                               size_t count,
                               size_t frames,
                               uint32_t preset,
                               uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* APTRACK_H */
