#ifndef A3SN_H
#define A3SN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum A3snStatus {
  A3SN_STATUS_OK = 0,
  A3SN_STATUS_NULL_ARGUMENT = 1,
  A3SN_STATUS_INVALID_UTF8 = 2,
  A3SN_STATUS_IO = 3,
  A3SN_STATUS_DATA = 4,
  A3SN_STATUS_CHECKPOINT = 5,
  A3SN_STATUS_CONFIG = 6,
  A3SN_STATUS_NUMERIC = 7,
  A3SN_STATUS_OUT_OF_RANGE = 8,
  A3SN_STATUS_PANIC = 9,
} A3snStatus;

// Opaque loaded model.
typedef struct A3snModel A3snModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *a3sn_version(void);

// Message for the last failed call on this thread, or NULL. The pointer
// stays valid until the next a3sn call on the same thread.
const char *a3sn_last_error(void);

// Loads a checkpoint file. On success `*out` owns a model that must be
// released with [`a3sn_model_free`].
//
// # Safety
// `path` must be NULL or a NUL-terminated string; `out` must be NULL or
// writable.
enum A3snStatus a3sn_model_load(const char *path, struct A3snModel **out);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from [`a3sn_model_load`] and not be freed twice.
void a3sn_model_free(struct A3snModel *model);

// Number of attention layers and heads per layer.
//
// # Safety
// Pointers must be NULL or valid.
enum A3snStatus a3sn_model_shape(const struct A3snModel *model,
                                 uintptr_t *layers,
                                 uintptr_t *heads);

// Classifies `text` with respect to `aspect`. Writes positive, negative and
// neutral probabilities to `probs[0..3]` and the argmax (0, 1 or 2) to
// `*label`.
//
// # Safety
// Strings must be NUL-terminated; `probs` must hold 3 doubles.
enum A3snStatus a3sn_model_predict(const struct A3snModel *model,
                                   const char *text,
                                   const char *aspect,
                                   double *probs,
                                   int32_t *label);

// Attention mass that one head puts on sentence/aspect cross pairs, before
// and after amplification.
//
// # Safety
// Strings must be NUL-terminated; outputs must be writable.
enum A3snStatus a3sn_model_cross_mass(const struct A3snModel *model,
                                      const char *text,
                                      const char *aspect,
                                      uintptr_t layer,
                                      uintptr_t head,
                                      double *original,
                                      double *amplified);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* A3SN_H */
