#ifndef ELT_H
#define ELT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Nonzero codes match the `elt` CLI exit codes where both exist.
 */
enum EltStatus
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  ELT_STATUS_OK = 0,
  /**
   * Invalid argument, configuration or dimension.
   */
  ELT_STATUS_CONFIG = 2,
  /**
   * Malformed or inconsistent input data or checkpoint.
   */
  ELT_STATUS_DATA = 3,
  /**
   * NaN or other numeric failure.
   */
  ELT_STATUS_NUMERIC = 4,
  ELT_STATUS_IO = 5,
  /**
   * A required pointer was null.
   */
  ELT_STATUS_NULL_POINTER = 6,
  /**
   * Internal panic caught at the boundary.
   */
  ELT_STATUS_PANIC = 7,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum EltStatus EltStatus;
#else
typedef int32_t EltStatus;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Attention kernel selector for [`elt_attention`].
 */
enum EltKernel
#if defined(__cplusplus) || __STDC_VERSION__ >= 202311L
  : int32_t
#endif // defined(__cplusplus) || __STDC_VERSION__ >= 202311L
 {
  ELT_KERNEL_STANDARD = 0,
  ELT_KERNEL_LINEAR = 1,
  ELT_KERNEL_LOCAL = 2,
};
#ifndef __cplusplus
#if __STDC_VERSION__ >= 202311L
typedef enum EltKernel EltKernel;
#else
typedef int32_t EltKernel;
#endif // __STDC_VERSION__ >= 202311L
#endif // __cplusplus

/**
 * Opaque trained model.
 */
typedef struct EltModel EltModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or an empty
 * string. The pointer stays valid until the next call into this library
 * from the same thread.
 */
const char *elt_last_error(void);

/**
 * Library version as a static nul-terminated string.
 */
const char *elt_version(void);

/**
 * Loads a checkpoint file. On success `*out` receives a handle that must be
 * released with [`elt_model_free`].
 *
 * # Safety
 * `path` must be a valid nul-terminated string and `out` a valid pointer.
 */
EltStatus elt_model_load(const char *path, struct EltModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`elt_model_load`] and not have been freed.
 */
void elt_model_free(struct EltModel *model);

/**
 * Window length the model expects, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t elt_model_input_len(const struct EltModel *model);

/**
 * Appliance name the model was trained for; valid while the handle lives.
 * Null for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
const char *elt_model_appliance(const struct EltModel *model);

/**
 * On-threshold in watts stored with the model; falls back to the built-in
 * table. Fails with `ELT_STATUS_CONFIG` when neither knows the appliance.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
EltStatus elt_model_on_threshold(const struct EltModel *model, double *out);

/**
 * Predicts the appliance power (watts, clamped at 0) at the midpoint of a
 * window of `len` raw mains readings in watts.
 *
 * # Safety
 * `model` must be a live handle, `mains` must point to `len` doubles and
 * `out_watts` must be valid.
 */
EltStatus elt_model_predict(const struct EltModel *model,
                            const double *mains,
                            size_t len,
                            double *out_watts);

/**
 * Single-head attention on row-major `l × d` matrices, written to `out`
 * (also `l × d`). `kernel` is an `EltKernel` value; `l_win` is used by the
 * local kernel only.
 *
 * # Safety
 * `q`, `k`, `v` and `out` must each point to `l * d` doubles.
 */
EltStatus elt_attention(int32_t kernel,
                        const double *q,
                        const double *k,
                        const double *v,
                        size_t l,
                        size_t d,
                        size_t l_win,
                        double *out);

/**
 * F1 and MCC of on/off status vectors (nonzero byte = on). Either output
 * pointer may be null.
 *
 * # Safety
 * `pred` and `truth` must point to `n` bytes each.
 */
EltStatus elt_f1_mcc(const uint8_t *pred,
                     const uint8_t *truth,
                     size_t n,
                     double *out_f1,
                     double *out_mcc);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ELT_H */
