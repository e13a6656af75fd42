#ifndef RTP_LAB_H
#define RTP_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every function.
typedef enum RtpStatus {
  RTP_STATUS_OK = 0,
  RTP_STATUS_VALIDATION = 1,
  RTP_STATUS_DOMAIN = 2,
  RTP_STATUS_OVERFLOW = 3,
  RTP_STATUS_RESOURCE = 4,
  RTP_STATUS_NUMERIC = 5,
  RTP_STATUS_NON_CONVERGENCE = 6,
  RTP_STATUS_INVARIANT = 7,
  RTP_STATUS_NULL_POINTER = 8,
  RTP_STATUS_PANIC = 9,
} RtpStatus;

// A sampled empirical spectrum, eigenvalues in ascending order.
typedef struct RtpSpectrum RtpSpectrum;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or an empty string.
// Valid until the next failing call on the same thread.
const char *rtp_last_error_message(void);

// `C(n, k)`.
//
// # Safety
// `out` must be valid for writes.
enum RtpStatus rtp_binomial(uint64_t n, uint64_t k, uint64_t *out);

// Marchenko–Pastur density of ratio `gamma` at `y`, excluding the atom.
//
// # Safety
// `out` must be valid for writes.
enum RtpStatus rtp_mp_density(double gamma, double y, double *out);

// Marchenko–Pastur distribution function, including the atom at zero.
//
// # Safety
// `out` must be valid for writes.
enum RtpStatus rtp_mp_cdf(double gamma, double x, double *out);

// `m(z) = ∫ dF(t) / (z - t)` for `Im z > 0`.
//
// # Safety
// `out_re` and `out_im` must be valid for writes.
enum RtpStatus rtp_mp_stieltjes(double gamma,
                                double z_re,
                                double z_im,
                                double *out_re,
                                double *out_im);

// Solves the fixed-point equation for the limit of a population with
// eigenvalue distribution `sum_i weights[i] δ_{atoms[i]}`, at `z`.
//
// # Safety
// `atoms` and `weights` must point to `len` values; the out-pointers must be
// valid for writes, except `out_iterations`, which may be null.
enum RtpStatus rtp_solve_ie(const double *atoms,
                            const double *weights,
                            size_t len,
                            double gamma,
                            double z_re,
                            double z_im,
                            double *out_re,
                            double *out_im,
                            size_t *out_iterations);

// `Var ||Z_0||^2` for degree `d` over `n` variables with fourth moment `b`.
//
// # Safety
// `out` must be valid for writes.
enum RtpStatus rtp_exact_norm_variance(size_t n, size_t d, double b, double *out);

// Samples `Z` (N x p, N = C(n, d)) and stores the spectrum of `Z Z^T / p`.
// `dist` is `"rademacher"`, `"gaussian"` or `"threepoint:B"`; a zero
// `max_entries` selects the default cap.
//
// # Safety
// `dist` must be a NUL-terminated string; `out` must be valid for writes.
enum RtpStatus rtp_spectrum_sample(size_t n,
                                   size_t d,
                                   size_t p,
                                   const char *dist,
                                   uint64_t seed,
                                   uint64_t max_entries,
                                   struct RtpSpectrum **out);

// Number of eigenvalues, or 0 for a null handle.
//
// # Safety
// `spectrum` must be null or a live handle.
size_t rtp_spectrum_len(const struct RtpSpectrum *spectrum);

// Copies up to `capacity` eigenvalues into `buf` and reports how many were written.
//
// # Safety
// `spectrum` must be a live handle, `buf` valid for `capacity` writes and
// `written` valid for writes.
enum RtpStatus rtp_spectrum_copy(const struct RtpSpectrum *spectrum,
                                 double *buf,
                                 size_t capacity,
                                 size_t *written);

// Kolmogorov–Smirnov distance from the spectrum to Marchenko–Pastur with ratio `gamma`.
//
// # Safety
// `spectrum` must be a live handle and `out` valid for writes.
enum RtpStatus rtp_spectrum_ks_to_mp(const struct RtpSpectrum *spectrum, double gamma, double *out);

// Releases a handle; null is ignored.
//
// # Safety
// `spectrum` must be null or a handle not yet freed.
void rtp_spectrum_free(struct RtpSpectrum *spectrum);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RTP_LAB_H */
