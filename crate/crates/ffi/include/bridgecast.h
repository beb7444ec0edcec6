#ifndef BRIDGECAST_H
#define BRIDGECAST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/*
 Result of every fallible call.
 */
typedef enum BcStatus {
  BC_STATUS_OK = 0,
  BC_STATUS_NULL_POINTER = 1,
  BC_STATUS_INVALID_ARGUMENT = 2,
  BC_STATUS_IO = 3,
  /*
   Malformed file or config: bad magic, version, checksum, truncation.
   */
  BC_STATUS_FORMAT = 4,
  BC_STATUS_SHAPE = 5,
  BC_STATUS_RUNTIME = 6,
  BC_STATUS_PANIC = 7,
} BcStatus;

/*
 A score model: an analytic Gaussian-field score or a trained network.
 */
typedef struct BcScore BcScore;

/*
 A set of snapshots: samples x channels x N x N values.
 */
typedef struct BcSnapshotSet BcSnapshotSet;

/*
 Noise schedule `sigma(t)` between `sigma_min` and `sigma_max`.
 */
typedef struct BcSchedule {
  double sigma_min;
  double sigma_max;
} BcSchedule;

/*
 Spectral crossing between a source and a target PSD.
 */
typedef struct BcKStar {
  size_t k_star;
  double psd_star;
  /*
   False when the curves never cross and the closest band was used.
   */
  bool crossed;
} BcKStar;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *bc_version(void);

/*
 Size of the last error message on this thread including the NUL, or 0.
 */
size_t bc_last_error_length(void);

/*
 Copies the last error message into `buf` when `len` is large enough.
 Returns the size needed including the NUL, or 0 when there is no error.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t bc_last_error_message(char *buf, size_t len);

struct BcSchedule bc_schedule_default(void);

/*
 # Safety
 `out` must be null or writable.
 */
enum BcStatus bc_schedule_sigma(struct BcSchedule s, double t, double *out_sigma);

/*
 # Safety
 `out_g` must be null or writable.
 */
enum BcStatus bc_schedule_g(struct BcSchedule s, double t, double *out_g);

/*
 Switchover time at which the noise power per band equals `psd_star`.

 # Safety
 `out_t` must be null or writable.
 */
enum BcStatus bc_t_star_from_psd(struct BcSchedule s,
                                 double psd_star,
                                 size_t n_grid,
                                 double *out_t);

/*
 Number of PSD bands for an `n_grid` x `n_grid` field.
 */
size_t bc_band_count(size_t n_grid);

/*
 Reads a snapshot file.

 # Safety
 `path` must be a NUL-terminated string; `out_set` must be writable.
 */
enum BcStatus bc_snapshot_read(const char *path, struct BcSnapshotSet **out_set);

/*
 Writes a snapshot file, refusing to replace an existing one unless `force`.

 # Safety
 `set` must come from this library; `path` must be a NUL-terminated string.
 */
enum BcStatus bc_snapshot_write(const struct BcSnapshotSet *set, const char *path, bool force);

/*
 Builds a set from `samples * n_channels * n_grid * n_grid` values laid
 out sample-major, then channel, then row (`y`), then column (`x`).
 Channels whose name starts with `context` are conditioning inputs.

 # Safety
 `channels` must hold `n_channels` NUL-terminated strings, `data` the
 values described above and `subset_name` a NUL-terminated string.
 */
enum BcStatus bc_snapshot_new(size_t n_grid,
                              const char *const *channels,
                              size_t n_channels,
                              size_t samples,
                              const double *data,
                              const char *subset_name,
                              struct BcSnapshotSet **out_set);

/*
 # Safety
 `set` must be null or come from this library and not be used afterwards.
 */
void bc_snapshot_free(struct BcSnapshotSet *set);

/*
 # Safety
 `set` must come from this library; the out pointers may be null.
 */
enum BcStatus bc_snapshot_shape(const struct BcSnapshotSet *set,
                                size_t *out_samples,
                                size_t *out_channels,
                                size_t *out_n_grid);

/*
 Copies channel `index`'s name into `buf` when it fits; `out_needed`
 receives the size including the NUL.

 # Safety
 `set` must come from this library; `buf` must be null or hold `len` bytes.
 */
enum BcStatus bc_snapshot_channel_name(const struct BcSnapshotSet *set,
                                       size_t index,
                                       char *buf,
                                       size_t len,
                                       size_t *out_needed);

/*
 Borrowed pointer to the set's values (layout as in [`bc_snapshot_new`]),
 valid until the set is freed. Null for a null set.

 # Safety
 `set` must be null or come from this library.
 */
const double *bc_snapshot_data(const struct BcSnapshotSet *set);

/*
 Azimuthal PSD of one channel averaged over samples; writes
 [`bc_band_count`] values into `out_psd`.

 # Safety
 `set` must come from this library, `channel` be a NUL-terminated string
 and `out_psd` hold `out_len` writable values.
 */
enum BcStatus bc_azimuthal_psd(const struct BcSnapshotSet *set,
                               const char *channel,
                               bool subtract_mean,
                               double *out_psd,
                               size_t out_len);

/*
 Smallest band where the source and target spectra cross. Both arrays
 hold [`bc_band_count`]`(n_grid)` values.

 # Safety
 `source` and `target` must hold `len` values; `out_k` must be writable.
 */
enum BcStatus bc_find_k_star(const double *source,
                             const double *target,
                             size_t len,
                             size_t n_grid,
                             struct BcKStar *out_k);

/*
 Exact score of a stationary Gaussian field with mode variance
 `amplitude * (1 + |k|)^-exponent`, on channel `channel`.

 # Safety
 `channel` must be a NUL-terminated string; `out_score` must be writable.
 */
enum BcStatus bc_score_gaussian_power_law(const char *channel,
                                          size_t n_grid,
                                          double amplitude,
                                          double exponent,
                                          struct BcSchedule s,
                                          struct BcScore **out_score);

/*
 Loads a trained network checkpoint.

 # Safety
 `path` must be a NUL-terminated string; `out_score` must be writable.
 */
enum BcStatus bc_score_load(const char *path, struct BcScore **out_score);

/*
 # Safety
 `score` must be null or come from this library and not be used afterwards.
 */
void bc_score_free(struct BcScore *score);

/*
 Draws `samples` fields from a Gaussian score's prior.

 # Safety
 `score` must come from this library; `out_set` must be writable.
 */
enum BcStatus bc_score_sample(const struct BcScore *score,
                              size_t samples,
                              uint64_t seed,
                              struct BcSnapshotSet **out_set);

/*
 Score of every sample of `x` at time `t`, on the model's noised channels.

 # Safety
 `score` and `x` must come from this library; `out_set` must be writable.
 */
enum BcStatus bc_score_evaluate(const struct BcScore *score,
                                const struct BcSnapshotSet *x,
                                double t,
                                struct BcSnapshotSet **out_set);

/*
 Bridges `source` into the score's domain: noise to `t_star`, then
 integrate back to `t_end` in `n_steps` steps. `context` may be null; when
 given it supplies the context channels, one sample per source sample.

 # Safety
 Handles must come from this library; `context` may be null; `out_set`
 must be writable.
 */
enum BcStatus bc_downscale(const struct BcScore *score,
                           const struct BcSnapshotSet *source,
                           const struct BcSnapshotSet *context,
                           struct BcSchedule s,
                           size_t k_star,
                           double t_star,
                           size_t n_steps,
                           double t_end,
                           uint64_t seed,
                           struct BcSnapshotSet **out_set);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRIDGECAST_H */
