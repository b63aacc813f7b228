#ifndef MAGRAIL_H
#define MAGRAIL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call. Anything but `Ok` leaves a message readable through
 * `magrail_last_error_message`.
 */
typedef enum {
  MAGRAIL_STATUS_OK = 0,
  MAGRAIL_STATUS_NULL_ARGUMENT = 1,
  MAGRAIL_STATUS_INVALID_UTF8 = 2,
  MAGRAIL_STATUS_IO = 3,
  MAGRAIL_STATUS_PARSE = 4,
  MAGRAIL_STATUS_DOMAIN = 5,
  MAGRAIL_STATUS_OUT_OF_BOUNDS = 6,
  MAGRAIL_STATUS_COLLAPSE = 7,
  MAGRAIL_STATUS_INTERNAL = 8,
} MagrailStatus;

/**
 * Weighting kernel selector for `MagrailPfConfig`.
 */
typedef enum {
  /**
   * 1 / (1 + |a - b|); the recommended heavy-tailed kernel.
   */
  MAGRAIL_KERNEL_MODIFIED = 0,
  /**
   * exp(-|a - b|^2 / (2 sigma^2)) with `gauss_sigma`.
   */
  MAGRAIL_KERNEL_GAUSSIAN = 1,
} MagrailKernel;

/**
 * Opaque pre-recorded magnetic map handle.
 */
typedef struct MagrailMap MagrailMap;

/**
 * Opaque particle filter handle.
 */
typedef struct MagrailPf MagrailPf;

/**
 * Particle filter parameters; obtain defaults from
 * `magrail_pf_config_default` and override fields as needed.
 */
typedef struct {
  double q;
  double dt;
  double ess_frac;
  double var_threshold;
  MagrailKernel kernel;
  double gauss_sigma;
} MagrailPfConfig;

/**
 * Weighted ensemble summary returned by step/estimate calls.
 */
typedef struct {
  double x_hat;
  double v_hat;
  double var_x;
  double ess;
} MagrailEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread; empty string
 * when no failure occurred yet. Valid until the next failing call.
 */
const char *magrail_last_error_message(void);

/**
 * Loads a map CSV (`s_m,lat_deg,lon_deg,bx,by,bz`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to writable
 * storage for one pointer. On success `*out` owns the map and must be
 * released with `magrail_map_free`.
 */
MagrailStatus magrail_map_load(const char *path, MagrailMap **out);

/**
 * # Safety
 * `map` must be a pointer from `magrail_map_load`, not freed before.
 */
void magrail_map_free(MagrailMap *map);

/**
 * Total arclength in meters, or NaN for a null handle.
 *
 * # Safety
 * `map` must be a live map handle or null.
 */
double magrail_map_length(const MagrailMap *map);

/**
 * Spatial sampling step in meters, or NaN for a null handle.
 *
 * # Safety
 * `map` must be a live map handle or null.
 */
double magrail_map_dx(const MagrailMap *map);

/**
 * Number of map samples, or 0 for a null handle.
 *
 * # Safety
 * `map` must be a live map handle or null.
 */
uint64_t magrail_map_sample_count(const MagrailMap *map);

/**
 * Interpolated field at arclength `s`, written into `out_bxyz[0..3]`.
 * Returns `OutOfBounds` (without touching `out_bxyz`) off the track.
 *
 * # Safety
 * `map` must be a live map handle; `out_bxyz` must point to three f64.
 */
MagrailStatus magrail_map_lookup_field(const MagrailMap *map, double s, double *out_bxyz);

/**
 * Geographic position at arclength `s`.
 *
 * # Safety
 * `map` must be a live map handle; `out_lat`/`out_lon` must be writable.
 */
MagrailStatus magrail_map_to_geo(const MagrailMap *map, double s, double *out_lat, double *out_lon);

/**
 * Great-circle distance in meters between two lat/lon pairs (degrees);
 * NaN when a coordinate is out of range.
 */
double magrail_haversine(double lat1, double lon1, double lat2, double lon2);

MagrailPfConfig magrail_pf_config_default(void);

/**
 * Cold-start ensemble: positions uniform over the track, velocities
 * uniform over `[v_min, v_max]`.
 *
 * # Safety
 * `map` must be a live map handle; `out` must be writable. On success
 * `*out` must be released with `magrail_pf_free`.
 */
MagrailStatus magrail_pf_init_uniform(const MagrailMap *map,
                                      uint64_t n_particles,
                                      double v_min,
                                      double v_max,
                                      uint64_t seed,
                                      MagrailPf **out);

/**
 * Warm-start ensemble around a known position.
 *
 * # Safety
 * Same contracts as `magrail_pf_init_uniform`.
 */
MagrailStatus magrail_pf_init_local(const MagrailMap *map,
                                    double x0,
                                    double spread,
                                    double v0,
                                    double v_spread,
                                    uint64_t n_particles,
                                    uint64_t seed,
                                    MagrailPf **out);

/**
 * # Safety
 * `pf` must be a pointer from an init call, not freed before.
 */
void magrail_pf_free(MagrailPf *pf);

/**
 * One filter update against the aggregated measurement `z_bxyz[0..3]`.
 * `Collapse` means every particle lost support; the filter is then
 * unusable and should be re-initialised.
 *
 * # Safety
 * `pf` and `map` must be live handles; `z_bxyz` points to three f64;
 * `cfg` to a valid config; `out_estimate` (optional) to writable storage.
 */
MagrailStatus magrail_pf_step(MagrailPf *pf,
                              const MagrailMap *map,
                              const double *z_bxyz,
                              const MagrailPfConfig *cfg,
                              MagrailEstimate *out_estimate);

/**
 * Current weighted estimate without advancing the filter.
 *
 * # Safety
 * `pf` must be a live filter handle; `out_estimate` must be writable.
 */
MagrailStatus magrail_pf_estimate(const MagrailPf *pf, MagrailEstimate *out_estimate);

/**
 * Full cold-start replay: runs the alignment-initialised pipeline over a
 * signal CSV (which must carry a velocity channel) and writes the
 * estimate stream and event log CSVs.
 *
 * # Safety
 * All paths must be NUL-terminated strings.
 */
MagrailStatus magrail_hybrid_localise_files(const char *map_path,
                                            const char *signal_path,
                                            const char *estimates_out,
                                            const char *events_out,
                                            uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAGRAIL_H */
