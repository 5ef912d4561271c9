#ifndef MOBILITY_TRENDS_H
#define MOBILITY_TRENDS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MtStatus {
  MT_STATUS_OK = 0,
  MT_STATUS_NULL_POINTER = 1,
  MT_STATUS_INVALID_ARGUMENT = 2,
  MT_STATUS_DATA_ERROR = 3,
  MT_STATUS_NUMERIC_ERROR = 4,
  MT_STATUS_PANIC = 5,
} MtStatus;

typedef enum MtStandardization {
  MT_STANDARDIZATION_BINARY = 0,
  MT_STANDARDIZATION_ROW = 1,
} MtStandardization;

typedef enum MtInference {
  MT_INFERENCE_NORMALITY = 0,
  MT_INFERENCE_RANDOMIZATION = 1,
  MT_INFERENCE_PERMUTATION = 2,
} MtInference;

// Quadrant codes written by [`mt_local_moran`].
typedef enum MtQuadrant {
  MT_QUADRANT_HIGH_HIGH = 0,
  MT_QUADRANT_LOW_HIGH = 1,
  MT_QUADRANT_LOW_LOW = 2,
  MT_QUADRANT_HIGH_LOW = 3,
} MtQuadrant;

// Truncated SVD of an [`MtDeltaMatrix`].
typedef struct MtDecomposition MtDecomposition;

// Days × regions matrix of change series.
typedef struct MtDeltaMatrix MtDeltaMatrix;

// Neighbour structure and weights.
typedef struct MtWeights MtWeights;

typedef struct MtMoranResult {
  double i;
  double expected_i;
  double variance;
  double z_score;
  double p_value;
} MtMoranResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call into this library on the same thread.
const char *mt_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *mt_version(void);

// Centered rolling mean of `len` daily values with window `2 * radius + 1`.
// `out_len` must equal `len - 2 * radius`.
//
// # Safety
// `values` must point to `len` doubles and `out` to `out_len` writable doubles.
enum MtStatus mt_tspp(const double *values, size_t len, size_t radius, double *out, size_t out_len);

// Copies a row-major `n_days × n_regions` matrix into a new handle.
// Region ids are the column indices.
//
// # Safety
// `values` must point to `n_days * n_regions` doubles; `out` must be writable.
enum MtStatus mt_delta_matrix_new(const double *values,
                                  size_t n_days,
                                  size_t n_regions,
                                  struct MtDeltaMatrix **out);

// # Safety
// `matrix` must be null or a handle from [`mt_delta_matrix_new`] not yet freed.
void mt_delta_matrix_free(struct MtDeltaMatrix *matrix);

// Rank-`k` truncated SVD, optionally centering each region's series first.
//
// # Safety
// `matrix` must be a live handle; `out` must be writable.
enum MtStatus mt_decompose(const struct MtDeltaMatrix *matrix,
                           size_t k,
                           bool center,
                           struct MtDecomposition **out);

// Removes regions whose standardized loading reaches `threshold` on any of
// the first three components. Writes the number removed to `removed` and
// replaces `*matrix` with the reduced matrix.
//
// # Safety
// `matrix` must point to a live handle pointer; `removed` must be writable.
enum MtStatus mt_remove_outliers(struct MtDeltaMatrix **matrix,
                                 double threshold,
                                 bool center,
                                 size_t *removed);

// Number of regions (columns) in the matrix, or 0 for null.
//
// # Safety
// `matrix` must be null or a live handle.
size_t mt_delta_matrix_regions(const struct MtDeltaMatrix *matrix);

// # Safety
// `dec` must be null or a handle from [`mt_decompose`] not yet freed.
void mt_decomposition_free(struct MtDecomposition *dec);

// Number of components, or 0 for null.
//
// # Safety
// `dec` must be null or a live handle.
size_t mt_decomposition_k(const struct MtDecomposition *dec);

// Writes `k` singular values, largest first.
//
// # Safety
// `dec` must be a live handle and `out` must hold `len` doubles.
enum MtStatus mt_decomposition_singular_values(const struct MtDecomposition *dec,
                                               double *out,
                                               size_t len);

// Writes per-component explained variance ratios and their sum.
//
// # Safety
// `dec` must be a live handle, `ratios` must hold `len` doubles and `total`
// must be writable or null.
enum MtStatus mt_decomposition_explained(const struct MtDecomposition *dec,
                                         double *ratios,
                                         size_t len,
                                         double *total);

// Writes the regions × k loadings, row-major.
//
// # Safety
// `dec` must be a live handle and `out` must hold `len` doubles.
enum MtStatus mt_decomposition_loadings(const struct MtDecomposition *dec, double *out, size_t len);

// Writes the days × k components (`U_K Σ_K`), row-major.
//
// # Safety
// `dec` must be a live handle and `out` must hold `len` doubles.
enum MtStatus mt_decomposition_components(const struct MtDecomposition *dec,
                                          double *out,
                                          size_t len);

// Builds binary weights from a compressed adjacency list: the neighbours of
// region `i` are `neighbors[offsets[i]..offsets[i + 1]]`. `offsets` holds
// `n + 1` entries. The relation must be symmetric.
//
// # Safety
// `offsets` must hold `n + 1` entries and `neighbors` `offsets[n]` entries.
enum MtStatus mt_weights_from_adjacency(const size_t *offsets,
                                        const size_t *neighbors,
                                        size_t n,
                                        struct MtWeights **out);

// Queen contiguity from a GeoJSON FeatureCollection. Regions keep the
// feature order of the input.
//
// # Safety
// `geojson` and `id_property` must be NUL-terminated UTF-8 strings.
enum MtStatus mt_weights_from_geojson(const char *geojson,
                                      const char *id_property,
                                      double snap,
                                      struct MtWeights **out);

// Re-weights in place.
//
// # Safety
// `weights` must be a live handle.
enum MtStatus mt_weights_standardize(struct MtWeights *weights, enum MtStandardization mode);

// Number of regions, or 0 for null.
//
// # Safety
// `weights` must be null or a live handle.
size_t mt_weights_len(const struct MtWeights *weights);

// Number of neighbours of region `i`, or 0 when out of range.
//
// # Safety
// `weights` must be null or a live handle.
size_t mt_weights_degree(const struct MtWeights *weights, size_t i);

// # Safety
// `weights` must be null or a handle not yet freed.
void mt_weights_free(struct MtWeights *weights);

// Global Moran's I of `n` values aligned with the weights' regions.
//
// # Safety
// `weights` must be a live handle, `values` must hold `n` doubles and `out`
// must be writable.
enum MtStatus mt_global_moran(const struct MtWeights *weights,
                              const double *values,
                              size_t n,
                              enum MtInference inference,
                              size_t permutations,
                              uint64_t seed,
                              struct MtMoranResult *out);

// Local Moran's I. Each output buffer holds `n` entries; `quadrant` receives
// [`MtQuadrant`] codes and `significant` 0 or 1.
//
// # Safety
// `weights` must be a live handle; `values` and every output must hold `n`
// elements.
enum MtStatus mt_local_moran(const struct MtWeights *weights,
                             const double *values,
                             size_t n,
                             size_t permutations,
                             uint64_t seed,
                             double alpha,
                             double *local_i,
                             double *pseudo_p,
                             int32_t *quadrant,
                             uint8_t *significant);

// Pearson's r and two-sided p-value; NaN entries are dropped pairwise.
//
// # Safety
// `x` and `y` must hold `n` doubles; `r`, `p` and `n_used` must be writable
// (`n_used` may be null).
enum MtStatus mt_pearson(const double *x,
                         const double *y,
                         size_t n,
                         double *r,
                         double *p,
                         size_t *n_used);

// k-means with k-means++ seeding on `n × dims` row-major points.
//
// # Safety
// `points` must hold `n * dims` doubles, `labels` `n` entries; `inertia` may
// be null.
enum MtStatus mt_kmeans(const double *points,
                        size_t n,
                        size_t dims,
                        size_t k,
                        uint64_t seed,
                        size_t n_init,
                        size_t max_iter,
                        size_t *labels,
                        double *inertia);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOBILITY_TRENDS_H */
