//! C ABI over the mobility-trends library.
//!
//! Every fallible function returns an [`MtStatus`]; on failure the message is
//! available from [`mt_last_error_message`] on the same thread. Objects are
//! opaque handles created by `*_new` style functions and released with the
//! matching `*_free`. Matrices cross the boundary as row-major `double`
//! buffers. No function panics across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use mobility_trends::cluster::{self, KMeansOptions};
use mobility_trends::correlate;
use mobility_trends::decompose::{self, Centering, DeltaMatrix, Decomposition};
use mobility_trends::geo;
use mobility_trends::ingest::RegionSeries;
use mobility_trends::mobility;
use mobility_trends::spatial::{self, Inference, Quadrant, SpatialWeights, Standardization};
use mobility_trends::{Error, ErrorKind};
use nalgebra::DMatrix;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    NumericError = 4,
    Panic = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtStandardization {
    Binary = 0,
    Row = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtInference {
    Normality = 0,
    Randomization = 1,
    Permutation = 2,
}

/// Quadrant codes written by [`mt_local_moran`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtQuadrant {
    HighHigh = 0,
    LowHigh = 1,
    LowLow = 2,
    HighLow = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtMoranResult {
    pub i: f64,
    pub expected_i: f64,
    pub variance: f64,
    pub z_score: f64,
    pub p_value: f64,
}

/// Days × regions matrix of change series.
pub struct MtDeltaMatrix(DeltaMatrix);

/// Truncated SVD of an [`MtDeltaMatrix`].
pub struct MtDecomposition(Decomposition);

/// Neighbour structure and weights.
pub struct MtWeights(SpatialWeights);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> MtStatus {
    match e.kind() {
        ErrorKind::Usage => MtStatus::InvalidArgument,
        ErrorKind::Data => MtStatus::DataError,
        ErrorKind::Numeric => MtStatus::NumericError,
    }
}

struct Failure(MtStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MtStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MtStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MtStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MtStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

fn check_len(expected: usize, got: usize, what: &str) -> Result<(), Failure> {
    if expected == got {
        Ok(())
    } else {
        Err(invalid(format!("{what} has length {got}, expected {expected}")))
    }
}

fn copy_matrix(m: &DMatrix<f64>, out: &mut [f64]) -> Result<(), Failure> {
    check_len(m.nrows() * m.ncols(), out.len(), "output buffer")?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out[i * m.ncols() + j] = m[(i, j)];
        }
    }
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Centered rolling mean of `len` daily values with window `2 * radius + 1`.
/// `out_len` must equal `len - 2 * radius`.
///
/// # Safety
/// `values` must point to `len` doubles and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mt_tspp(
    values: *const f64,
    len: usize,
    radius: usize,
    out: *mut f64,
    out_len: usize,
) -> MtStatus {
    guard(|| {
        let values = input(values, len, "values")?;
        let out = output(out, out_len, "out")?;
        let series = RegionSeries::from_values("ffi", 2019, values.to_vec());
        let t = mobility::tspp(&series, radius)?;
        check_len(t.values.len(), out.len(), "out")?;
        out.copy_from_slice(&t.values);
        Ok(())
    })
}

/// Copies a row-major `n_days × n_regions` matrix into a new handle.
/// Region ids are the column indices.
///
/// # Safety
/// `values` must point to `n_days * n_regions` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mt_delta_matrix_new(
    values: *const f64,
    n_days: usize,
    n_regions: usize,
    out: *mut *mut MtDeltaMatrix,
) -> MtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if n_days == 0 || n_regions == 0 {
            return Err(invalid("matrix dimensions must be positive"));
        }
        let len = n_days
            .checked_mul(n_regions)
            .ok_or_else(|| invalid("matrix dimensions overflow"))?;
        let values = input(values, len, "values")?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Failure(MtStatus::DataError, "matrix contains non-finite values".into()));
        }
        let m = DeltaMatrix {
            values: DMatrix::from_row_slice(n_days, n_regions, values),
            day_index: (1..=n_days).collect(),
            region_index: (0..n_regions).map(|j| j.to_string()).collect(),
        };
        *out = Box::into_raw(Box::new(MtDeltaMatrix(m)));
        Ok(())
    })
}

/// # Safety
/// `matrix` must be null or a handle from [`mt_delta_matrix_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mt_delta_matrix_free(matrix: *mut MtDeltaMatrix) {
    if !matrix.is_null() {
        drop(Box::from_raw(matrix));
    }
}

/// Rank-`k` truncated SVD, optionally centering each region's series first.
///
/// # Safety
/// `matrix` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mt_decompose(
    matrix: *const MtDeltaMatrix,
    k: usize,
    center: bool,
    out: *mut *mut MtDecomposition,
) -> MtStatus {
    guard(|| {
        let m = handle(matrix, "matrix")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let centering = if center { Centering::Columns } else { Centering::None };
        let dec = decompose::truncated_svd(&m.0, k, centering)?;
        *out = Box::into_raw(Box::new(MtDecomposition(dec)));
        Ok(())
    })
}

/// Removes regions whose standardized loading reaches `threshold` on any of
/// the first three components. Writes the number removed to `removed` and
/// replaces `*matrix` with the reduced matrix.
///
/// # Safety
/// `matrix` must point to a live handle pointer; `removed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mt_remove_outliers(
    matrix: *mut *mut MtDeltaMatrix,
    threshold: f64,
    center: bool,
    removed: *mut usize,
) -> MtStatus {
    guard(|| {
        if matrix.is_null() || (*matrix).is_null() {
            return Err(null("matrix"));
        }
        if removed.is_null() {
            return Err(null("removed"));
        }
        let centering = if center { Centering::Columns } else { Centering::None };
        let (kept, dropped) = decompose::remove_outliers(&(**matrix).0, threshold, centering)?;
        (**matrix).0 = kept;
        *removed = dropped.len();
        Ok(())
    })
}

/// Number of regions (columns) in the matrix, or 0 for null.
///
/// # Safety
/// `matrix` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mt_delta_matrix_regions(matrix: *const MtDeltaMatrix) -> usize {
    matrix.as_ref().map_or(0, |m| m.0.n_regions())
}

/// # Safety
/// `dec` must be null or a handle from [`mt_decompose`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mt_decomposition_free(dec: *mut MtDecomposition) {
    if !dec.is_null() {
        drop(Box::from_raw(dec));
    }
}

/// Number of components, or 0 for null.
///
/// # Safety
/// `dec` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mt_decomposition_k(dec: *const MtDecomposition) -> usize {
    dec.as_ref().map_or(0, |d| d.0.k)
}

/// Writes `k` singular values, largest first.
///
/// # Safety
/// `dec` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mt_decomposition_singular_values(
    dec: *const MtDecomposition,
    out: *mut f64,
    len: usize,
) -> MtStatus {
    guard(|| {
        let d = handle(dec, "decomposition")?;
        let out = output(out, len, "out")?;
        check_len(d.0.k, len, "out")?;
        out.copy_from_slice(&d.0.singular_values);
        Ok(())
    })
}

/// Writes per-component explained variance ratios and their sum.
///
/// # Safety
/// `dec` must be a live handle, `ratios` must hold `len` doubles and `total`
/// must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn mt_decomposition_explained(
    dec: *const MtDecomposition,
    ratios: *mut f64,
    len: usize,
    total: *mut f64,
) -> MtStatus {
    guard(|| {
        let d = handle(dec, "decomposition")?;
        let out = output(ratios, len, "ratios")?;
        check_len(d.0.k, len, "ratios")?;
        out.copy_from_slice(&d.0.explained_variance_ratio);
        if !total.is_null() {
            *total = d.0.total_explained;
        }
        Ok(())
    })
}

/// Writes the regions × k loadings, row-major.
///
/// # Safety
/// `dec` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mt_decomposition_loadings(dec: *const MtDecomposition, out: *mut f64, len: usize) -> MtStatus {
    guard(|| {
        let d = handle(dec, "decomposition")?;
        copy_matrix(&d.0.loadings, output(out, len, "out")?)
    })
}

/// Writes the days × k components (`U_K Σ_K`), row-major.
///
/// # Safety
/// `dec` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mt_decomposition_components(
    dec: *const MtDecomposition,
    out: *mut f64,
    len: usize,
) -> MtStatus {
    guard(|| {
        let d = handle(dec, "decomposition")?;
        copy_matrix(&d.0.components, output(out, len, "out")?)
    })
}

/// Builds binary weights from a compressed adjacency list: the neighbours of
/// region `i` are `neighbors[offsets[i]..offsets[i + 1]]`. `offsets` holds
/// `n + 1` entries. The relation must be symmetric.
///
/// # Safety
/// `offsets` must hold `n + 1` entries and `neighbors` `offsets[n]` entries.
#[no_mangle]
pub unsafe extern "C" fn mt_weights_from_adjacency(
    offsets: *const usize,
    neighbors: *const usize,
    n: usize,
    out: *mut *mut MtWeights,
) -> MtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let offsets = input(offsets, n + 1, "offsets")?;
        let total = offsets[n];
        if offsets[0] != 0 || offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("offsets must start at 0 and be non-decreasing"));
        }
        let flat = input(neighbors, total, "neighbors")?;
        let lists = (0..n).map(|i| flat[offsets[i]..offsets[i + 1]].to_vec()).collect();
        let w = SpatialWeights::from_neighbors((0..n).map(|i| i.to_string()).collect(), lists)?;
        *out = Box::into_raw(Box::new(MtWeights(w)));
        Ok(())
    })
}

/// Queen contiguity from a GeoJSON FeatureCollection. Regions keep the
/// feature order of the input.
///
/// # Safety
/// `geojson` and `id_property` must be NUL-terminated UTF-8 strings.
#[no_mangle]
pub unsafe extern "C" fn mt_weights_from_geojson(
    geojson: *const c_char,
    id_property: *const c_char,
    snap: f64,
    out: *mut *mut MtWeights,
) -> MtStatus {
    guard(|| {
        if geojson.is_null() || id_property.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let text = CStr::from_ptr(geojson).to_str().map_err(|_| invalid("geojson is not UTF-8"))?;
        let id = CStr::from_ptr(id_property)
            .to_str()
            .map_err(|_| invalid("id_property is not UTF-8"))?;
        let geoms = geo::read_geometries(text, id)?;
        let w = spatial::queen_weights(&geoms, snap)?;
        *out = Box::into_raw(Box::new(MtWeights(w)));
        Ok(())
    })
}

/// Re-weights in place.
///
/// # Safety
/// `weights` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mt_weights_standardize(weights: *mut MtWeights, mode: MtStandardization) -> MtStatus {
    guard(|| {
        let w = weights.as_mut().ok_or_else(|| null("weights"))?;
        let mode = match mode {
            MtStandardization::Binary => Standardization::Binary,
            MtStandardization::Row => Standardization::Row,
        };
        w.0 = spatial::standardize(&w.0, mode);
        Ok(())
    })
}

/// Number of regions, or 0 for null.
///
/// # Safety
/// `weights` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mt_weights_len(weights: *const MtWeights) -> usize {
    weights.as_ref().map_or(0, |w| w.0.n())
}

/// Number of neighbours of region `i`, or 0 when out of range.
///
/// # Safety
/// `weights` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mt_weights_degree(weights: *const MtWeights, i: usize) -> usize {
    weights
        .as_ref()
        .filter(|w| i < w.0.n())
        .map_or(0, |w| w.0.neighbors(i).len())
}

/// # Safety
/// `weights` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mt_weights_free(weights: *mut MtWeights) {
    if !weights.is_null() {
        drop(Box::from_raw(weights));
    }
}

/// Global Moran's I of `n` values aligned with the weights' regions.
///
/// # Safety
/// `weights` must be a live handle, `values` must hold `n` doubles and `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn mt_global_moran(
    weights: *const MtWeights,
    values: *const f64,
    n: usize,
    inference: MtInference,
    permutations: usize,
    seed: u64,
    out: *mut MtMoranResult,
) -> MtStatus {
    guard(|| {
        let w = handle(weights, "weights")?;
        let values = input(values, n, "values")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inference = match inference {
            MtInference::Normality => Inference::Normality,
            MtInference::Randomization => Inference::Randomization,
            MtInference::Permutation => Inference::Permutation,
        };
        let r = spatial::global_moran(values, &w.0, inference, permutations, seed)?;
        *out = MtMoranResult {
            i: r.i,
            expected_i: r.expected_i,
            variance: r.variance,
            z_score: r.z_score,
            p_value: r.p_value,
        };
        Ok(())
    })
}

/// Local Moran's I. Each output buffer holds `n` entries; `quadrant` receives
/// [`MtQuadrant`] codes and `significant` 0 or 1.
///
/// # Safety
/// `weights` must be a live handle; `values` and every output must hold `n`
/// elements.
#[no_mangle]
pub unsafe extern "C" fn mt_local_moran(
    weights: *const MtWeights,
    values: *const f64,
    n: usize,
    permutations: usize,
    seed: u64,
    alpha: f64,
    local_i: *mut f64,
    pseudo_p: *mut f64,
    quadrant: *mut i32,
    significant: *mut u8,
) -> MtStatus {
    guard(|| {
        let w = handle(weights, "weights")?;
        let values = input(values, n, "values")?;
        let local_i = output(local_i, n, "local_i")?;
        let pseudo_p = output(pseudo_p, n, "pseudo_p")?;
        let quadrant = output(quadrant, n, "quadrant")?;
        let significant = output(significant, n, "significant")?;
        let r = spatial::local_moran(values, &w.0, permutations, seed, alpha)?;
        for (k, s) in r.regions.iter().enumerate() {
            local_i[k] = s.local_i;
            pseudo_p[k] = s.pseudo_p;
            quadrant[k] = match s.quadrant {
                Quadrant::HH => MtQuadrant::HighHigh,
                Quadrant::LH => MtQuadrant::LowHigh,
                Quadrant::LL => MtQuadrant::LowLow,
                Quadrant::HL => MtQuadrant::HighLow,
            } as i32;
            significant[k] = u8::from(s.significant);
        }
        Ok(())
    })
}

/// Pearson's r and two-sided p-value; NaN entries are dropped pairwise.
///
/// # Safety
/// `x` and `y` must hold `n` doubles; `r`, `p` and `n_used` must be writable
/// (`n_used` may be null).
#[no_mangle]
pub unsafe extern "C" fn mt_pearson(
    x: *const f64,
    y: *const f64,
    n: usize,
    r: *mut f64,
    p: *mut f64,
    n_used: *mut usize,
) -> MtStatus {
    guard(|| {
        let x = input(x, n, "x")?;
        let y = input(y, n, "y")?;
        if r.is_null() || p.is_null() {
            return Err(null("output"));
        }
        let c = correlate::pearson(x, y)?;
        *r = c.r;
        *p = c.p_value;
        if !n_used.is_null() {
            *n_used = c.n_used;
        }
        Ok(())
    })
}

/// k-means with k-means++ seeding on `n × dims` row-major points.
///
/// # Safety
/// `points` must hold `n * dims` doubles, `labels` `n` entries; `inertia` may
/// be null.
#[no_mangle]
pub unsafe extern "C" fn mt_kmeans(
    points: *const f64,
    n: usize,
    dims: usize,
    k: usize,
    seed: u64,
    n_init: usize,
    max_iter: usize,
    labels: *mut usize,
    inertia: *mut f64,
) -> MtStatus {
    guard(|| {
        let len = n.checked_mul(dims).ok_or_else(|| invalid("dimensions overflow"))?;
        let points = input(points, len, "points")?;
        let labels = output(labels, n, "labels")?;
        let opts = KMeansOptions {
            k,
            seed,
            n_init,
            max_iter,
            ..KMeansOptions::default()
        };
        let fit = cluster::kmeans(&DMatrix::from_row_slice(n, dims, points), &opts)?;
        labels.copy_from_slice(&fit.labels);
        if !inertia.is_null() {
            *inertia = fit.inertia;
        }
        Ok(())
    })
}
