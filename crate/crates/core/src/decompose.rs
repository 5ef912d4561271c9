//! Latent components of the day-by-region change matrix.
//!
//! The matrix has one column per region and one row per day. Columns are
//! mean-centred (by default) and factorised with a singular value
//! decomposition; the leading `K` factors give archetypal day series
//! (`components`, in minutes) and per-region mixing weights (`loadings`).

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use log::warn;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mobility::DeltaSeries;

pub const DEFAULT_COMPONENTS: usize = 3;
pub const DEFAULT_OUTLIER_STD: f64 = 4.0;

/// Components whose singular value falls below this fraction of the largest
/// carry no signal; their loadings are arbitrary.
const DEGENERATE_SINGULAR_RATIO: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMatrix {
    /// days × regions
    pub values: DMatrix<f64>,
    /// 1-based day-of-year label of each row.
    pub day_index: Vec<usize>,
    pub region_index: Vec<String>,
}

impl DeltaMatrix {
    pub fn n_days(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_regions(&self) -> usize {
        self.values.ncols()
    }

    /// Keeps the columns whose region is not in `drop`.
    pub fn without_regions(&self, drop: &HashSet<&str>) -> DeltaMatrix {
        let keep: Vec<usize> = (0..self.n_regions())
            .filter(|j| !drop.contains(self.region_index[*j].as_str()))
            .collect();
        DeltaMatrix {
            values: self.values.select_columns(&keep),
            day_index: self.day_index.clone(),
            region_index: keep.iter().map(|j| self.region_index[*j].clone()).collect(),
        }
    }
}

/// Stacks delta series as columns, ordered by region id.
///
/// `first_day` labels row 0 (1-based day of year).
pub fn assemble_matrix(deltas: &[DeltaSeries], first_day: usize) -> Result<DeltaMatrix> {
    let mut sorted: Vec<&DeltaSeries> = deltas.iter().collect();
    sorted.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    if let Some(w) = sorted.windows(2).find(|w| w[0].region_id == w[1].region_id) {
        return Err(Error::DuplicateRegion(w[0].region_id.clone()));
    }
    let first = sorted
        .first()
        .ok_or_else(|| Error::Empty("no delta series to assemble".into()))?;
    let m = first.values.len();
    for d in &sorted {
        if d.values.len() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                actual: d.values.len(),
            });
        }
        if d.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("delta series {}", d.region_id)));
        }
    }
    let values = DMatrix::from_fn(m, sorted.len(), |i, j| sorted[j].values[i]);
    Ok(DeltaMatrix {
        values,
        day_index: (first_day..first_day + m).collect(),
        region_index: sorted.iter().map(|d| d.region_id.clone()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Centering {
    /// Use the matrix as given.
    None,
    /// Subtract each region's mean over days.
    #[default]
    Columns,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// days × K, columns of `U_K Σ_K`.
    pub components: DMatrix<f64>,
    /// Non-increasing.
    pub singular_values: Vec<f64>,
    /// regions × K, rows of `V_K`.
    pub loadings: DMatrix<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub total_explained: f64,
    pub k: usize,
    pub centering: Centering,
    /// Per-region offsets removed before factorising (zeros when uncentred).
    pub column_means: Vec<f64>,
    pub region_index: Vec<String>,
}

impl Decomposition {
    /// Rank-`K` approximation of the original (uncentred) matrix.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut r = &self.components * self.loadings.transpose();
        for (j, mean) in self.column_means.iter().enumerate() {
            r.column_mut(j).add_scalar_mut(*mean);
        }
        r
    }
}

fn centred(matrix: &DeltaMatrix, centering: Centering) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if matrix.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("delta matrix".into()));
    }
    let mut values = matrix.values.clone();
    let means = match centering {
        Centering::None => vec![0.0; values.ncols()],
        Centering::Columns => values.column_iter().map(|c| c.mean()).collect(),
    };
    for (j, mean) in means.iter().enumerate() {
        values.column_mut(j).add_scalar_mut(-mean);
    }
    Ok((values, means))
}

struct FullSvd {
    u: DMatrix<f64>,
    singular_values: Vec<f64>,
    v: DMatrix<f64>,
    total: f64,
}

fn full_svd(values: DMatrix<f64>) -> Result<FullSvd> {
    let total = values.norm_squared();
    if total == 0.0 {
        return Err(Error::Numeric("matrix has zero total variance".into()));
    }
    let (m, n) = values.shape();
    let dense = faer::Mat::<f64>::from_fn(m, n, |i, j| values[(i, j)]);
    let svd = dense
        .thin_svd()
        .map_err(|e| Error::Numeric(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (svd.U(), svd.S(), svd.V());
    let r = s.dim();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|a, b| s[*b].total_cmp(&s[*a]));
    Ok(FullSvd {
        u: DMatrix::from_fn(m, r, |i, c| u[(i, order[c])]),
        singular_values: order.iter().map(|i| s[*i]).collect(),
        v: DMatrix::from_fn(n, r, |j, c| v[(j, order[c])]),
        total,
    })
}

fn check_rank(matrix: &DeltaMatrix, k: usize) -> Result<()> {
    let max = matrix.n_days().min(matrix.n_regions());
    if k == 0 || k > max {
        return Err(Error::InvalidParameter(format!(
            "number of components {k} outside 1..={max}"
        )));
    }
    Ok(())
}

/// Leading `k` singular factors of the (centred) matrix.
///
/// Each component is oriented so that its loading column sums to a
/// non-negative value; an exact zero sum makes the first nonzero loading
/// positive.
pub fn truncated_svd(matrix: &DeltaMatrix, k: usize, centering: Centering) -> Result<Decomposition> {
    check_rank(matrix, k)?;
    let (values, column_means) = centred(matrix, centering)?;
    let svd = full_svd(values)?;

    let mut u = svd.u.columns(0, k).into_owned();
    let mut v = svd.v.columns(0, k).into_owned();
    for c in 0..k {
        let sum: f64 = v.column(c).sum();
        let flip = if sum != 0.0 {
            sum < 0.0
        } else {
            v.column(c).iter().find(|x| **x != 0.0).is_some_and(|x| *x < 0.0)
        };
        if flip {
            u.column_mut(c).neg_mut();
            v.column_mut(c).neg_mut();
        }
    }
    let singular_values: Vec<f64> = svd.singular_values[..k].to_vec();
    let mut components = u;
    for (c, s) in singular_values.iter().enumerate() {
        components.column_mut(c).scale_mut(*s);
    }
    let explained_variance_ratio: Vec<f64> =
        singular_values.iter().map(|s| s * s / svd.total).collect();
    let total_explained = explained_variance_ratio.iter().sum();

    Ok(Decomposition {
        components,
        singular_values,
        loadings: v,
        explained_variance_ratio,
        total_explained,
        k,
        centering,
        column_means,
        region_index: matrix.region_index.clone(),
    })
}

/// Cumulative explained fraction for `K = 1..=k_max`.
pub fn explained_variance_curve(
    matrix: &DeltaMatrix,
    k_max: usize,
    centering: Centering,
) -> Result<Vec<(usize, f64)>> {
    check_rank(matrix, k_max)?;
    let (values, _) = centred(matrix, centering)?;
    let svd = full_svd(values)?;
    let mut acc = 0.0;
    Ok(svd.singular_values[..k_max]
        .iter()
        .enumerate()
        .map(|(i, s)| {
            acc += s * s / svd.total;
            (i + 1, acc)
        })
        .collect())
}

/// Population z-scores of each loading column.
///
/// Zero-variance and signal-free columns score zero everywhere.
fn standardized_loadings(dec: &Decomposition) -> DMatrix<f64> {
    let n = dec.loadings.nrows() as f64;
    let top = dec.singular_values.first().copied().unwrap_or(0.0);
    let mut z = DMatrix::zeros(dec.loadings.nrows(), dec.k);
    for c in 0..dec.k {
        if dec.singular_values[c] <= top * DEGENERATE_SINGULAR_RATIO {
            continue;
        }
        let col = dec.loadings.column(c);
        let mean = col.sum() / n;
        let std = (col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std == 0.0 {
            continue;
        }
        for (i, x) in col.iter().enumerate() {
            z[(i, c)] = (x - mean) / std;
        }
    }
    z
}

/// One pass of outlier removal in loading space.
///
/// Fits up to three components, standardises each loading column and drops
/// every region with an absolute z-score at or above `threshold` on any of
/// them. The caller refits on the returned matrix.
pub fn remove_outliers(
    matrix: &DeltaMatrix,
    threshold: f64,
    centering: Centering,
) -> Result<(DeltaMatrix, Vec<String>)> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "outlier threshold must be positive, got {threshold}"
        )));
    }
    let k = DEFAULT_COMPONENTS.min(matrix.n_days()).min(matrix.n_regions());
    let dec = truncated_svd(matrix, k, centering)?;
    let z = standardized_loadings(&dec);
    let removed: Vec<String> = (0..matrix.n_regions())
        .filter(|i| z.row(*i).iter().any(|v| v.abs() >= threshold))
        .map(|i| matrix.region_index[i].clone())
        .collect();
    if removed.len() == matrix.n_regions() {
        return Err(Error::Empty("outlier removal would drop every region".into()));
    }
    let drop: HashSet<&str> = removed.iter().map(String::as_str).collect();
    Ok((matrix.without_regions(&drop), removed))
}

/// Coefficient of determination of each region's rank-`K` reconstruction,
/// against that region's own mean. `None` for a constant series.
pub fn region_r_squared(matrix: &DeltaMatrix, dec: &Decomposition) -> Result<Vec<Option<f64>>> {
    if dec.loadings.nrows() != matrix.n_regions() || dec.components.nrows() != matrix.n_days() {
        return Err(Error::LengthMismatch {
            expected: matrix.n_regions(),
            actual: dec.loadings.nrows(),
        });
    }
    let fitted = dec.reconstruct();
    Ok((0..matrix.n_regions())
        .map(|j| {
            let y = matrix.values.column(j);
            let mean = y.mean();
            let total: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
            if total == 0.0 {
                return None;
            }
            let resid: f64 = y
                .iter()
                .zip(fitted.column(j).iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            Some(1.0 - resid / total)
        })
        .collect())
}

/// Min-max scales each loading column to `[0, 1]`; constant columns map to 0.5.
pub fn normalize_loadings(dec: &Decomposition) -> DMatrix<f64> {
    let mut out = dec.loadings.clone();
    for (c, mut col) in out.column_iter_mut().enumerate() {
        let lo = col.min();
        let hi = col.max();
        if hi > lo {
            col.apply(|v| *v = (*v - lo) / (hi - lo));
        } else {
            warn!("component {} has constant loadings; normalizing to 0.5", c + 1);
            col.fill(0.5);
        }
    }
    out
}

/// Maps three `[0, 1]` weights to 8-bit channels, rounding half up.
pub fn rgb_encode(weights: [f64; 3]) -> Result<[u8; 3]> {
    let mut out = [0u8; 3];
    for (slot, w) in out.iter_mut().zip(weights) {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::InvalidData(format!("color weight {w} outside [0, 1]")));
        }
        *slot = (w * 255.0 + 0.5).floor() as u8;
    }
    Ok(out)
}

pub fn hex_color(rgb: [u8; 3]) -> String {
    format!("#{:02X}{:02X}{:02X}", rgb[0], rgb[1], rgb[2])
}

/// Per-region summary used by the exports.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFit {
    pub region_id: String,
    pub r_squared: Option<f64>,
    pub normalized_loadings: Vec<f64>,
}

pub fn region_fits(matrix: &DeltaMatrix, dec: &Decomposition) -> Result<Vec<RegionFit>> {
    let r2 = region_r_squared(matrix, dec)?;
    let norm = normalize_loadings(dec);
    Ok(r2
        .into_iter()
        .enumerate()
        .map(|(j, r_squared)| RegionFit {
            region_id: dec.region_index[j].clone(),
            r_squared,
            normalized_loadings: norm.row(j).iter().copied().collect(),
        })
        .collect())
}

impl RegionFit {
    /// First three normalized loadings as a color; missing channels are zero.
    pub fn rgb(&self) -> Result<[u8; 3]> {
        let mut w = [0.0; 3];
        for (slot, v) in w.iter_mut().zip(&self.normalized_loadings) {
            *slot = *v;
        }
        rgb_encode(w)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn join(cells: impl IntoIterator<Item = String>) -> String {
    cells.into_iter().collect::<Vec<_>>().join(",")
}

fn pc_header(prefix: &str, k: usize, suffix: &str) -> Vec<String> {
    (1..=k).map(|c| format!("{prefix}{c}{suffix}")).collect()
}

pub fn write_components_csv<W: Write>(mut out: W, matrix: &DeltaMatrix, dec: &Decomposition) -> Result<()> {
    let io_err = |e| Error::io("writing components", e);
    let header = std::iter::once("day".to_string()).chain(pc_header("pc", dec.k, ""));
    writeln!(out, "{}", join(header)).map_err(io_err)?;
    for (i, day) in matrix.day_index.iter().enumerate() {
        let row = std::iter::once(day.to_string())
            .chain((0..dec.k).map(|c| dec.components[(i, c)].to_string()));
        writeln!(out, "{}", join(row)).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// `region_id, pc1..pcK` (raw) then `pc1_norm..pcK_norm`.
pub fn write_loadings_csv<W: Write>(mut out: W, dec: &Decomposition) -> Result<()> {
    let io_err = |e| Error::io("writing loadings", e);
    let norm = normalize_loadings(dec);
    let header = std::iter::once("region_id".to_string())
        .chain(pc_header("pc", dec.k, ""))
        .chain(pc_header("pc", dec.k, "_norm"));
    writeln!(out, "{}", join(header)).map_err(io_err)?;
    for (j, id) in dec.region_index.iter().enumerate() {
        let row = std::iter::once(id.clone())
            .chain((0..dec.k).map(|c| dec.loadings[(j, c)].to_string()))
            .chain((0..dec.k).map(|c| norm[(j, c)].to_string()));
        writeln!(out, "{}", join(row)).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Loadings as read back from [`write_loadings_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingsTable {
    pub region_index: Vec<String>,
    pub raw: DMatrix<f64>,
    pub normalized: DMatrix<f64>,
}

pub fn read_loadings_csv(text: &str) -> Result<LoadingsTable> {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidData("empty loadings file".into()))?;
    let cols = header.split(',').count() - 1;
    if cols == 0 || cols % 2 != 0 {
        return Err(Error::InvalidData(format!("bad loadings header `{header}`")));
    }
    let k = cols / 2;
    let mut ids = Vec::new();
    let mut cells = Vec::new();
    for line in lines {
        let mut parts = line.split(',');
        ids.push(parts.next().unwrap_or_default().to_string());
        let row: Vec<f64> = parts
            .map(|c| c.parse().map_err(|_| Error::InvalidData(format!("bad loading `{c}`"))))
            .collect::<Result<_>>()?;
        if row.len() != cols {
            return Err(Error::LengthMismatch {
                expected: cols,
                actual: row.len(),
            });
        }
        cells.push(row);
    }
    let n = ids.len();
    Ok(LoadingsTable {
        raw: DMatrix::from_fn(n, k, |i, c| cells[i][c]),
        normalized: DMatrix::from_fn(n, k, |i, c| cells[i][k + c]),
        region_index: ids,
    })
}

pub fn write_r_squared_csv<W: Write>(mut out: W, fits: &[RegionFit]) -> Result<()> {
    let io_err = |e| Error::io("writing r_squared", e);
    writeln!(out, "region_id,r_squared").map_err(io_err)?;
    for f in fits {
        writeln!(out, "{},{}", f.region_id, fmt_opt(f.r_squared)).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn write_colors_csv<W: Write>(mut out: W, fits: &[RegionFit]) -> Result<()> {
    let io_err = |e| Error::io("writing colors", e);
    writeln!(out, "region_id,color").map_err(io_err)?;
    for f in fits {
        writeln!(out, "{},{}", f.region_id, hex_color(f.rgb()?)).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn write_explained_variance_csv<W: Write>(
    mut out: W,
    dec: &Decomposition,
    curve: &[(usize, f64)],
) -> Result<()> {
    let io_err = |e| Error::io("writing explained variance", e);
    writeln!(out, "k,ratio,cumulative").map_err(io_err)?;
    for (k, cumulative) in curve {
        let ratio = dec
            .explained_variance_ratio
            .get(k - 1)
            .map_or_else(String::new, f64::to_string);
        writeln!(out, "{k},{ratio},{cumulative}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Properties joined onto region polygons by the GeoJSON export.
pub fn fit_properties(fits: &[RegionFit]) -> Result<BTreeMap<String, serde_json::Map<String, serde_json::Value>>> {
    fits.iter()
        .map(|f| {
            let mut props = serde_json::Map::new();
            for (c, v) in f.normalized_loadings.iter().enumerate() {
                props.insert(format!("pc{}", c + 1), serde_json::json!(v));
            }
            props.insert("r_squared".into(), serde_json::json!(f.r_squared));
            props.insert("rgb".into(), serde_json::json!(hex_color(f.rgb()?)));
            Ok((f.region_id.clone(), props))
        })
        .collect()
}
