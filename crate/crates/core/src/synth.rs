//! Seeded synthetic panels with planted mobility archetypes.
//!
//! Each region's target-year series is its baseline plus a convex mixture of a
//! few archetype curves; the reference year carries the baseline alone. Regions
//! sit on a rectangular grid of square polygons so spatial statistics have a
//! known layout.

use std::io::Write;
use std::str::FromStr;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlate::CovariateTable;
use crate::error::{Error, Result};
use crate::geo::RegionGeometry;
use crate::ingest::{RegionSeries, DAYS_PER_YEAR, FEB29_INDEX};

pub const REFERENCE_YEAR: i32 = 2019;
pub const TARGET_YEAR: i32 = 2020;
const CELL_SIZE: f64 = 0.25;
const ORIGIN: [f64; 2] = [-100.0, 30.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchetypeShape {
    /// Drop in mid-March that only partly recovers by year end.
    LongTermDrop,
    /// Drop confined to the summer months.
    ShortTermDrop,
    /// No drop; a slow rise after March.
    NoDrop,
}

impl ArchetypeShape {
    pub fn name(self) -> &'static str {
        match self {
            ArchetypeShape::LongTermDrop => "long_term_drop",
            ArchetypeShape::ShortTermDrop => "short_term_drop",
            ArchetypeShape::NoDrop => "no_drop",
        }
    }

    /// Piecewise-linear template over `n_days` days.
    pub fn template(self, n_days: usize) -> Vec<f64> {
        let knots: &[(f64, f64)] = match self {
            ArchetypeShape::LongTermDrop => &[(0.0, 0.0), (70.0, 0.0), (88.0, -1.0), (130.0, -0.9), (365.0, -0.55)],
            ArchetypeShape::ShortTermDrop => &[(0.0, 0.0), (150.0, 0.0), (172.0, -1.0), (215.0, -0.8), (250.0, 0.0), (365.0, 0.0)],
            ArchetypeShape::NoDrop => &[(0.0, 0.0), (75.0, 0.0), (365.0, 0.6)],
        };
        let scale = 365.0 / n_days as f64;
        (0..n_days)
            .map(|d| {
                let t = d as f64 * scale;
                let k = knots.windows(2).find(|w| t <= w[1].0).unwrap_or(&knots[knots.len() - 2..]);
                let (a, b) = (k[0], k[1]);
                a.1 + (b.1 - a.1) * (t - a.0) / (b.0 - a.0)
            })
            .collect()
    }
}

impl FromStr for ArchetypeShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long_term_drop" => Ok(ArchetypeShape::LongTermDrop),
            "short_term_drop" => Ok(ArchetypeShape::ShortTermDrop),
            "no_drop" => Ok(ArchetypeShape::NoDrop),
            _ => Err(Error::InvalidParameter(format!("unknown archetype `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub shape: ArchetypeShape,
    /// Root-mean-square size of the planted curve.
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Symmetric Dirichlet weights.
    Dirichlet { alpha: f64 },
    /// Each region leans on one uniformly chosen archetype with weight
    /// `dominance`, the rest split evenly; `jitter` blends in a flat Dirichlet
    /// draw.
    Corners { dominance: f64, jitter: f64 },
    /// The same weights everywhere.
    Constant { weights: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    /// Standard deviation in panel units.
    Absolute(f64),
    /// Standard deviation as a fraction of the mixture signal's RMS.
    RelativeToSignal(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_regions: usize,
    pub n_days: usize,
    pub archetypes: Vec<Archetype>,
    /// Orthonormalise the centred templates before scaling by amplitude.
    pub orthogonalize: bool,
    pub mixing: Mixing,
    /// Grid-neighbour averaging passes applied to the weights.
    pub smoothing_passes: usize,
    pub noise: Noise,
    /// Mean level of the baseline.
    pub baseline: f64,
    /// Region levels are drawn uniformly within `baseline ± baseline_spread`.
    pub baseline_spread: f64,
    pub weekly_amplitude: f64,
    /// Target correlation of one planted covariate per archetype.
    pub covariate_correlations: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_regions: 300,
            n_days: DAYS_PER_YEAR,
            archetypes: vec![
                Archetype {
                    shape: ArchetypeShape::LongTermDrop,
                    amplitude: 40.0,
                },
                Archetype {
                    shape: ArchetypeShape::ShortTermDrop,
                    amplitude: 25.0,
                },
                Archetype {
                    shape: ArchetypeShape::NoDrop,
                    amplitude: 12.0,
                },
            ],
            orthogonalize: true,
            mixing: Mixing::Corners {
                dominance: 0.9,
                jitter: 0.05,
            },
            smoothing_passes: 0,
            noise: Noise::RelativeToSignal(0.05),
            baseline: 200.0,
            baseline_spread: 50.0,
            weekly_amplitude: 10.0,
            covariate_correlations: vec![0.6, -0.45, 0.3],
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_regions == 0 {
            return bad("n_regions must be positive".into());
        }
        if self.n_days < 8 {
            return bad(format!("n_days must be at least 8, got {}", self.n_days));
        }
        if self.archetypes.is_empty() {
            return bad("at least one archetype is required".into());
        }
        if self.orthogonalize && self.archetypes.len() >= self.n_days {
            return bad("more archetypes than days".into());
        }
        if self.archetypes.iter().any(|a| !(a.amplitude.is_finite() && a.amplitude > 0.0)) {
            return bad("archetype amplitudes must be positive".into());
        }
        let k = self.archetypes.len();
        match &self.mixing {
            Mixing::Dirichlet { alpha } if !(*alpha > 0.0) => return bad("dirichlet alpha must be positive".into()),
            Mixing::Corners { dominance, jitter }
                if !((0.0..=1.0).contains(dominance) && (0.0..=1.0).contains(jitter)) =>
            {
                return bad("corner dominance and jitter must lie in [0, 1]".into())
            }
            Mixing::Constant { weights } => {
                let sum: f64 = weights.iter().sum();
                if weights.len() != k || weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return bad("constant weights must be a point on the simplex, one per archetype".into());
                }
            }
            _ => {}
        }
        let sigma = match self.noise {
            Noise::Absolute(s) | Noise::RelativeToSignal(s) => s,
        };
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return bad("noise level must be non-negative".into());
        }
        if self.covariate_correlations.iter().any(|r| !(-1.0..=1.0).contains(r)) {
            return bad("covariate correlations must lie in [-1, 1]".into());
        }
        Ok(())
    }
}

/// Planted ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub region_ids: Vec<String>,
    /// days × K daily archetype curves, as added to the target year.
    pub archetypes: DMatrix<f64>,
    pub archetype_shapes: Vec<ArchetypeShape>,
    /// regions × K, rows on the simplex.
    pub weights: DMatrix<f64>,
    /// Index of each region's largest weight.
    pub labels: Vec<usize>,
    pub geometry: Vec<RegionGeometry>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub covariates: CovariateTable,
    /// Absolute noise standard deviation actually used.
    pub noise_sigma: f64,
}

impl SynthTruth {
    /// Archetypes after the same centred rolling mean as the mobility measure.
    pub fn smoothed_archetypes(&self, radius: usize) -> DMatrix<f64> {
        let width = 2 * radius + 1;
        let m = self.archetypes.nrows() + 1 - width;
        DMatrix::from_fn(m, self.archetypes.ncols(), |i, k| {
            (i..i + width).map(|d| self.archetypes[(d, k)]).sum::<f64>() / width as f64
        })
    }

    /// The change series the pipeline should recover for region `j` when no
    /// noise is added.
    pub fn planted_delta(&self, j: usize, radius: usize) -> Vec<f64> {
        let width = 2 * radius + 1;
        let daily: Vec<f64> = (0..self.archetypes.nrows())
            .map(|d| (0..self.archetypes.ncols()).map(|k| self.weights[(j, k)] * self.archetypes[(d, k)]).sum())
            .collect();
        daily.windows(width).map(|w| w.iter().sum::<f64>() / width as f64).collect()
    }
}

/// Generated daily series for both years, ordered like `SynthTruth::region_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPanel {
    pub reference: Vec<RegionSeries>,
    pub target: Vec<RegionSeries>,
}

fn center_and_orthonormalize(mut cols: Vec<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    let n = cols[0].len() as f64;
    for c in 0..cols.len() {
        let mean = cols[c].iter().sum::<f64>() / n;
        cols[c].iter_mut().for_each(|v| *v -= mean);
        for p in 0..c {
            let dot: f64 = cols[c].iter().zip(&cols[p]).map(|(a, b)| a * b).sum();
            let (prev, cur) = cols.split_at_mut(c);
            cur[0].iter_mut().zip(&prev[p]).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = cols[c].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Err(Error::InvalidParameter("archetype templates are linearly dependent".into()));
        }
        cols[c].iter_mut().for_each(|v| *v /= norm);
    }
    Ok(cols)
}

fn archetype_matrix(config: &SynthConfig) -> Result<DMatrix<f64>> {
    let n = config.n_days;
    let mut cols: Vec<Vec<f64>> = config.archetypes.iter().map(|a| a.shape.template(n)).collect();
    if config.orthogonalize {
        cols = center_and_orthonormalize(cols)?;
    }
    // scale each curve to the requested RMS
    for (col, a) in cols.iter_mut().zip(&config.archetypes) {
        let rms = (col.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if rms == 0.0 {
            return Err(Error::InvalidParameter(format!("archetype {} is identically zero", a.shape.name())));
        }
        col.iter_mut().for_each(|v| *v *= a.amplitude / rms);
    }
    Ok(DMatrix::from_fn(n, cols.len(), |d, k| cols[k][d]))
}

fn flat_dirichlet(rng: &mut ChaCha8Rng, k: usize, alpha: f64) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidParameter(format!("dirichlet: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 {
            return Ok(draws.into_iter().map(|g| g / sum).collect());
        }
    }
}

fn grid_neighbors(idx: usize, n: usize, cols: usize) -> impl Iterator<Item = usize> {
    let (r, c) = ((idx / cols) as isize, (idx % cols) as isize);
    (-1isize..=1)
        .flat_map(move |dr| (-1isize..=1).map(move |dc| (r + dr, c + dc)))
        .filter(move |&(rr, cc)| rr >= 0 && cc >= 0 && (cc as usize) < cols)
        .map(move |(rr, cc)| rr as usize * cols + cc as usize)
        .filter(move |&j| j < n)
}

fn cell(idx: usize, cols: usize) -> RegionGeometry {
    let coord = |i: usize, axis: usize| ORIGIN[axis] + i as f64 * CELL_SIZE;
    let (r, c) = (idx / cols, idx % cols);
    RegionGeometry::rectangle(region_id(idx), coord(c, 0), coord(r, 1), coord(c + 1, 0), coord(r + 1, 1))
}

/// Zero-padded five digit id of region `idx`.
pub fn region_id(idx: usize) -> String {
    format!("{:05}", idx + 1)
}

/// Unit-norm, zero-mean version of `v`; `None` when `v` is constant.
fn standardized(v: &[f64]) -> Option<Vec<f64>> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 1e-12).then(|| c.into_iter().map(|x| x / norm).collect())
}

/// Covariate whose sample correlation with `target` is exactly `rho`
/// (up to rounding): `rho·t + sqrt(1 − rho²)·e` with `e` noise made orthogonal
/// to `t`.
fn planted_covariate(rng: &mut ChaCha8Rng, target: &[f64], rho: f64) -> Option<Vec<f64>> {
    let t = standardized(target)?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let raw: Vec<f64> = (0..t.len()).map(|_| normal.sample(rng)).collect();
    let mut e = standardized(&raw)?;
    let dot: f64 = e.iter().zip(&t).map(|(a, b)| a * b).sum();
    e.iter_mut().zip(&t).for_each(|(a, b)| *a -= dot * b);
    let e = standardized(&e)?;
    let s = (1.0 - rho * rho).sqrt();
    Some(t.iter().zip(&e).map(|(a, b)| 10.0 + rho * a + s * b).collect())
}

fn insert_leap_day(mut values: Vec<f64>) -> Vec<f64> {
    let filler = (values[FEB29_INDEX - 1] + values[FEB29_INDEX]) / 2.0;
    values.insert(FEB29_INDEX, filler);
    values
}

/// Builds a panel and its ground truth from `config`.
///
/// With the default 365 days the target year gets a February 29 equal to the
/// mean of its neighbours, so dropping it restores the planted series.
pub fn generate(config: &SynthConfig) -> Result<(SynthPanel, SynthTruth)> {
    config.validate()?;
    let n = config.n_regions;
    let k = config.archetypes.len();
    let days = config.n_days;
    let archetypes = archetype_matrix(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let grid_cols = (n as f64).sqrt().ceil() as usize;
    let grid_rows = n.div_ceil(grid_cols);

    let mut weights: Vec<Vec<f64>> = (0..n)
        .map(|_| match &config.mixing {
            Mixing::Dirichlet { alpha } => flat_dirichlet(&mut rng, k, *alpha),
            Mixing::Corners { dominance, jitter } => {
                let corner = rng.random_range(0..k);
                let rest = if k > 1 { (1.0 - dominance) / (k - 1) as f64 } else { 0.0 };
                let noise = flat_dirichlet(&mut rng, k, 1.0)?;
                Ok((0..k)
                    .map(|c| {
                        let base = if k == 1 { 1.0 } else if c == corner { *dominance } else { rest };
                        (1.0 - jitter) * base + jitter * noise[c]
                    })
                    .collect())
            }
            Mixing::Constant { weights } => Ok(weights.clone()),
        })
        .collect::<Result<_>>()?;
    for _ in 0..config.smoothing_passes {
        weights = (0..n)
            .map(|i| {
                let nb: Vec<usize> = grid_neighbors(i, n, grid_cols).collect();
                (0..k)
                    .map(|c| nb.iter().map(|j| weights[*j][c]).sum::<f64>() / nb.len() as f64)
                    .collect()
            })
            .collect();
    }
    let weights = DMatrix::from_fn(n, k, |i, c| weights[i][c]);
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            (0..k)
                .max_by(|a, b| weights[(i, *a)].total_cmp(&weights[(i, *b)]).then(b.cmp(a)))
                .expect("k >= 1")
        })
        .collect();

    // regions × days
    let signal = &weights * archetypes.transpose();
    let noise_sigma = match config.noise {
        Noise::Absolute(s) => s,
        Noise::RelativeToSignal(f) => f * (signal.norm_squared() / signal.len() as f64).sqrt(),
    };
    let levels: Vec<f64> = (0..n)
        .map(|_| config.baseline + config.baseline_spread * rng.random_range(-1.0..=1.0))
        .collect();

    let region_ids: Vec<String> = (0..n).map(region_id).collect();
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidParameter(format!("noise: {e}")))?;
    let series: Vec<(RegionSeries, RegionSeries)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut r = ChaCha8Rng::seed_from_u64(config.seed);
            r.set_stream(1 + j as u64);
            let mut draw = || if noise_sigma > 0.0 { normal.sample(&mut r) } else { 0.0 };
            let base: Vec<f64> = (0..days)
                .map(|d| {
                    let phase = 2.0 * std::f64::consts::PI * d as f64 / 7.0;
                    levels[j] + config.weekly_amplitude * phase.sin()
                })
                .collect();
            let reference: Vec<f64> = base.iter().map(|b| b + draw()).collect();
            let mut target: Vec<f64> = base.iter().enumerate().map(|(d, b)| b + signal[(j, d)] + draw()).collect();
            if days == DAYS_PER_YEAR {
                target = insert_leap_day(target);
            }
            (
                RegionSeries::from_values(region_ids[j].clone(), REFERENCE_YEAR, reference),
                RegionSeries::from_values(region_ids[j].clone(), TARGET_YEAR, target),
            )
        })
        .collect();
    if let Some(s) = series
        .iter()
        .flat_map(|(a, b)| [a, b])
        .find(|s| s.values.iter().any(|v| *v < 0.0))
    {
        return Err(Error::InvalidParameter(format!(
            "region {} year {} went negative; raise the baseline or lower amplitudes",
            s.region_id, s.year
        )));
    }
    let (reference, target) = series.into_iter().unzip();

    let mut names = Vec::new();
    let mut columns = Vec::new();
    for (c, rho) in config.covariate_correlations.iter().enumerate().take(k) {
        let col: Vec<f64> = weights.column(c).iter().copied().collect();
        if let Some(cov) = planted_covariate(&mut rng, &col, *rho) {
            names.push(format!("cov_{}", config.archetypes[c].shape.name()));
            columns.push(cov);
        }
    }
    let normal01 = Normal::new(0.0, 1.0).expect("unit normal");
    names.push("noise".into());
    columns.push((0..n).map(|_| normal01.sample(&mut rng)).collect());
    let covariates = CovariateTable {
        region_ids: region_ids.clone(),
        names,
        values: (0..n).map(|i| columns.iter().map(|c| c[i]).collect()).collect(),
    };

    let truth = SynthTruth {
        geometry: (0..n).map(|i| cell(i, grid_cols)).collect(),
        region_ids,
        archetypes,
        archetype_shapes: config.archetypes.iter().map(|a| a.shape).collect(),
        weights,
        labels,
        grid_rows,
        grid_cols,
        covariates,
        noise_sigma,
    };
    Ok((SynthPanel { reference, target }, truth))
}

/// Writes `date,subregion_id,value`, one subregion per region.
///
/// Subregion ids append `0000001` to the region id so that a five-character
/// prefix recovers the region.
pub fn write_panel_csv<W: Write>(mut out: W, series: &[RegionSeries]) -> Result<()> {
    let io_err = |e| Error::io("writing panel", e);
    writeln!(out, "date,subregion_id,value").map_err(io_err)?;
    for s in series {
        for (d, (v, present)) in s.values.iter().zip(&s.present).enumerate() {
            if !present {
                continue;
            }
            let date = NaiveDate::from_yo_opt(s.year, d as u32 + 1)
                .ok_or_else(|| Error::InvalidData(format!("day {} outside year {}", d + 1, s.year)))?;
            writeln!(out, "{},{}0000001,{v}", date.format("%Y-%m-%d"), s.region_id).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

/// `region_id,w1..wK,label`.
pub fn write_truth_weights_csv<W: Write>(mut out: W, truth: &SynthTruth) -> Result<()> {
    let io_err = |e| Error::io("writing planted weights", e);
    let k = truth.weights.ncols();
    let header: Vec<String> = (1..=k).map(|c| format!("w{c}")).collect();
    writeln!(out, "region_id,{},label", header.join(",")).map_err(io_err)?;
    for (i, id) in truth.region_ids.iter().enumerate() {
        let row: Vec<String> = (0..k).map(|c| truth.weights[(i, c)].to_string()).collect();
        writeln!(out, "{id},{},{}", row.join(","), truth.labels[i]).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// `day,<shape names>` with 1-based days.
pub fn write_truth_archetypes_csv<W: Write>(mut out: W, truth: &SynthTruth) -> Result<()> {
    let io_err = |e| Error::io("writing planted archetypes", e);
    let names: Vec<&str> = truth.archetype_shapes.iter().map(|s| s.name()).collect();
    writeln!(out, "day,{}", names.join(",")).map_err(io_err)?;
    for d in 0..truth.archetypes.nrows() {
        let row: Vec<String> = (0..truth.archetypes.ncols()).map(|k| truth.archetypes[(d, k)].to_string()).collect();
        writeln!(out, "{},{}", d + 1, row.join(",")).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
