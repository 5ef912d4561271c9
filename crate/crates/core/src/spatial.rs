//! Contiguity weights and Moran's I, global and local.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::geo::RegionGeometry;

/// Default vertex snapping grid, in coordinate units (degrees for lon/lat).
pub const DEFAULT_SNAP: f64 = 1e-7;
pub const DEFAULT_PERMUTATIONS: usize = 999;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Standardization {
    Binary,
    #[default]
    Row,
}

impl FromStr for Standardization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Standardization::Binary),
            "row" => Ok(Standardization::Row),
            _ => Err(Error::InvalidParameter(format!("unknown standardization `{s}`"))),
        }
    }
}

impl fmt::Display for Standardization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Standardization::Binary => "binary",
            Standardization::Row => "row",
        })
    }
}

/// Sparse neighbour graph with per-edge weights.
///
/// The neighbour relation is symmetric and has no self loops; weights need
/// not be symmetric once row-standardised.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    ids: Vec<String>,
    neighbors: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
    standardization: Standardization,
}

impl SpatialWeights {
    /// Binary weights from neighbour index lists.
    pub fn from_neighbors(ids: Vec<String>, mut neighbors: Vec<Vec<usize>>) -> Result<Self> {
        let n = ids.len();
        if neighbors.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: neighbors.len(),
            });
        }
        let distinct: BTreeSet<&String> = ids.iter().collect();
        if distinct.len() != n {
            return Err(Error::InvalidData("duplicate region ids in weights".into()));
        }
        for (i, list) in neighbors.iter_mut().enumerate() {
            list.sort_unstable();
            list.dedup();
            if list.iter().any(|&j| j >= n || j == i) {
                return Err(Error::InvalidData(format!(
                    "region {} has an invalid or self neighbour",
                    ids[i]
                )));
            }
        }
        for (i, list) in neighbors.iter().enumerate() {
            for &j in list {
                if neighbors[j].binary_search(&i).is_err() {
                    return Err(Error::InvalidData(format!(
                        "asymmetric neighbours: {} lists {} but not the reverse",
                        ids[i], ids[j]
                    )));
                }
            }
        }
        let weights = neighbors.iter().map(|l| vec![1.0; l.len()]).collect();
        Ok(SpatialWeights {
            ids,
            neighbors,
            weights,
            standardization: Standardization::Binary,
        })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }

    pub fn standardization(&self) -> Standardization {
        self.standardization
    }

    pub fn neighbor_ids(&self, i: usize) -> Vec<&str> {
        self.neighbors[i].iter().map(|j| self.ids[*j].as_str()).collect()
    }

    pub fn islands(&self) -> Vec<&str> {
        (0..self.n())
            .filter(|i| self.neighbors[*i].is_empty())
            .map(|i| self.ids[i].as_str())
            .collect()
    }

    /// Sum of all weights.
    pub fn s0(&self) -> f64 {
        self.weights.iter().flatten().sum()
    }

    fn weight(&self, i: usize, j: usize) -> f64 {
        self.neighbors[i]
            .binary_search(&j)
            .map_or(0.0, |k| self.weights[i][k])
    }

    /// `Σ_j w_ij z_j` for every i.
    pub fn lag(&self, z: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| {
                self.neighbors[i]
                    .iter()
                    .zip(&self.weights[i])
                    .map(|(j, w)| w * z[*j])
                    .sum()
            })
            .collect()
    }

    /// Restricts to `ids`, in that order, and re-applies the current
    /// standardization. Every requested id must exist.
    pub fn aligned_to(&self, ids: &[String]) -> Result<SpatialWeights> {
        let pos: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let new_pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let neighbors = ids
            .iter()
            .map(|id| {
                let old = *pos
                    .get(id.as_str())
                    .ok_or_else(|| Error::InvalidData(format!("region {id} missing from weights")))?;
                Ok(self.neighbors[old]
                    .iter()
                    .filter_map(|j| new_pos.get(self.ids[*j].as_str()).copied())
                    .collect())
            })
            .collect::<Result<Vec<Vec<usize>>>>()?;
        let binary = SpatialWeights::from_neighbors(ids.to_vec(), neighbors)?;
        Ok(standardize(&binary, self.standardization))
    }
}

/// Queen contiguity: regions sharing at least one vertex are neighbours.
///
/// Vertices are snapped to a grid of size `snap` before comparison.
pub fn queen_weights(geoms: &[RegionGeometry], snap: f64) -> Result<SpatialWeights> {
    if !(snap > 0.0) {
        return Err(Error::InvalidParameter(format!("snap tolerance must be positive, got {snap}")));
    }
    let mut by_vertex: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (r, g) in geoms.iter().enumerate() {
        for v in g.vertices() {
            let key = ((v[0] / snap).round() as i64, (v[1] / snap).round() as i64);
            let owners = by_vertex.entry(key).or_default();
            if owners.last() != Some(&r) {
                owners.push(r);
            }
        }
    }
    let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); geoms.len()];
    for owners in by_vertex.values() {
        for &a in owners {
            for &b in owners {
                if a != b {
                    sets[a].insert(b);
                }
            }
        }
    }
    let ids = geoms.iter().map(|g| g.region_id.clone()).collect();
    let w = SpatialWeights::from_neighbors(ids, sets.into_iter().map(|s| s.into_iter().collect()).collect())?;
    let islands = w.islands();
    if !islands.is_empty() {
        info!("{} island(s) without queen neighbours: {}", islands.len(), islands.join(" "));
    }
    Ok(w)
}

/// Binary sets every edge weight to one; row divides each row by its sum.
/// Islands have no weights and are left alone.
pub fn standardize(w: &SpatialWeights, mode: Standardization) -> SpatialWeights {
    let weights = w
        .neighbors
        .iter()
        .map(|list| match mode {
            Standardization::Binary => vec![1.0; list.len()],
            Standardization::Row => vec![1.0 / list.len() as f64; list.len()],
        })
        .collect();
    SpatialWeights {
        ids: w.ids.clone(),
        neighbors: w.neighbors.clone(),
        weights,
        standardization: mode,
    }
}

/// Removes regions without neighbours, repeating until none remain.
pub fn drop_islands(w: &SpatialWeights, values: &[f64]) -> Result<(SpatialWeights, Vec<f64>, Vec<String>)> {
    if values.len() != w.n() {
        return Err(Error::LengthMismatch {
            expected: w.n(),
            actual: values.len(),
        });
    }
    let mut current = w.clone();
    let mut vals = values.to_vec();
    let mut removed = Vec::new();
    loop {
        let islands: BTreeSet<String> = current.islands().into_iter().map(String::from).collect();
        if islands.is_empty() {
            break;
        }
        if islands.len() == current.n() {
            return Err(Error::Empty("every region is an island".into()));
        }
        let (keep_ids, keep_vals): (Vec<String>, Vec<f64>) = current
            .ids
            .iter()
            .zip(&vals)
            .filter(|(id, _)| !islands.contains(*id))
            .map(|(id, v)| (id.clone(), *v))
            .unzip();
        warn!("dropping {} island(s): {}", islands.len(), islands.iter().cloned().collect::<Vec<_>>().join(" "));
        removed.extend(islands);
        current = current.aligned_to(&keep_ids)?;
        vals = keep_vals;
    }
    Ok((current, vals, removed))
}

fn deviations(values: &[f64], w: &SpatialWeights, min_n: usize) -> Result<Vec<f64>> {
    if values.len() != w.n() {
        return Err(Error::LengthMismatch {
            expected: w.n(),
            actual: values.len(),
        });
    }
    if values.len() < min_n {
        return Err(Error::TooFewObservations {
            needed: min_n,
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spatial values".into()));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let z: Vec<f64> = values.iter().map(|v| v - mean).collect();
    if z.iter().all(|d| *d == 0.0) {
        return Err(Error::ConstantField);
    }
    Ok(z)
}

fn moran_from_deviations(z: &[f64], w: &SpatialWeights, s0: f64) -> f64 {
    let lag = w.lag(z);
    let cross: f64 = z.iter().zip(&lag).map(|(a, b)| a * b).sum();
    let m2: f64 = z.iter().map(|d| d * d).sum();
    z.len() as f64 / s0 * cross / m2
}

/// Moran's I without inference; accepts two or more regions.
pub fn moran_statistic(values: &[f64], w: &SpatialWeights) -> Result<f64> {
    let z = deviations(values, w, 2)?;
    let s0 = w.s0();
    if s0 == 0.0 {
        return Err(Error::Numeric("weights have no edges".into()));
    }
    Ok(moran_from_deviations(&z, w, s0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Inference {
    Normality,
    #[default]
    Randomization,
    Permutation,
}

impl FromStr for Inference {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normality" => Ok(Inference::Normality),
            "randomization" => Ok(Inference::Randomization),
            "permutation" => Ok(Inference::Permutation),
            _ => Err(Error::InvalidParameter(format!("unknown inference `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoranResult {
    pub i: f64,
    pub expected_i: f64,
    pub variance: f64,
    pub z_score: f64,
    pub p_value: f64,
    pub inference: Inference,
    pub permutations: Option<usize>,
}

fn replicate_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Global Moran's I with analytic or permutation inference.
///
/// The p-value is two-sided. Under the analytic modes it comes from the
/// standard normal; under permutation it is `(c + 1) / (P + 1)` where `c`
/// counts replicates at least as far from `E[I]` as the observed value.
pub fn global_moran(
    values: &[f64],
    w: &SpatialWeights,
    inference: Inference,
    permutations: usize,
    seed: u64,
) -> Result<MoranResult> {
    let min_n = if inference == Inference::Randomization { 4 } else { 3 };
    let z = deviations(values, w, min_n)?;
    let n = z.len() as f64;
    let s0 = w.s0();
    if s0 == 0.0 {
        return Err(Error::Numeric("weights have no edges".into()));
    }
    let i = moran_from_deviations(&z, w, s0);
    let expected_i = -1.0 / (n - 1.0);

    let (variance, p_override) = match inference {
        Inference::Normality | Inference::Randomization => {
            let mut s1 = 0.0;
            let mut out_sum = vec![0.0; w.n()];
            let mut in_sum = vec![0.0; w.n()];
            for a in 0..w.n() {
                for (b, wab) in w.neighbors[a].iter().zip(&w.weights[a]) {
                    let sym = wab + w.weight(*b, a);
                    s1 += sym * sym;
                    out_sum[a] += wab;
                    in_sum[*b] += wab;
                }
            }
            s1 /= 2.0;
            let s2: f64 = out_sum.iter().zip(&in_sum).map(|(o, i)| (o + i).powi(2)).sum();
            let s0sq = s0 * s0;
            let var = if inference == Inference::Normality {
                (n * n * s1 - n * s2 + 3.0 * s0sq) / ((n * n - 1.0) * s0sq) - expected_i * expected_i
            } else {
                let m2: f64 = z.iter().map(|d| d * d).sum::<f64>() / n;
                let m4: f64 = z.iter().map(|d| d.powi(4)).sum::<f64>() / n;
                let kurt = m4 / (m2 * m2);
                let num = n * ((n * n - 3.0 * n + 3.0) * s1 - n * s2 + 3.0 * s0sq)
                    - kurt * ((n * n - n) * s1 - 2.0 * n * s2 + 6.0 * s0sq);
                num / ((n - 1.0) * (n - 2.0) * (n - 3.0) * s0sq) - expected_i * expected_i
            };
            (var, None)
        }
        Inference::Permutation => {
            if permutations == 0 {
                return Err(Error::InvalidParameter("permutation inference needs permutations > 0".into()));
            }
            let sims: Vec<f64> = (0..permutations)
                .into_par_iter()
                .map(|r| {
                    let mut rng = replicate_rng(seed, r as u64);
                    let mut shuffled = z.clone();
                    shuffled.shuffle(&mut rng);
                    moran_from_deviations(&shuffled, w, s0)
                })
                .collect();
            let mean = sims.iter().sum::<f64>() / permutations as f64;
            let var = sims.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / permutations as f64;
            let observed = (i - expected_i).abs();
            let extreme = sims.iter().filter(|s| (*s - expected_i).abs() >= observed).count();
            (var, Some((extreme + 1) as f64 / (permutations + 1) as f64))
        }
    };
    if !(variance > 0.0) {
        return Err(Error::Numeric(format!("non-positive Moran variance {variance}")));
    }
    let z_score = (i - expected_i) / variance.sqrt();
    let p_value = p_override.unwrap_or_else(|| erfc(z_score.abs() / std::f64::consts::SQRT_2));
    Ok(MoranResult {
        i,
        expected_i,
        variance,
        z_score,
        p_value,
        inference,
        permutations: (inference == Inference::Permutation).then_some(permutations),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Quadrant {
    HH,
    LH,
    LL,
    HL,
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quadrant::HH => "HH",
            Quadrant::LH => "LH",
            Quadrant::LL => "LL",
            Quadrant::HL => "HL",
        })
    }
}

/// Quadrant of a deviation and its spatial lag; zero counts as low.
pub fn quadrant(z: f64, lag: f64) -> Quadrant {
    match (z > 0.0, lag > 0.0) {
        (true, true) => Quadrant::HH,
        (true, false) => Quadrant::HL,
        (false, true) => Quadrant::LH,
        (false, false) => Quadrant::LL,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalStat {
    pub region_id: String,
    pub local_i: f64,
    pub pseudo_p: f64,
    pub quadrant: Quadrant,
    pub significant: bool,
    /// Value sits exactly at the mean.
    pub boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LisaResult {
    pub regions: Vec<LocalStat>,
    pub permutations: usize,
    pub alpha: f64,
}

/// Local Moran's I with conditional-permutation pseudo p-values.
///
/// For region `i` every replicate keeps `z_i` fixed and fills its neighbour
/// slots with a random draw, without replacement, from the other regions.
/// Replicates for region `i` use ChaCha stream `i` of `seed`, so results do not
/// depend on scheduling.
pub fn local_moran(
    values: &[f64],
    w: &SpatialWeights,
    permutations: usize,
    seed: u64,
    alpha: f64,
) -> Result<LisaResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let z = deviations(values, w, 3)?;
    let n = z.len();
    let m2 = z.iter().map(|d| d * d).sum::<f64>() / n as f64;
    let lag = w.lag(&z);

    let regions = (0..n)
        .into_par_iter()
        .map(|i| {
            let local_i = z[i] / m2 * lag[i];
            let deg = w.neighbors[i].len();
            let pseudo_p = if deg == 0 || permutations == 0 {
                1.0
            } else {
                let mut rng = replicate_rng(seed, i as u64);
                let observed = local_i.abs();
                let mut extreme = 0usize;
                for _ in 0..permutations {
                    let draw = rand::seq::index::sample(&mut rng, n - 1, deg);
                    let sim_lag: f64 = draw
                        .iter()
                        .zip(&w.weights[i])
                        .map(|(j, wt)| {
                            let j = if j >= i { j + 1 } else { j };
                            wt * z[j]
                        })
                        .sum();
                    if (z[i] / m2 * sim_lag).abs() >= observed {
                        extreme += 1;
                    }
                }
                (extreme + 1) as f64 / (permutations + 1) as f64
            };
            let boundary = z[i] == 0.0;
            LocalStat {
                region_id: w.ids[i].clone(),
                local_i,
                pseudo_p,
                quadrant: quadrant(z[i], lag[i]),
                significant: !boundary && deg > 0 && pseudo_p <= alpha,
                boundary,
            }
        })
        .collect();
    Ok(LisaResult {
        regions,
        permutations,
        alpha,
    })
}

/// Adjacency text: a line with `n`, then per region a line `id count`
/// followed by a line of space-separated neighbour ids.
pub fn write_adjacency(w: &SpatialWeights) -> String {
    let mut out = format!("{}\n", w.n());
    for i in 0..w.n() {
        out.push_str(&format!("{} {}\n", w.ids[i], w.neighbors[i].len()));
        out.push_str(&w.neighbor_ids(i).join(" "));
        out.push('\n');
    }
    out
}

pub fn read_adjacency(text: &str) -> Result<SpatialWeights> {
    let bad = |msg: &str| Error::InvalidData(format!("adjacency file: {msg}"));
    let mut lines = text.lines();
    let n: usize = lines
        .next()
        .and_then(|l| l.trim().parse().ok())
        .ok_or_else(|| bad("missing region count"))?;
    let mut ids = Vec::with_capacity(n);
    let mut raw: Vec<Vec<String>> = Vec::with_capacity(n);
    for _ in 0..n {
        let head = lines.next().ok_or_else(|| bad("truncated"))?;
        let mut parts = head.split_whitespace();
        let id = parts.next().ok_or_else(|| bad("missing id"))?;
        let count: usize = parts
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad("missing neighbour count"))?;
        let list: Vec<String> = lines
            .next()
            .ok_or_else(|| bad("truncated"))?
            .split_whitespace()
            .map(String::from)
            .collect();
        if list.len() != count {
            return Err(bad(&format!("region {id} declares {count} neighbours, lists {}", list.len())));
        }
        ids.push(id.to_string());
        raw.push(list);
    }
    let pos: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let neighbors = raw
        .iter()
        .map(|list| {
            list.iter()
                .map(|id| pos.get(id.as_str()).copied().ok_or_else(|| bad(&format!("unknown neighbour {id}"))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    SpatialWeights::from_neighbors(ids, neighbors)
}

pub fn write_lisa_csv<W: Write>(mut out: W, lisa: &LisaResult) -> Result<()> {
    let io_err = |e| Error::io("writing lisa", e);
    writeln!(out, "region_id,local_i,pseudo_p,quadrant,significant").map_err(io_err)?;
    for r in &lisa.regions {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.region_id, r.local_i, r.pseudo_p, r.quadrant, r.significant
        )
        .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
