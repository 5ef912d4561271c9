//! Clustering of regions in loading space.
//!
//! k-means (Lloyd iterations, k-means++ or uniform seeding, best of several
//! restarts) is the primary method; agglomerative clustering with the usual
//! linkages is available for comparison.

use std::fmt::Write as _;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_CLUSTERS: usize = 3;
pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_N_INIT: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KMeansInit {
    #[default]
    PlusPlus,
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansOptions {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub n_init: usize,
    pub init: KMeansInit,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            k: DEFAULT_CLUSTERS,
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            n_init: DEFAULT_N_INIT,
            init: KMeansInit::PlusPlus,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    /// Label of each input row.
    pub labels: Vec<usize>,
    /// k × dims
    pub centroids: DMatrix<f64>,
    pub inertia: f64,
    pub iterations_run: usize,
    pub seed: u64,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, c: usize) -> f64 {
    points
        .row(i)
        .iter()
        .zip(centroids.row(c).iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Nearest centroid per point (lowest index on ties) and the total inertia.
fn assign(points: &DMatrix<f64>, centroids: &DMatrix<f64>) -> (Vec<usize>, Vec<f64>) {
    (0..points.nrows())
        .map(|i| {
            let mut best = (0, sq_dist(points, i, centroids, 0));
            for c in 1..centroids.nrows() {
                let d = sq_dist(points, i, centroids, c);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn plus_plus_init(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(points, i, points, chosen[0]))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // fewer distinct points than clusters
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points, i, points, next));
        }
    }
    points.select_rows(&chosen)
}

fn random_init(points: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut idx = rand::seq::index::sample(rng, points.nrows(), k).into_vec();
    idx.sort_unstable();
    points.select_rows(&idx)
}

fn update_centroids(points: &DMatrix<f64>, labels: &[usize], dists: &[f64], k: usize) -> DMatrix<f64> {
    let dims = points.ncols();
    let mut sums = DMatrix::zeros(k, dims);
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for d in 0..dims {
            sums[(c, d)] += points[(i, d)];
        }
    }
    let mut taken: Vec<usize> = Vec::new();
    for c in 0..k {
        if counts[c] > 0 {
            for d in 0..dims {
                sums[(c, d)] /= counts[c] as f64;
            }
        } else {
            // reseed from the point farthest from its own centroid
            let far = (0..points.nrows())
                .filter(|i| !taken.contains(i))
                .fold(None::<usize>, |best, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = far {
                taken.push(i);
                sums.set_row(c, &points.row(i));
            }
        }
    }
    sums
}

fn lloyd(points: &DMatrix<f64>, opts: &KMeansOptions, rng: &mut ChaCha8Rng) -> ClusterAssignment {
    let mut centroids = match opts.init {
        KMeansInit::PlusPlus => plus_plus_init(points, opts.k, rng),
        KMeansInit::Random => random_init(points, opts.k, rng),
    };
    let (mut labels, mut dists) = assign(points, &centroids);
    let mut trace = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;
    for it in 1..=opts.max_iter {
        iterations = it;
        centroids = update_centroids(points, &labels, &dists, opts.k);
        let (new_labels, new_dists) = assign(points, &centroids);
        trace.push(new_dists.iter().sum());
        let converged = new_labels == labels;
        labels = new_labels;
        dists = new_dists;
        if converged {
            break;
        }
    }
    ClusterAssignment {
        labels,
        centroids,
        inertia: *trace.last().unwrap_or(&0.0),
        iterations_run: iterations,
        seed: opts.seed,
        inertia_trace: trace,
    }
}

/// k-means on the rows of `points`.
///
/// Restart `r` draws from the ChaCha stream `r` of the master seed, so the
/// result is the same whether restarts run serially or in parallel. The
/// restart with the lowest inertia wins, earliest restart on ties.
pub fn kmeans(points: &DMatrix<f64>, opts: &KMeansOptions) -> Result<ClusterAssignment> {
    let n = points.nrows();
    if opts.k == 0 || opts.k > n {
        return Err(Error::InvalidParameter(format!(
            "cluster count {} outside 1..={n}",
            opts.k
        )));
    }
    if opts.n_init == 0 {
        return Err(Error::InvalidParameter("n_init must be at least 1".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clustering input".into()));
    }
    let runs: Vec<ClusterAssignment> = (0..opts.n_init)
        .into_par_iter()
        .map(|restart| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(restart as u64);
            lloyd(points, opts, &mut rng)
        })
        .collect();
    let best = runs
        .into_iter()
        .reduce(|best, run| if run.inertia < best.inertia { run } else { best })
        .expect("n_init >= 1");
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Manhattan,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linkage {
    Single,
    Complete,
    Average,
    Ward,
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "manhattan" => Ok(Metric::Manhattan),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::InvalidParameter(format!("unknown metric `{s}`"))),
        }
    }
}

impl FromStr for Linkage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Linkage::Single),
            "complete" => Ok(Linkage::Complete),
            "average" => Ok(Linkage::Average),
            "ward" => Ok(Linkage::Ward),
            _ => Err(Error::InvalidParameter(format!("unknown linkage `{s}`"))),
        }
    }
}

impl Metric {
    fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Metric::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    (1.0 - dot / (na * nb)).max(0.0)
                }
            }
        }
    }
}

/// One agglomeration step. Leaves are `0..n`; step `i` creates cluster `n + i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub n: usize,
    pub merges: Vec<Merge>,
    pub linkage: Linkage,
    pub metric: Metric,
}

/// Condensed symmetric distance matrix over slots.
struct Distances {
    n: usize,
    d: Vec<f64>,
}

impl Distances {
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }
    fn get(&self, i: usize, j: usize) -> f64 {
        self.d[self.idx(i, j)]
    }
    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.d[k] = v;
    }
}

/// Agglomerative clustering of the rows of `points`.
///
/// Each cluster lives in the slot of its smallest member index. At every step
/// the closest pair of slots merges, the lowest `(i, j)` pair winning ties;
/// distances to the merged cluster follow the Lance-Williams update.
pub fn hierarchical(points: &DMatrix<f64>, metric: Metric, linkage: Linkage) -> Result<Dendrogram> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::TooFewObservations { needed: 2, got: n });
    }
    if linkage == Linkage::Ward && metric != Metric::Euclidean {
        return Err(Error::InvalidParameter("ward linkage requires the euclidean metric".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clustering input".into()));
    }

    let rows: Vec<Vec<f64>> = points.row_iter().map(|r| r.iter().copied().collect()).collect();
    let mut dist = Distances {
        n,
        d: Vec::with_capacity(n * (n - 1) / 2),
    };
    for i in 0..n {
        for j in i + 1..n {
            dist.d.push(metric.distance(&rows[i], &rows[j]));
        }
    }

    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut cluster_id: Vec<usize> = (0..n).collect();
    // nearest active slot above i, and its distance
    let mut nn = vec![usize::MAX; n];
    let mut nn_dist = vec![f64::INFINITY; n];

    let rescan = |i: usize, active: &[bool], dist: &Distances, nn: &mut [usize], nn_dist: &mut [f64]| {
        nn[i] = usize::MAX;
        nn_dist[i] = f64::INFINITY;
        for j in i + 1..n {
            if active[j] {
                let d = dist.get(i, j);
                if d < nn_dist[i] {
                    nn[i] = j;
                    nn_dist[i] = d;
                }
            }
        }
    };
    for i in 0..n {
        rescan(i, &active, &dist, &mut nn, &mut nn_dist);
    }

    let mut merges = Vec::with_capacity(n - 1);
    for step in 0..n - 1 {
        let mut a = usize::MAX;
        for i in 0..n {
            if active[i] && nn[i] != usize::MAX && (a == usize::MAX || nn_dist[i] < nn_dist[a]) {
                a = i;
            }
        }
        let b = nn[a];
        let d_ab = nn_dist[a];
        let (na, nb) = (size[a] as f64, size[b] as f64);

        for x in 0..n {
            if !active[x] || x == a || x == b {
                continue;
            }
            let dax = dist.get(a, x);
            let dbx = dist.get(b, x);
            let nx = size[x] as f64;
            let updated = match linkage {
                Linkage::Single => dax.min(dbx),
                Linkage::Complete => dax.max(dbx),
                Linkage::Average => (na * dax + nb * dbx) / (na + nb),
                Linkage::Ward => (((na + nx) * dax * dax + (nb + nx) * dbx * dbx - nx * d_ab * d_ab)
                    / (na + nb + nx))
                    .max(0.0)
                    .sqrt(),
            };
            dist.set(a, x, updated);
        }

        merges.push(Merge {
            a: cluster_id[a].min(cluster_id[b]),
            b: cluster_id[a].max(cluster_id[b]),
            distance: d_ab,
            size: size[a] + size[b],
        });
        active[b] = false;
        size[a] += size[b];
        cluster_id[a] = n + step;

        for i in 0..n {
            if !active[i] {
                continue;
            }
            if i == a || nn[i] == a || nn[i] == b {
                rescan(i, &active, &dist, &mut nn, &mut nn_dist);
            } else if i < a {
                let d = dist.get(i, a);
                if d < nn_dist[i] || (d == nn_dist[i] && a < nn[i]) {
                    nn[i] = a;
                    nn_dist[i] = d;
                }
            }
        }
    }

    Ok(Dendrogram {
        n,
        merges,
        linkage,
        metric,
    })
}

/// Flat labels from the first `n - k` merges.
///
/// Labels are numbered by the smallest member index of each cluster.
pub fn cut_dendrogram(d: &Dendrogram, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > d.n {
        return Err(Error::InvalidParameter(format!("cut size {k} outside 1..={}", d.n)));
    }
    let mut parent: Vec<usize> = (0..d.n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut rep: Vec<usize> = (0..d.n).collect();
    for m in &d.merges[..d.n - k] {
        let (ra, rb) = (find(&mut parent, rep[m.a]), find(&mut parent, rep[m.b]));
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        parent[hi] = lo;
        rep.push(lo);
    }
    let mut label_of_root = vec![usize::MAX; d.n];
    let mut next = 0;
    Ok((0..d.n)
        .map(|i| {
            let r = find(&mut parent, i);
            if label_of_root[r] == usize::MAX {
                label_of_root[r] = next;
                next += 1;
            }
            label_of_root[r]
        })
        .collect())
}

/// Newick text with branch lengths taken from merge heights.
pub fn to_newick(d: &Dendrogram, labels: &[String]) -> String {
    fn render(d: &Dendrogram, id: usize, labels: &[String], out: &mut String) -> f64 {
        if id < d.n {
            out.push_str(&labels[id]);
            return 0.0;
        }
        let m = &d.merges[id - d.n];
        out.push('(');
        let ha = render(d, m.a, labels, out);
        let _ = write!(out, ":{}", (m.distance - ha).max(0.0));
        out.push(',');
        let hb = render(d, m.b, labels, out);
        let _ = write!(out, ":{}", (m.distance - hb).max(0.0));
        out.push(')');
        m.distance
    }
    let mut out = String::new();
    if d.n == 1 {
        out.push_str(&labels[0]);
    } else {
        render(d, d.n + d.merges.len() - 1, labels, &mut out);
    }
    out.push(';');
    out
}

pub fn write_labels_csv<W: Write>(mut out: W, region_index: &[String], labels: &[usize]) -> Result<()> {
    let io_err = |e| Error::io("writing cluster labels", e);
    writeln!(out, "region_id,cluster_label").map_err(io_err)?;
    for (id, label) in region_index.iter().zip(labels) {
        writeln!(out, "{id},{label}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn write_centroids_csv<W: Write>(mut out: W, centroids: &DMatrix<f64>) -> Result<()> {
    let io_err = |e| Error::io("writing centroids", e);
    let header: Vec<String> = std::iter::once("cluster_label".to_string())
        .chain((1..=centroids.ncols()).map(|c| format!("pc{c}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io_err)?;
    for (c, row) in centroids.row_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(out, "{c},{}", cells.join(",")).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Mean of the rows.
pub fn centroid_of(points: &DMatrix<f64>) -> DVector<f64> {
    points.row_mean().transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(seed: u64, centers: &[[f64; 2]], per: usize, spread: f64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, spread).unwrap();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                rows.push(center[0] + noise.sample(&mut rng));
                rows.push(center[1] + noise.sample(&mut rng));
                truth.push(c);
            }
        }
        (DMatrix::from_row_slice(truth.len(), 2, &rows), truth)
    }

    /// Labelings agree up to a bijection between label sets.
    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        let mut fwd = std::collections::HashMap::new();
        let mut back = std::collections::HashMap::new();
        a.iter().zip(b).all(|(x, y)| {
            *fwd.entry(*x).or_insert(*y) == *y && *back.entry(*y).or_insert(*x) == *x
        })
    }

    fn random_points(seed: u64, n: usize, dims: usize) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, dims, |_, _| rng.random_range(-5.0..5.0))
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let p = random_points(1, 8, 3);
        let a = kmeans(&p, &KMeansOptions { k: 8, ..Default::default() }).unwrap();
        assert_eq!(a.inertia, 0.0);
        let mut l = a.labels.clone();
        l.sort_unstable();
        l.dedup();
        assert_eq!(l.len(), 8);
    }

    #[test]
    fn k_one_is_the_mean() {
        let p = random_points(2, 30, 3);
        let a = kmeans(&p, &KMeansOptions { k: 1, ..Default::default() }).unwrap();
        let mean = centroid_of(&p);
        let total: f64 = p.row_iter().map(|r| (r.transpose() - &mean).norm_squared()).sum();
        assert!((a.inertia - total).abs() < 1e-9);
        for d in 0..3 {
            assert!((a.centroids[(0, d)] - mean[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_k() {
        let p = random_points(3, 4, 2);
        assert!(kmeans(&p, &KMeansOptions { k: 5, ..Default::default() }).is_err());
        assert!(kmeans(&p, &KMeansOptions { k: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn recovers_two_separated_blobs() {
        let (p, truth) = blobs(4, &[[0.0, 0.0], [10.0, 0.0]], 40, 1.0);
        let a = kmeans(&p, &KMeansOptions { k: 2, seed: 9, ..Default::default() }).unwrap();
        assert!(same_partition(&a.labels, &truth));
    }

    #[test]
    fn inertia_trace_never_increases() {
        for seed in 0..20 {
            let p = random_points(seed, 60, 3);
            for init in [KMeansInit::PlusPlus, KMeansInit::Random] {
                let a = kmeans(&p, &KMeansOptions { k: 4, seed, init, n_init: 3, ..Default::default() }).unwrap();
                for w in a.inertia_trace.windows(2) {
                    assert!(w[1] <= w[0] + 1e-9 * w[0].max(1.0));
                }
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let p = random_points(5, 50, 3);
        let opts = KMeansOptions { k: 3, seed: 42, ..Default::default() };
        assert_eq!(kmeans(&p, &opts).unwrap(), kmeans(&p, &opts).unwrap());
    }

    #[test]
    fn translation_and_rotation_invariance() {
        let (p, _) = blobs(6, &[[0.0, 0.0], [12.0, 1.0], [5.0, 11.0]], 20, 1.0);
        let opts = KMeansOptions { k: 3, seed: 1, ..Default::default() };
        let base = kmeans(&p, &opts).unwrap();
        let shifted = p.map(|v| v + 100.0);
        let t = kmeans(&shifted, &opts).unwrap();
        assert!((t.inertia - base.inertia).abs() < 1e-8);
        assert!(same_partition(&t.labels, &base.labels));
        let (s, c) = (0.3f64.sin(), 0.3f64.cos());
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let r = kmeans(&(&p * rot), &opts).unwrap();
        assert!((r.inertia - base.inertia).abs() < 1e-10 * base.inertia.max(1.0));
        assert!(same_partition(&r.labels, &base.labels));
    }

    #[test]
    fn permuting_labels_keeps_inertia() {
        let p = random_points(7, 40, 2);
        let a = kmeans(&p, &KMeansOptions { k: 3, seed: 3, ..Default::default() }).unwrap();
        let perm = [2, 0, 1];
        let centroids = DMatrix::from_fn(3, 2, |c, d| a.centroids[(perm[c], d)]);
        let labels: Vec<usize> = a.labels.iter().map(|l| perm.iter().position(|p| p == l).unwrap()).collect();
        let inertia: f64 = labels.iter().enumerate().map(|(i, &c)| sq_dist(&p, i, &centroids, c)).sum();
        assert!((inertia - a.inertia).abs() < 1e-12);
    }

    #[test]
    fn two_points_single_merge() {
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 3.0, 4.0]);
        let d = hierarchical(&p, Metric::Euclidean, Linkage::Average).unwrap();
        assert_eq!(d.merges, vec![Merge { a: 0, b: 1, distance: 5.0, size: 2 }]);
    }

    #[test]
    fn collinear_single_link() {
        let p = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 10.0]);
        let d = hierarchical(&p, Metric::Euclidean, Linkage::Single).unwrap();
        assert_eq!(d.merges[0], Merge { a: 0, b: 1, distance: 1.0, size: 2 });
        assert_eq!(d.merges[1], Merge { a: 2, b: 3, distance: 9.0, size: 3 });
    }

    #[test]
    fn ward_needs_euclidean() {
        let p = random_points(8, 5, 2);
        assert!(hierarchical(&p, Metric::Cosine, Linkage::Ward).is_err());
        assert!(hierarchical(&p.rows(0, 1).into_owned(), Metric::Euclidean, Linkage::Single).is_err());
    }

    /// Prim's algorithm over the complete graph.
    fn mst_weights(p: &DMatrix<f64>, metric: Metric) -> Vec<f64> {
        let n = p.nrows();
        let rows: Vec<Vec<f64>> = p.row_iter().map(|r| r.iter().copied().collect()).collect();
        let mut in_tree = vec![false; n];
        let mut best = vec![f64::INFINITY; n];
        best[0] = 0.0;
        let mut weights = Vec::new();
        for _ in 0..n {
            let u = (0..n).filter(|i| !in_tree[*i]).min_by(|a, b| best[*a].total_cmp(&best[*b])).unwrap();
            in_tree[u] = true;
            if weights.len() < n - 1 && u != 0 {
                weights.push(best[u]);
            }
            for v in 0..n {
                if !in_tree[v] {
                    best[v] = best[v].min(metric.distance(&rows[u], &rows[v]));
                }
            }
        }
        weights.sort_by(f64::total_cmp);
        weights
    }

    #[test]
    fn single_link_equals_mst() {
        for seed in 0..10 {
            let p = random_points(seed, 15, 3);
            for metric in [Metric::Euclidean, Metric::Manhattan] {
                let d = hierarchical(&p, metric, Linkage::Single).unwrap();
                let heights: Vec<f64> = d.merges.iter().map(|m| m.distance).collect();
                let mst = mst_weights(&p, metric);
                assert_eq!(heights.len(), mst.len());
                for (h, w) in heights.iter().zip(&mst) {
                    assert!((h - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn monotone_linkages_have_sorted_heights() {
        let p = random_points(11, 40, 3);
        for linkage in [Linkage::Single, Linkage::Complete, Linkage::Average, Linkage::Ward] {
            let d = hierarchical(&p, Metric::Euclidean, linkage).unwrap();
            assert!(d.merges.windows(2).all(|w| w[0].distance <= w[1].distance + 1e-12), "{linkage:?}");
            assert_eq!(d.merges.last().unwrap().size, 40);
        }
    }

    #[test]
    fn ward_matches_brute_force_merge_cost() {
        // brute force: merge the pair with the smallest increase in within-cluster SS
        let p = random_points(12, 9, 2);
        let d = hierarchical(&p, Metric::Euclidean, Linkage::Ward).unwrap();
        let mut clusters: Vec<Vec<usize>> = (0..9).map(|i| vec![i]).collect();
        let ss = |members: &[usize]| {
            let m = members.len() as f64;
            let cx = members.iter().map(|i| p[(*i, 0)]).sum::<f64>() / m;
            let cy = members.iter().map(|i| p[(*i, 1)]).sum::<f64>() / m;
            members.iter().map(|i| (p[(*i, 0)] - cx).powi(2) + (p[(*i, 1)] - cy).powi(2)).sum::<f64>()
        };
        for m in &d.merges {
            let mut best = (0, 0, f64::INFINITY);
            for i in 0..clusters.len() {
                for j in i + 1..clusters.len() {
                    let joined: Vec<usize> = clusters[i].iter().chain(&clusters[j]).copied().collect();
                    let inc = ss(&joined) - ss(&clusters[i]) - ss(&clusters[j]);
                    if inc < best.2 {
                        best = (i, j, inc);
                    }
                }
            }
            // ward height = sqrt(2 * increase)
            assert!((m.distance - (2.0 * best.2).sqrt()).abs() < 1e-9);
            let (i, j, _) = best;
            let merged: Vec<usize> = clusters[i].iter().chain(&clusters[j]).copied().collect();
            clusters.remove(j);
            clusters[i] = merged;
        }
    }

    #[test]
    fn cut_extremes_and_blobs() {
        let (p, truth) = blobs(13, &[[0.0, 0.0], [20.0, 0.0], [10.0, 20.0]], 10, 1.0);
        let d = hierarchical(&p, Metric::Euclidean, Linkage::Complete).unwrap();
        assert!(cut_dendrogram(&d, 1).unwrap().iter().all(|l| *l == 0));
        assert_eq!(cut_dendrogram(&d, 30).unwrap(), (0..30).collect::<Vec<_>>());
        let three = cut_dendrogram(&d, 3).unwrap();
        assert!(same_partition(&three, &truth));
        assert_eq!(three[0], 0);
        assert!(cut_dendrogram(&d, 0).is_err());
        assert!(cut_dendrogram(&d, 31).is_err());
    }

    #[test]
    fn newick_shape() {
        let p = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 10.0]);
        let d = hierarchical(&p, Metric::Euclidean, Linkage::Single).unwrap();
        let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(to_newick(&d, &labels), "(c:9,(a:1,b:1):8);");
    }
}
