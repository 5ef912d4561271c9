//! The `mobtrend` command-line front end.
//!
//! Every subcommand reads its inputs from the configured paths or from the
//! artifacts of earlier subcommands in the output directory, and writes its own
//! artifacts plus a manifest under `manifests/`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{self, KMeansOptions, Linkage, Metric};
use crate::correlate::{self, CovariateTable};
use crate::decompose::{self, Centering, RegionFit};
use crate::error::{Error, Result};
use crate::geo;
use crate::ingest::{self, Schema};
use crate::mobility::{self, DeltaSeries, TsppSeries};
use crate::spatial::{self, Inference, SpatialWeights, Standardization};
use crate::synth::{self, Noise, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "mobtrend", version, about = "Mobility-change analysis of region-day panels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML file with the same keys as the flags (underscores instead of dashes).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub options: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Aggregate, align and repair raw panels.
    Ingest,
    /// Rolling mean of each region-year.
    Tspp,
    /// Target minus reference year.
    Delta,
    /// Truncated SVD with outlier removal.
    Decompose,
    /// Cluster regions on normalized loadings.
    Cluster,
    /// Queen contiguity from geometry.
    Weights,
    /// Global Moran's I per variable.
    Moran,
    /// Local Moran's I per variable.
    Lisa,
    /// Pearson correlation of loadings with covariates.
    Correlate,
    /// Join results onto the geometry as GeoJSON.
    Export,
    /// Write a synthetic panel, geometry and covariates.
    Synth,
    /// Run every step in order.
    Pipeline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Tspp => "tspp",
            Command::Delta => "delta",
            Command::Decompose => "decompose",
            Command::Cluster => "cluster",
            Command::Weights => "weights",
            Command::Moran => "moran",
            Command::Lisa => "lisa",
            Command::Correlate => "correlate",
            Command::Export => "export",
            Command::Synth => "synth",
            Command::Pipeline => "pipeline",
        }
    }
}

/// Settings shared by the config file and the command line.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    /// Panel CSV holding the reference year.
    #[arg(long, global = true)]
    pub reference_panel: Option<PathBuf>,
    /// Panel CSV holding the target year (may be the same file).
    #[arg(long, global = true)]
    pub target_panel: Option<PathBuf>,
    /// GeoJSON FeatureCollection of region polygons.
    #[arg(long, global = true)]
    pub geometry: Option<PathBuf>,
    /// Covariate CSV keyed by region_id.
    #[arg(long, global = true)]
    pub covariates: Option<PathBuf>,
    /// CSV of region_id plus value columns for moran/lisa instead of loadings.
    #[arg(long, global = true)]
    pub values: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Feature property holding the region id.
    #[arg(long, global = true)]
    pub id_property: Option<String>,
    #[arg(long, global = true)]
    pub reference_year: Option<i32>,
    #[arg(long, global = true)]
    pub target_year: Option<i32>,
    /// Longest run of missing days that is interpolated.
    #[arg(long, global = true)]
    pub max_gap: Option<usize>,
    #[arg(long, global = true)]
    pub window_radius: Option<usize>,
    /// Number of latent components.
    #[arg(long = "K", global = true)]
    #[serde(rename = "K")]
    pub components: Option<usize>,
    /// Number of clusters.
    #[arg(long = "k", global = true)]
    #[serde(rename = "k")]
    pub clusters: Option<usize>,
    #[arg(long, global = true)]
    pub outlier_std: Option<f64>,
    /// kmeans or hierarchical.
    #[arg(long, global = true)]
    pub cluster_method: Option<String>,
    #[arg(long, global = true)]
    pub linkage: Option<String>,
    #[arg(long, global = true)]
    pub metric: Option<String>,
    #[arg(long, global = true)]
    pub n_init: Option<usize>,
    #[arg(long, global = true)]
    pub max_iter: Option<usize>,
    #[arg(long, global = true)]
    pub permutations: Option<usize>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// row or binary.
    #[arg(long, global = true)]
    pub standardization: Option<String>,
    /// normality, randomization or permutation.
    #[arg(long, global = true)]
    pub inference: Option<String>,
    /// Vertex snapping grid for contiguity.
    #[arg(long, global = true)]
    pub snap: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Largest K in the explained-variance curve.
    #[arg(long, global = true)]
    pub explained_max: Option<usize>,
    /// Synthetic regions.
    #[arg(long, global = true)]
    pub n_regions: Option<usize>,
    /// Synthetic noise as a fraction of signal RMS.
    #[arg(long, global = true)]
    pub noise: Option<f64>,
    /// Synthetic weight smoothing passes.
    #[arg(long, global = true)]
    pub smoothing_passes: Option<usize>,
}

macro_rules! overlay {
    ($base:ident, $top:ident, $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field; } )*
    };
}

impl Options {
    /// Fields set in `top` replace those in `self`.
    pub fn overlay(mut self, top: Options) -> Options {
        overlay!(
            self, top, reference_panel, target_panel, geometry, covariates, values, out_dir, id_property,
            reference_year, target_year, max_gap, window_radius, components, clusters, outlier_std,
            cluster_method, linkage, metric, n_init, max_iter, permutations, alpha, standardization,
            inference, snap, seed, explained_max, n_regions, noise, smoothing_passes
        );
        self
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.reference_panel,
            &mut self.target_panel,
            &mut self.geometry,
            &mut self.covariates,
            &mut self.values,
            &mut self.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    Kmeans,
    Hierarchical,
}

/// Fully resolved parameters; serialised into every manifest.
#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    #[serde(skip)]
    pub reference_panel: Option<PathBuf>,
    #[serde(skip)]
    pub target_panel: Option<PathBuf>,
    #[serde(skip)]
    pub geometry: Option<PathBuf>,
    #[serde(skip)]
    pub covariates: Option<PathBuf>,
    #[serde(skip)]
    pub values: Option<PathBuf>,
    #[serde(skip)]
    pub out_dir: PathBuf,
    pub id_property: String,
    pub reference_year: i32,
    pub target_year: i32,
    pub max_gap: usize,
    pub window_radius: usize,
    #[serde(rename = "K")]
    pub components: usize,
    #[serde(rename = "k")]
    pub clusters: usize,
    pub outlier_std: f64,
    pub cluster_method: ClusterMethod,
    pub linkage: String,
    pub metric: String,
    pub n_init: usize,
    pub max_iter: usize,
    pub permutations: usize,
    pub alpha: f64,
    pub standardization: Standardization,
    pub inference: Inference,
    pub snap: f64,
    pub seed: u64,
    pub explained_max: usize,
    pub n_regions: usize,
    pub noise: f64,
    pub smoothing_passes: usize,
}

impl Settings {
    pub fn resolve(o: Options) -> Result<Settings> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let s = Settings {
            reference_panel: o.reference_panel,
            target_panel: o.target_panel,
            geometry: o.geometry,
            covariates: o.covariates,
            values: o.values,
            out_dir: o.out_dir.unwrap_or_else(|| PathBuf::from("out")),
            id_property: o.id_property.unwrap_or_else(|| "region_id".into()),
            reference_year: o.reference_year.unwrap_or(2019),
            target_year: o.target_year.unwrap_or(2020),
            max_gap: o.max_gap.unwrap_or(ingest::DEFAULT_MAX_GAP),
            window_radius: o.window_radius.unwrap_or(mobility::DEFAULT_WINDOW_RADIUS),
            components: o.components.unwrap_or(decompose::DEFAULT_COMPONENTS),
            clusters: o.clusters.unwrap_or(cluster::DEFAULT_CLUSTERS),
            outlier_std: o.outlier_std.unwrap_or(decompose::DEFAULT_OUTLIER_STD),
            cluster_method: match o.cluster_method.as_deref().unwrap_or("kmeans") {
                "kmeans" => ClusterMethod::Kmeans,
                "hierarchical" => ClusterMethod::Hierarchical,
                other => return bad(format!("unknown cluster method `{other}`")),
            },
            linkage: o.linkage.unwrap_or_else(|| "ward".into()),
            metric: o.metric.unwrap_or_else(|| "euclidean".into()),
            n_init: o.n_init.unwrap_or(cluster::DEFAULT_N_INIT),
            max_iter: o.max_iter.unwrap_or(cluster::DEFAULT_MAX_ITER),
            permutations: o.permutations.unwrap_or(spatial::DEFAULT_PERMUTATIONS),
            alpha: o.alpha.unwrap_or(spatial::DEFAULT_ALPHA),
            standardization: o.standardization.as_deref().unwrap_or("row").parse()?,
            inference: o.inference.as_deref().unwrap_or("randomization").parse()?,
            snap: o.snap.unwrap_or(spatial::DEFAULT_SNAP),
            seed: o.seed.unwrap_or(0),
            explained_max: o.explained_max.unwrap_or(10),
            n_regions: o.n_regions.unwrap_or(SynthConfig::default().n_regions),
            noise: o.noise.unwrap_or(0.05),
            smoothing_passes: o.smoothing_passes.unwrap_or(2),
        };
        s.linkage.parse::<Linkage>()?;
        s.metric.parse::<Metric>()?;
        if s.window_radius == 0 {
            return bad("window_radius must be at least 1".into());
        }
        if s.components == 0 || s.clusters == 0 || s.explained_max == 0 {
            return bad("K, k and explained_max must be at least 1".into());
        }
        if !(s.outlier_std > 0.0) {
            return bad(format!("outlier_std must be positive, got {}", s.outlier_std));
        }
        if !(s.alpha > 0.0 && s.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", s.alpha));
        }
        if !(s.snap > 0.0) {
            return bad(format!("snap must be positive, got {}", s.snap));
        }
        if s.n_init == 0 || s.max_iter == 0 {
            return bad("n_init and max_iter must be at least 1".into());
        }
        if !(s.noise >= 0.0) {
            return bad(format!("noise must be non-negative, got {}", s.noise));
        }
        if s.reference_year == s.target_year {
            return bad("reference_year and target_year must differ".into());
        }
        Ok(s)
    }

    fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref()
            .ok_or_else(|| Error::InvalidParameter(format!("`{key}` is required for this command")))
    }
}

#[derive(Debug, Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    parameters: &'a Settings,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Tracks the files one subcommand reads and writes.
struct Run<'a> {
    settings: &'a Settings,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl<'a> Run<'a> {
    fn new(settings: &'a Settings) -> Result<Self> {
        fs::create_dir_all(settings.out_dir.join("manifests"))
            .map_err(|e| Error::io(format!("creating {}", settings.out_dir.display()), e))?;
        Ok(Run {
            settings,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let label = path
            .strip_prefix(&self.settings.out_dir)
            .map_or_else(|_| path.display().to_string(), |p| p.display().to_string());
        self.inputs.insert(label, sha256_hex(&bytes));
        Ok(bytes)
    }

    fn read_text(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read_input(path)?)
            .map_err(|_| Error::InvalidData(format!("{} is not UTF-8", path.display())))
    }

    /// An artifact of an earlier subcommand.
    fn upstream(&mut self, name: &str, producer: &str) -> Result<String> {
        let path = self.settings.out_dir.join(name);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                producer: producer.into(),
            });
        }
        self.read_text(&path)
    }

    fn optional_upstream(&mut self, name: &str) -> Result<Option<String>> {
        let path = self.settings.out_dir.join(name);
        if path.exists() {
            self.read_text(&path).map(Some)
        } else {
            Ok(None)
        }
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.settings.out_dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    /// Records a file some library routine wrote directly.
    fn record_output(&mut self, name: &str) -> Result<()> {
        let path = self.settings.out_dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        self.outputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn finish(self, command: &str) -> Result<BTreeMap<String, String>> {
        let hashes = |m: &BTreeMap<String, String>| {
            m.iter()
                .map(|(path, sha256)| FileHash {
                    path: path.clone(),
                    sha256: sha256.clone(),
                })
                .collect()
        };
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.settings.seed,
            parameters: self.settings,
            inputs: hashes(&self.inputs),
            outputs: hashes(&self.outputs),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.settings.out_dir.join("manifests").join(format!("{command}.json"));
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        info!("{command}: wrote {} artifact(s)", self.outputs.len());
        Ok(self.outputs)
    }
}

fn ingest(s: &Settings) -> Result<BTreeMap<String, String>> {
    let mut run = Run::new(s)?;
    let ref_path = s.require(&s.reference_panel, "reference_panel")?;
    let tgt_path = s.require(&s.target_panel, "target_panel")?;
    let mut paths = vec![ref_path];
    if tgt_path != ref_path {
        paths.push(tgt_path);
    }
    let schema = Schema::default();
    let mut records = Vec::new();
    for path in paths {
        let bytes = run.read_input(path)?;
        let parsed = ingest::parse_panel(bytes.as_slice(), &schema)?;
        for e in &parsed.row_errors {
            warn!("{}: line {}: {}", path.display(), e.line, e.message);
        }
        records.extend(parsed.records);
    }
    let years = [s.reference_year, s.target_year];
    let before = records.len();
    records.retain(|r| years.contains(&chrono::Datelike::year(&r.date)));
    if records.len() < before {
        info!("ignored {} record(s) outside {years:?}", before - records.len());
    }
    if records.is_empty() {
        return Err(Error::Empty("no panel records for the configured years".into()));
    }
    let mut coverage = ingest::coverage_report(&records);
    let prepared = ingest::prepare_series(&records, s.max_gap);
    for (label, reason) in &prepared.dropped {
        let region = label.split('/').next().unwrap_or(label);
        coverage.mark_dropped(region, reason.clone());
    }
    let regions: BTreeSet<&String> = prepared.series.keys().map(|(r, _)| r).collect();
    for region in regions {
        for year in years {
            if !prepared.series.contains_key(&(region.clone(), year)) && !coverage.dropped.contains_key(region) {
                coverage.mark_dropped(region, format!("no usable data for {year}"));
            }
        }
    }
    let kept: Vec<&ingest::RegionSeries> = prepared
        .series
        .iter()
        .filter(|((region, _), _)| !coverage.dropped.contains_key(region))
        .map(|(_, series)| series)
        .collect();
    if kept.is_empty() {
        return Err(Error::Empty("every region was dropped during ingest".into()));
    }
    info!(
        "ingest: {} region(s) seen, {} kept",
        coverage.regions_seen(),
        coverage.kept().count()
    );
    ingest::write_series_bundle(&s.out_dir, "series", kept)?;
    run.record_output("series_index.csv")?;
    run.record_output("series.csv")?;
    run.write_with("coverage.csv", |b| coverage.write_csv(b))?;
    run.finish("ingest")
}

fn tspp(s: &Settings) -> Result<BTreeMap<String, String>> {
    let mut run = Run::new(s)?;
    // hash the bundle as inputs, then parse it from disk
    run.upstream("series_index.csv", "ingest")?;
    run.upstream("series.csv", "ingest")?;
    let series = ingest::read_series_bundle(&s.out_dir, "series")?;
    let out = series
        .iter()
        .map(|r| mobility::tspp(r, s.window_radius))
        .collect::<Result<Vec<TsppSeries>>>()?;
    run.write_with("tspp.csv", |b| mobility::write_tspp_csv(b, &out))?;
    run.finish("tspp")
}

fn delta(s: &Settings) -> Result<BTreeMap<String, String>> {
    let mut run = Run::new(s)?;
    let series = mobility::read_tspp_csv(&run.upstream("tspp.csv", "tspp")?)?;
    let mut by_region: BTreeMap<&str, HashMap<i32, &TsppSeries>> = BTreeMap::new();
    for t in &series {
        by_region.entry(&t.region_id).or_default().insert(t.year, t);
    }
    let mut deltas = Vec::new();
    for (region, years) in by_region {
        match (years.get(&s.target_year), years.get(&s.reference_year)) {
            (Some(t), Some(r)) => deltas.push(mobility::delta_tspp(t, r)?),
            _ => warn!("region {region} lacks one of the two years; skipped"),
        }
    }
    if deltas.is_empty() {
        return Err(Error::Empty("no region has both years".into()));
    }
    let mean = mobility::aggregate_delta(&deltas, None, "all")?;
    run.write_with("delta.csv", |b| mobility::write_delta_csv(b, &deltas))?;
    run.write_with("delta_mean.csv", |b| mobility::write_delta_csv(b, &[mean]))?;
    run.finish("delta")
}

fn decompose(s: &Settings) -> Result<BTreeMap<String, String>> {
    let mut run = Run::new(s)?;
    let deltas: Vec<DeltaSeries> = mobility::read_delta_csv(&run.upstream("delta.csv", "delta")?)?;
    let matrix = decompose::assemble_matrix(&deltas, s.window_radius + 1)?;
    let (matrix, removed) = decompose::remove_outliers(&matrix, s.outlier_std, Centering::Columns)?;
    if !removed.is_empty() {
        info!("removed {} outlier region(s): {}", removed.len(), removed.join(" "));
    }
    let k = s.components;
    let dec = decompose::truncated_svd(&matrix, k, Centering::Columns)?;
    info!("K = {k} explains {:.4} of the variance", dec.total_explained);
    let max_rank = matrix.n_days().min(matrix.n_regions());
    let curve = decompose::explained_variance_curve(&matrix, s.explained_max.max(k).min(max_rank), Centering::Columns)?;
    let fits = decompose::region_fits(&matrix, &dec)?;

    run.write("outliers.csv", format!("region_id\n{}", removed.iter().map(|r| format!("{r}\n")).collect::<String>()).as_bytes())?;
    run.write_with("components.csv", |b| decompose::write_components_csv(b, &matrix, &dec))?;
    run.write_with("loadings.csv", |b| decompose::write_loadings_csv(b, &dec))?;
    run.write_with("explained_variance.csv", |b| decompose::write_explained_variance_csv(b, &dec, &curve))?;
    run.write_with("r_squared.csv", |b| decompose::write_r_squared_csv(b, &fits))?;
    run.write_with("colors.csv", |b| decompose::write_colors_csv(b, &fits))?;
    run.finish("decompose")
}

fn cluster(s: &Settings) -> Result<BTreeMap<String, String>> {
    let mut run = Run::new(s)?;
    let table = decompose::read_loadings_csv(&run.upstream("loadings.csv", "decompose")?)?;
    let points = &table.normalized;
    match s.cluster_method {
        ClusterMethod::Kmeans => {
            let opts = KMeansOptions {
                k: s.clusters,
                seed: s.seed,
                max_iter: s.max_iter,
                n_init: s.n_init,
                ..KMeansOptions::default()
            };
            let result = cluster::kmeans(points, &opts)?;
            info!("k-means inertia {:.6} after {} iteration(s)", result.inertia, result.iterations_run);
            run.write_with("labels.csv", |b| cluster::write_labels_csv(b, &table.region_index, &result.labels))?;
            run.write_with("centroids.csv", |b| cluster::write_centroids_csv(b, &result.centroids))?;
        }
        ClusterMethod::Hierarchical => {
            let d = cluster::hierarchical(points, s.metric.parse()?, s.linkage.parse()?)?;
            let labels = cluster::cut_dendrogram(&d, s.clusters)?;
            let centroids = DMatrix::from_fn(s.clusters, points.ncols(), |c, j| {
                let members: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == c).collect();
                members.iter().map(|i| points[(*i, j)]).sum::<f64>() / members.len() as f64
            });
            run.write_with("labels.csv", |b| cluster::write_labels_csv(b, &table.region_index, &labels))?;
            run.write_with("centroids.csv", |b| cluster::write_centroids_csv(b, &centroids))?;
            let mut newick = cluster::to_newick(&d, &table.region_index);
            newick.push('\n');
            run.write("dendrogram.nwk", newick.as_bytes())?;
        }
    }
    run.finish("cluster")
}

fn weights(s: &Settings) -> Result<BTreeMap<String, String>> {
    let mut run = Run::new(s)?;
    let text = run.read_text(s.require(&s.geometry, "geometry")?)?;
    let geoms = geo::read_geometries(&text, &s.id_property)?;
    let w = spatial::queen_weights(&geoms, s.snap)?;
    run.write("weights.gal", spatial::write_adjacency(&w).as_bytes())?;
    run.finish("weights")
}

/// Named value columns keyed by region, from `values` or the raw loadings.
fn spatial_variables(run: &mut Run, s: &Settings) -> Result<Vec<(String, Vec<String>, Vec<f64>)>> {
    let (ids, names, columns): (Vec<String>, Vec<String>, Vec<Vec<f64>>) = match &s.values {
        Some(path) => {
            let table = CovariateTable::read(run.read_input(path)?.as_slice())?;
            let columns = (0..table.names.len())
                .map(|c| table.values.iter().map(|row| row[c]).collect())
                .collect();
            (table.region_ids, table.names, columns)
        }
        None => {
            let table = decompose::read_loadings_csv(&run.upstream("loadings.csv", "decompose")?)?;
            let k = table.raw.ncols();
            let columns = (0..k).map(|c| table.raw.column(c).iter().copied().collect()).collect();
            (table.region_index, (1..=k).map(|c| format!("pc{c}")).collect(), columns)
        }
    };
    Ok(names
        .into_iter()
        .zip(columns)
        .map(|(name, col)| {
            let (keep_ids, keep_vals): (Vec<String>, Vec<f64>) = ids
                .iter()
                .zip(col)
                .filter(|(_, v)| !v.is_nan())
                .map(|(id, v)| (id.clone(), v))
                .unzip();
            (name, keep_ids, keep_vals)
        })
        .collect())
}

/// Weights restricted to the regions with values, islands removed, then standardized.
fn prepare_weights(
    all: &SpatialWeights,
    ids: &[String],
    values: &[f64],
    mode: Standardization,
    name: &str,
) -> Result<(SpatialWeights, Vec<f64>, Vec<String>)> {
    let known: HashMap<&str, ()> = all.ids().iter().map(|s| (s.as_str(), ())).collect();
    let (ids, values): (Vec<String>, Vec<f64>) = ids
        .iter()
        .zip(values)
        .filter(|(id, _)| {
            let hit = known.contains_key(id.as_str());
            if !hit {
                warn!("{name}: region {id} has no geometry; skipped");
            }
            hit
        })
        .map(|(id, v)| (id.clone(), *v))
        .unzip();
    let w = all.aligned_to(&ids)?;
    let (w, values, islands) = spatial::drop_islands(&w, &values)?;
    Ok((spatial::standardize(&w, mode), values, islands))
}

#[derive(Serialize)]
struct GlobalEntry {
    variable: String,
    n: usize,
    islands_removed: Vec<String>,
    #[serde(flatten)]
    result: spatial::MoranResult,
}

fn moran(s: &Settings) -> Result<BTreeMap<String, String>> {
    let mut run = Run::new(s)?;
    let variables = spatial_variables(&mut run, s)?;
    let w = spatial::read_adjacency(&run.upstream("weights.gal", "weights")?)?;
    let mut entries = Vec::new();
    for (name, ids, values) in variables {
        let (wv, vals, islands) = prepare_weights(&w, &ids, &values, s.standardization, &name)?;
        let result = spatial::global_moran(&vals, &wv, s.inference, s.permutations, s.seed)
            .map_err(|e| match e {
                Error::ConstantField => Error::InvalidData(format!("{name}: constant field")),
                other => other,
            })?;
        info!("{name}: I = {:.4}, z = {:.3}, p = {:.3e}", result.i, result.z_score, result.p_value);
        entries.push(GlobalEntry {
            variable: name,
            n: vals.len(),
            islands_removed: islands,
            result,
        });
    }
    let mut text = serde_json::to_string_pretty(&serde_json::json!({
        "standardization": s.standardization,
        "results": entries,
    }))?;
    text.push('\n');
    run.write("moran.json", text.as_bytes())?;
    run.finish("moran")
}

fn lisa(s: &Settings) -> Result<BTreeMap<String, String>> {
    let mut run = Run::new(s)?;
    let variables = spatial_variables(&mut run, s)?;
    let w = spatial::read_adjacency(&run.upstream("weights.gal", "weights")?)?;
    for (name, ids, values) in variables {
        let (wv, vals, _) = prepare_weights(&w, &ids, &values, s.standardization, &name)?;
        let result = spatial::local_moran(&vals, &wv, s.permutations, s.seed, s.alpha).map_err(|e| match e {
            Error::ConstantField => Error::InvalidData(format!("{name}: constant field")),
            other => other,
        })?;
        let significant = result.regions.iter().filter(|r| r.significant).count();
        info!("{name}: {significant} significant region(s) at alpha {}", s.alpha);
        run.write_with(&format!("lisa_{name}.csv"), |b| spatial::write_lisa_csv(b, &result))?;
    }
    run.finish("lisa")
}

fn correlate(s: &Settings) -> Result<BTreeMap<String, String>> {
    let mut run = Run::new(s)?;
    let table = decompose::read_loadings_csv(&run.upstream("loadings.csv", "decompose")?)?;
    let covariates = CovariateTable::read(run.read_input(s.require(&s.covariates, "covariates")?)?.as_slice())?;
    let results = correlate::correlate_all(&table.raw, &table.region_index, &covariates)?;
    run.write_with("correlations.csv", |b| correlate::write_correlations_csv(b, &results))?;
    run.write_with("correlation_table.csv", |b| {
        correlate::write_correlation_table(b, &results, table.raw.ncols())
    })?;
    run.finish("correlate")
}

fn two_column_map(text: &str, value_column: &str) -> Result<HashMap<String, String>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: value_column.into(),
            source: e,
        })?
        .clone();
    let col = headers
        .iter()
        .position(|h| h == value_column)
        .ok_or_else(|| Error::MissingColumn(value_column.into()))?;
    reader
        .records()
        .map(|r| {
            let r = r.map_err(|e| Error::Csv {
                path: value_column.into(),
                source: e,
            })?;
            Ok((r[0].to_string(), r[col].to_string()))
        })
        .collect()
}

fn export(s: &Settings) -> Result<BTreeMap<String, String>> {
    let mut run = Run::new(s)?;
    let geometry = run.read_text(s.require(&s.geometry, "geometry")?)?;
    let table = decompose::read_loadings_csv(&run.upstream("loadings.csv", "decompose")?)?;
    let r2 = two_column_map(&run.upstream("r_squared.csv", "decompose")?, "r_squared")?;
    let labels = match run.optional_upstream("labels.csv")? {
        Some(text) => two_column_map(&text, "cluster_label")?,
        None => HashMap::new(),
    };
    let fits: Vec<RegionFit> = table
        .region_index
        .iter()
        .enumerate()
        .map(|(j, id)| RegionFit {
            region_id: id.clone(),
            r_squared: r2.get(id).and_then(|v| v.parse().ok()),
            normalized_loadings: table.normalized.row(j).iter().copied().collect(),
        })
        .collect();
    let mut props = decompose::fit_properties(&fits)?;
    for (id, p) in props.iter_mut() {
        if let Some(label) = labels.get(id).and_then(|l| l.parse::<u64>().ok()) {
            p.insert("cluster".into(), serde_json::json!(label));
        }
    }
    let joined = geo::join_properties(&geometry, &s.id_property, &props)?;
    run.write("regions.geojson", format!("{joined}\n").as_bytes())?;
    run.finish("export")
}

fn synth_cmd(s: &Settings) -> Result<BTreeMap<String, String>> {
    let mut run = Run::new(s)?;
    let config = SynthConfig {
        n_regions: s.n_regions,
        noise: Noise::RelativeToSignal(s.noise),
        smoothing_passes: s.smoothing_passes,
        seed: s.seed,
        ..SynthConfig::default()
    };
    let (panel, truth) = synth::generate(&config)?;
    run.write_with(&format!("panel_{}.csv", synth::REFERENCE_YEAR), |b| {
        synth::write_panel_csv(b, &panel.reference)
    })?;
    run.write_with(&format!("panel_{}.csv", synth::TARGET_YEAR), |b| {
        synth::write_panel_csv(b, &panel.target)
    })?;
    run.write(
        "geometry.geojson",
        format!("{}\n", geo::write_geometries(&truth.geometry, &s.id_property)?).as_bytes(),
    )?;
    run.write_with("covariates.csv", |b| truth.covariates.write(b))?;
    run.write_with("truth_weights.csv", |b| synth::write_truth_weights_csv(b, &truth))?;
    run.write_with("truth_archetypes.csv", |b| synth::write_truth_archetypes_csv(b, &truth))?;
    run.finish("synth")
}

fn pipeline(s: &Settings) -> Result<BTreeMap<String, String>> {
    let mut steps: Vec<Command> = vec![
        Command::Ingest,
        Command::Tspp,
        Command::Delta,
        Command::Decompose,
        Command::Cluster,
    ];
    if s.geometry.is_some() {
        steps.extend([Command::Weights, Command::Moran, Command::Lisa]);
    }
    if s.covariates.is_some() {
        steps.push(Command::Correlate);
    }
    if s.geometry.is_some() {
        steps.push(Command::Export);
    }
    let mut run = Run::new(s)?;
    for step in steps {
        info!("pipeline: {}", step.name());
        let outputs = execute(step, s)?;
        run.outputs.extend(outputs);
        run.outputs.insert(
            format!("manifests/{}.json", step.name()),
            sha256_hex(&fs::read(s.out_dir.join("manifests").join(format!("{}.json", step.name()))).map_err(|e| Error::io("reading step manifest", e))?),
        );
    }
    run.finish("pipeline")
}

/// Runs one subcommand, returning its outputs and their hashes.
pub fn execute(command: Command, settings: &Settings) -> Result<BTreeMap<String, String>> {
    match command {
        Command::Ingest => ingest(settings),
        Command::Tspp => tspp(settings),
        Command::Delta => delta(settings),
        Command::Decompose => decompose(settings),
        Command::Cluster => cluster(settings),
        Command::Weights => weights(settings),
        Command::Moran => moran(settings),
        Command::Lisa => lisa(settings),
        Command::Correlate => correlate(settings),
        Command::Export => export(settings),
        Command::Synth => synth_cmd(settings),
        Command::Pipeline => pipeline(settings),
    }
}

/// Reads the optional config file and lays command-line flags over it.
///
/// Relative paths in the file are taken relative to the file's directory.
pub fn load_settings(cli: &Cli) -> Result<Settings> {
    let mut base = Options::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidParameter(format!("cannot read config {}: {e}", path.display())))?;
        base = toml::from_str(&text)
            .map_err(|e| Error::InvalidParameter(format!("config {}: {e}", path.display())))?;
        base.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    }
    Settings::resolve(base.overlay(cli.options.clone()))
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let result = load_settings(&cli).and_then(|settings| execute(cli.command, &settings));
    match result {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.kind().exit_code()
        }
    }
}
