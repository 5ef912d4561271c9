//! Pearson correlation of component loadings against covariates.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::Serialize;
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Region-keyed table of named real covariates; missing cells are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub region_ids: Vec<String>,
    pub names: Vec<String>,
    /// `values[row][column]`.
    pub values: Vec<Vec<f64>>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "na" | "NaN" | "nan" | "null")
}

impl CovariateTable {
    /// Reads a CSV with a `region_id` column and one column per covariate.
    /// Empty, `NA` and `NaN` cells are missing.
    pub fn read<R: Read>(source: R) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let headers = reader
            .headers()
            .map_err(|e| Error::Csv {
                path: "covariates".into(),
                source: e,
            })?
            .clone();
        let id_col = headers
            .iter()
            .position(|h| h == "region_id")
            .ok_or_else(|| Error::MissingColumn("region_id".into()))?;
        let names: Vec<String> = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != id_col)
            .map(|(_, h)| h.to_string())
            .collect();
        let mut table = CovariateTable {
            region_ids: Vec::new(),
            names,
            values: Vec::new(),
        };
        let mut seen = HashMap::new();
        for (row, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Csv {
                path: "covariates".into(),
                source: e,
            })?;
            let id = record[id_col].to_string();
            if seen.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateRegion(id));
            }
            let values = record
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != id_col)
                .map(|(i, cell)| {
                    if is_missing(cell) {
                        return Ok(f64::NAN);
                    }
                    cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                        Error::InvalidData(format!(
                            "covariate `{}` for region {id}: not a number: {cell:?}",
                            &headers[i]
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            table.region_ids.push(id);
            table.values.push(values);
        }
        Ok(table)
    }

    pub fn read_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read(file)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        let io_err = |e| Error::io("writing covariates", e);
        writeln!(out, "region_id,{}", self.names.join(",")).map_err(io_err)?;
        for (id, row) in self.region_ids.iter().zip(&self.values) {
            let cells: Vec<String> = row
                .iter()
                .map(|v| if v.is_nan() { "NA".to_string() } else { v.to_string() })
                .collect();
            writeln!(out, "{id},{}", cells.join(",")).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    /// Column `name` aligned to `ids`; regions absent from the table are NaN.
    pub fn column_for(&self, name: &str, ids: &[String]) -> Option<Vec<f64>> {
        let c = self.names.iter().position(|n| n == name)?;
        let pos: HashMap<&str, usize> = self
            .region_ids
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        Some(
            ids.iter()
                .map(|id| pos.get(id.as_str()).map_or(f64::NAN, |r| self.values[*r][c]))
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correlation {
    pub r: f64,
    pub p_value: f64,
    pub n_used: usize,
}

/// Two-sided p-value of `r` under the null of zero correlation with `n` pairs.
///
/// Exact linear dependence (`|r| = 1`) gives zero.
pub fn pearson_p_value(r: f64, n: usize) -> f64 {
    let one_minus_r2 = (1.0 - r) * (1.0 + r);
    if one_minus_r2 <= 0.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    beta_reg(df / 2.0, 0.5, one_minus_r2).clamp(0.0, 1.0)
}

/// Pearson's r with pairwise deletion of NaN entries.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    let pairs: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| !a.is_nan() && !b.is_nan())
        .map(|(a, b)| (*a, *b))
        .collect();
    let n = pairs.len();
    if n < 3 {
        return Err(Error::TooFewObservations { needed: 3, got: n });
    }
    if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in &pairs {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    Ok(Correlation {
        r,
        p_value: pearson_p_value(r, n),
        n_used: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationResult {
    pub covariate: String,
    /// Zero-based component index.
    pub component: usize,
    pub r: f64,
    pub p_value: f64,
    pub n_used: usize,
}

/// Correlates every loading column with every covariate.
///
/// Results are grouped by component and sorted by `|r|` descending within
/// each group. Covariates that cannot be correlated are skipped with a warning.
pub fn correlate_all(
    loadings: &DMatrix<f64>,
    region_ids: &[String],
    covariates: &CovariateTable,
) -> Result<Vec<CorrelationResult>> {
    if loadings.nrows() != region_ids.len() {
        return Err(Error::LengthMismatch {
            expected: region_ids.len(),
            actual: loadings.nrows(),
        });
    }
    let columns: Vec<(String, Vec<f64>)> = covariates
        .names
        .iter()
        .map(|name| {
            let col = covariates.column_for(name, region_ids).expect("name from table");
            (name.clone(), col)
        })
        .collect();
    let mut out = Vec::new();
    for c in 0..loadings.ncols() {
        let load: Vec<f64> = loadings.column(c).iter().copied().collect();
        let mut group = Vec::new();
        for (name, col) in &columns {
            match pearson(&load, col) {
                Ok(corr) => group.push(CorrelationResult {
                    covariate: name.clone(),
                    component: c,
                    r: corr.r,
                    p_value: corr.p_value,
                    n_used: corr.n_used,
                }),
                Err(e) => warn!("skipping covariate `{name}` for pc{}: {e}", c + 1),
            }
        }
        group.sort_by(|a, b| {
            b.r.abs()
                .partial_cmp(&a.r.abs())
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.covariate.cmp(&b.covariate))
        });
        out.extend(group);
    }
    Ok(out)
}

/// Long format: `component,covariate,r,p_value,n_used`.
pub fn write_correlations_csv<W: Write>(mut out: W, results: &[CorrelationResult]) -> Result<()> {
    let io_err = |e| Error::io("writing correlations", e);
    writeln!(out, "component,covariate,r,p_value,n_used").map_err(io_err)?;
    for r in results {
        writeln!(out, "pc{},{},{},{},{}", r.component + 1, r.covariate, r.r, r.p_value, r.n_used)
            .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Scientific notation with two decimals and a signed two-digit exponent.
pub fn format_p(p: f64) -> String {
    let text = format!("{p:.2e}");
    match text.split_once('e') {
        Some((mantissa, exp)) => {
            let e: i32 = exp.parse().expect("exponent from format");
            format!("{mantissa}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
        }
        None => text,
    }
}

/// Wide table with one row per covariate and an `r`/`p` column pair per
/// component, ordered by `|r|` on the first component. Correlations print with
/// two decimals and p-values in scientific notation.
pub fn write_correlation_table<W: Write>(mut out: W, results: &[CorrelationResult], k: usize) -> Result<()> {
    let io_err = |e| Error::io("writing correlation table", e);
    let mut names: Vec<&str> = Vec::new();
    let mut cells: HashMap<(&str, usize), &CorrelationResult> = HashMap::new();
    for r in results {
        if !names.contains(&r.covariate.as_str()) {
            names.push(&r.covariate);
        }
        cells.insert((&r.covariate, r.component), r);
    }
    let key = |name: &str| cells.get(&(name, 0)).map_or(-1.0, |r| r.r.abs());
    names.sort_by(|a, b| key(b).partial_cmp(&key(a)).unwrap_or(Ordering::Equal).then_with(|| a.cmp(b)));
    let mut header = vec!["covariate".to_string()];
    for c in 1..=k {
        header.push(format!("pc{c}_r"));
        header.push(format!("pc{c}_p"));
    }
    writeln!(out, "{}", header.join(",")).map_err(io_err)?;
    for name in names {
        let mut row = vec![name.to_string()];
        for c in 0..k {
            match cells.get(&(name, c)) {
                Some(r) => {
                    row.push(format!("{:.2}", r.r));
                    row.push(format_p(r.p_value));
                }
                None => row.extend(["NA".to_string(), "NA".to_string()]),
            }
        }
        writeln!(out, "{}", row.join(",")).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
