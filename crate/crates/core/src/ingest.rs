//! Panel ingestion: raw per-subregion daily records to per-region daily series.
//!
//! Records are parsed from delimited text, averaged over subregions into one
//! series per region and year, aligned to a 365-slot day-of-year grid (leap
//! days dropped) and short gaps are filled by linear interpolation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use log::{debug, warn};

use crate::error::{Error, Result};

/// Number of day-of-year slots after leap-day normalization.
pub const DAYS_PER_YEAR: usize = 365;

/// Zero-based index of February 29 in a leap year.
pub const FEB29_INDEX: usize = 59;

/// Default longest run of missing days repaired by interpolation.
pub const DEFAULT_MAX_GAP: usize = 3;

/// Column mapping and parsing options for a raw panel.
#[derive(Debug, Clone)]
pub struct Schema {
    pub date_column: String,
    pub subregion_column: String,
    pub value_column: String,
    /// Explicit region column. When unset the region is a prefix of the subregion id.
    pub region_column: Option<String>,
    pub region_prefix_len: usize,
    pub delimiter: u8,
    /// strftime-style date pattern.
    pub date_format: String,
    /// Inclusive range of accepted years.
    pub years: Option<(i32, i32)>,
}

impl Default for Schema {
    fn default() -> Self {
        Schema {
            date_column: "date".into(),
            subregion_column: "subregion_id".into(),
            value_column: "value".into(),
            region_column: None,
            region_prefix_len: 5,
            delimiter: b',',
            date_format: "%Y-%m-%d".into(),
            years: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DailyRecord {
    pub date: NaiveDate,
    pub subregion_id: String,
    pub region_id: String,
    /// Minutes per day.
    pub value: f64,
}

/// A rejected input row and why.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedPanel {
    pub records: Vec<DailyRecord>,
    pub row_errors: Vec<RowError>,
}

struct ColumnIndex {
    date: usize,
    subregion: usize,
    value: usize,
    region: Option<usize>,
}

fn find_column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

/// Parses a delimited panel with a header row.
///
/// Malformed rows do not abort the parse; each one is reported in
/// [`ParsedPanel::row_errors`] with its line number. A header that lacks a
/// mapped column is a hard error.
pub fn parse_panel<R: Read>(source: R, schema: &Schema) -> Result<ParsedPanel> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);

    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: "<panel>".into(),
            source: e,
        })?
        .clone();
    let cols = ColumnIndex {
        date: find_column(&headers, &schema.date_column)?,
        subregion: find_column(&headers, &schema.subregion_column)?,
        value: find_column(&headers, &schema.value_column)?,
        region: match &schema.region_column {
            Some(name) => Some(find_column(&headers, name)?),
            None => None,
        },
    };

    let mut panel = ParsedPanel::default();
    let mut row = csv::StringRecord::new();
    loop {
        let line = reader.position().line() + 1;
        match reader.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {
                let line = row.position().map(|p| p.line()).unwrap_or(line);
                match parse_row(&row, &cols, schema) {
                    Ok(rec) => panel.records.push(rec),
                    Err(message) => panel.row_errors.push(RowError { line, message }),
                }
            }
            Err(e) => panel.row_errors.push(RowError {
                line,
                message: e.to_string(),
            }),
        }
    }
    if !panel.row_errors.is_empty() {
        warn!("{} malformed row(s) skipped", panel.row_errors.len());
    }
    Ok(panel)
}

fn parse_row(
    row: &csv::StringRecord,
    cols: &ColumnIndex,
    schema: &Schema,
) -> std::result::Result<DailyRecord, String> {
    let field = |i: usize, name: &str| row.get(i).ok_or_else(|| format!("missing field `{name}`"));

    let raw_date = field(cols.date, &schema.date_column)?;
    let date = NaiveDate::parse_from_str(raw_date, &schema.date_format)
        .map_err(|e| format!("unparseable date `{raw_date}`: {e}"))?;
    if let Some((lo, hi)) = schema.years {
        if date.year() < lo || date.year() > hi {
            return Err(format!("date {date} outside study years {lo}-{hi}"));
        }
    }

    let subregion_id = field(cols.subregion, &schema.subregion_column)?.to_string();
    let region_id = match cols.region {
        Some(i) => field(i, "region")?.to_string(),
        None => subregion_id
            .get(..schema.region_prefix_len)
            .ok_or_else(|| {
                format!(
                    "subregion id `{subregion_id}` shorter than region prefix length {}",
                    schema.region_prefix_len
                )
            })?
            .to_string(),
    };
    if region_id.is_empty() {
        return Err("empty region id".into());
    }

    let raw_value = field(cols.value, &schema.value_column)?;
    let value: f64 = raw_value
        .parse()
        .map_err(|_| format!("unparseable value `{raw_value}`"))?;
    if !value.is_finite() || value < 0.0 {
        return Err(format!("value {value} must be finite and non-negative"));
    }

    Ok(DailyRecord {
        date,
        subregion_id,
        region_id,
        value,
    })
}

pub fn read_panel(path: &Path, schema: &Schema) -> Result<ParsedPanel> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    parse_panel(file, schema)
}

/// One region's daily values for one calendar year.
///
/// Absent days hold `NaN` in `values` and `false` in `present`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSeries {
    pub region_id: String,
    pub year: i32,
    pub values: Vec<f64>,
    pub present: Vec<bool>,
}

pub fn is_leap_year(year: i32) -> bool {
    NaiveDate::from_ymd_opt(year, 2, 29).is_some()
}

pub fn days_in_year(year: i32) -> usize {
    if is_leap_year(year) {
        366
    } else {
        365
    }
}

impl RegionSeries {
    /// A series with every day absent.
    pub fn empty(region_id: impl Into<String>, year: i32) -> Self {
        let len = days_in_year(year);
        RegionSeries {
            region_id: region_id.into(),
            year,
            values: vec![f64::NAN; len],
            present: vec![false; len],
        }
    }

    /// A fully present series.
    pub fn from_values(region_id: impl Into<String>, year: i32, values: Vec<f64>) -> Self {
        let present = vec![true; values.len()];
        RegionSeries {
            region_id: region_id.into(),
            year,
            values,
            present,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn present_count(&self) -> usize {
        self.present.iter().filter(|p| **p).count()
    }

    /// True when every slot holds a finite value.
    pub fn is_complete(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Runs of non-finite slots as `(start, len)`.
    pub fn gaps(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, v) in self.values.iter().enumerate() {
            match (v.is_finite(), start) {
                (false, None) => start = Some(i),
                (true, Some(s)) => {
                    out.push((s, i - s));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, self.values.len() - s));
        }
        out
    }
}

/// Averages records over subregions, one series per `(region, year)`.
///
/// Each slot is the arithmetic mean of all subregion values reported for that
/// date. Contributions are summed in a canonical order, so the result does not
/// depend on the input row order.
pub fn aggregate_to_region(records: &[DailyRecord]) -> BTreeMap<(String, i32), RegionSeries> {
    let mut slots: BTreeMap<(&str, i32, u32), Vec<(&str, f64)>> = BTreeMap::new();
    for r in records {
        slots
            .entry((r.region_id.as_str(), r.date.year(), r.date.ordinal0()))
            .or_default()
            .push((r.subregion_id.as_str(), r.value));
    }

    let mut out: BTreeMap<(String, i32), RegionSeries> = BTreeMap::new();
    for ((region, year, day), mut contributions) in slots {
        contributions.sort_by(|a, b| a.0.cmp(b.0).then(a.1.total_cmp(&b.1)));
        let sum: f64 = contributions.iter().map(|c| c.1).sum();
        let series = out
            .entry((region.to_string(), year))
            .or_insert_with(|| RegionSeries::empty(region, year));
        series.values[day as usize] = sum / contributions.len() as f64;
        series.present[day as usize] = true;
    }
    out
}

/// Drops February 29 so that day-of-year indices line up with a common year.
///
/// Non-leap input is returned unchanged.
pub fn normalize_leap_year(series: &RegionSeries) -> RegionSeries {
    if !is_leap_year(series.year) || series.len() != DAYS_PER_YEAR + 1 {
        warn!(
            "region {} year {}: not a 366-day leap-year series, leaving unchanged",
            series.region_id, series.year
        );
        return series.clone();
    }
    let mut out = series.clone();
    out.values.remove(FEB29_INDEX);
    out.present.remove(FEB29_INDEX);
    out
}

/// Fills runs of at most `max_gap` absent days.
///
/// Interior gaps are linearly interpolated between the flanking present
/// values; gaps touching either end of the year take the nearest present
/// value. Longer gaps are an error naming the region and the first such gap.
/// The `present` mask keeps recording which days were actually observed.
pub fn repair_gaps(series: &RegionSeries, max_gap: usize) -> Result<RegionSeries> {
    let gaps = series.gaps();
    if let Some(&(start, len)) = gaps.iter().find(|g| g.1 > max_gap) {
        return Err(Error::UnrepairedGap {
            region: series.region_id.clone(),
            start,
            len,
        });
    }
    let mut out = series.clone();
    let n = out.values.len();
    for (start, len) in gaps {
        let end = start + len;
        let left = start.checked_sub(1).map(|i| series.values[i]);
        let right = (end < n).then(|| series.values[end]);
        for i in start..end {
            out.values[i] = match (left, right) {
                (Some(a), Some(b)) => {
                    let t = (i - start + 1) as f64 / (len + 1) as f64;
                    a + (b - a) * t
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("gap longer than max_gap"),
            };
        }
    }
    Ok(out)
}

/// Region-year series ready for the rolling measure, plus regions set aside.
#[derive(Debug, Clone, Default)]
pub struct PreparedSeries {
    pub series: BTreeMap<(String, i32), RegionSeries>,
    /// region-year label → reason.
    pub dropped: BTreeMap<String, String>,
}

/// Aggregates, leap-normalizes and repairs every region-year in `records`.
pub fn prepare_series(records: &[DailyRecord], max_gap: usize) -> PreparedSeries {
    let mut prepared = PreparedSeries::default();
    for ((region, year), series) in aggregate_to_region(records) {
        let series = if series.len() == DAYS_PER_YEAR + 1 {
            normalize_leap_year(&series)
        } else {
            series
        };
        match repair_gaps(&series, max_gap) {
            Ok(s) => {
                prepared.series.insert((region, year), s);
            }
            Err(e) => {
                warn!("dropping {region}/{year}: {e}");
                prepared.dropped.insert(format!("{region}/{year}"), e.to_string());
            }
        }
    }
    prepared
}

/// Descriptive statistics of one region's contributing observations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionCoverage {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoverageReport {
    pub regions: BTreeMap<String, RegionCoverage>,
    pub dropped: BTreeMap<String, String>,
}

impl CoverageReport {
    pub fn regions_seen(&self) -> usize {
        self.regions.len()
    }

    pub fn kept(&self) -> impl Iterator<Item = &str> {
        self.regions
            .keys()
            .filter(|r| !self.dropped.contains_key(r.as_str()))
            .map(String::as_str)
    }

    /// Marks a seen region as dropped. Unknown regions are ignored.
    pub fn mark_dropped(&mut self, region: &str, reason: impl Into<String>) {
        if self.regions.contains_key(region) {
            self.dropped.insert(region.to_string(), reason.into());
        } else {
            debug!("ignoring drop of unseen region {region}");
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e| Error::Csv {
            path: "<coverage>".into(),
            source: e,
        };
        w.write_record(["region_id", "count", "mean", "min", "max", "std", "status", "reason"])
            .map_err(csv_err)?;
        for (region, c) in &self.regions {
            let reason = self.dropped.get(region);
            w.write_record([
                region.clone(),
                c.count.to_string(),
                c.mean.to_string(),
                c.min.to_string(),
                c.max.to_string(),
                c.std.to_string(),
                if reason.is_some() { "dropped" } else { "kept" }.to_string(),
                reason.cloned().unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("writing coverage", e))
    }
}

pub fn coverage_report(records: &[DailyRecord]) -> CoverageReport {
    let mut by_region: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_region.entry(&r.region_id).or_default().push(r.value);
    }
    let regions = by_region
        .into_iter()
        .map(|(region, values)| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let (min, max) = values
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            (
                region.to_string(),
                RegionCoverage {
                    count: values.len(),
                    mean,
                    min,
                    max,
                    std: var.sqrt(),
                },
            )
        })
        .collect();
    CoverageReport {
        regions,
        dropped: BTreeMap::new(),
    }
}

fn bundle_paths(dir: &Path, stem: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join(format!("{stem}_index.csv")),
        dir.join(format!("{stem}.csv")),
    )
}

fn format_value(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        "NA".to_string()
    }
}

/// Writes series as an index file plus a CSV matrix (`NA` for absent days).
pub fn write_series_bundle<'a>(
    dir: &Path,
    stem: &str,
    series: impl IntoIterator<Item = &'a RegionSeries>,
) -> Result<()> {
    let (index_path, matrix_path) = bundle_paths(dir, stem);
    let open = |p: &Path| {
        File::create(p)
            .map(BufWriter::new)
            .map_err(|e| Error::io(format!("creating {}", p.display()), e))
    };
    let mut index = open(&index_path)?;
    let mut matrix = open(&matrix_path)?;
    let io_err = |e| Error::io("writing series bundle", e);

    writeln!(index, "region_id,year,row").map_err(io_err)?;
    for (row, s) in series.into_iter().enumerate() {
        writeln!(index, "{},{},{}", s.region_id, s.year, row).map_err(io_err)?;
        let values: Vec<String> = s.values.iter().map(|v| format_value(*v)).collect();
        writeln!(matrix, "{},{},{}", s.region_id, s.year, values.join(",")).map_err(io_err)?;
    }
    index.flush().map_err(io_err)?;
    matrix.flush().map_err(io_err)
}

pub fn read_series_bundle(dir: &Path, stem: &str) -> Result<Vec<RegionSeries>> {
    let (index_path, matrix_path) = bundle_paths(dir, stem);
    let read = |p: &Path| {
        std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))
    };
    let index = read(&index_path)?;
    let matrix = read(&matrix_path)?;

    let rows: Vec<&str> = matrix.lines().filter(|l| !l.is_empty()).collect();
    let mut out = Vec::with_capacity(rows.len());
    for line in index.lines().skip(1).filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let [region, year, row] = fields[..] else {
            return Err(Error::InvalidData(format!("bad index line `{line}`")));
        };
        let year: i32 = year
            .parse()
            .map_err(|_| Error::InvalidData(format!("bad year in index line `{line}`")))?;
        let row: usize = row
            .parse()
            .map_err(|_| Error::InvalidData(format!("bad row in index line `{line}`")))?;
        let data = rows
            .get(row)
            .ok_or_else(|| Error::InvalidData(format!("index row {row} beyond matrix")))?;
        let mut cells = data.split(',');
        if cells.next() != Some(region) || cells.next() != Some(&year.to_string()[..]) {
            return Err(Error::InvalidData(format!(
                "matrix row {row} does not match index entry {region}/{year}"
            )));
        }
        let mut values = Vec::new();
        let mut present = Vec::new();
        for cell in cells {
            if cell == "NA" {
                values.push(f64::NAN);
                present.push(false);
            } else {
                values.push(cell.parse().map_err(|_| {
                    Error::InvalidData(format!("bad value `{cell}` in row {row}"))
                })?);
                present.push(true);
            }
        }
        out.push(RegionSeries {
            region_id: region.to_string(),
            year,
            values,
            present,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(date: &str, sub: &str, value: f64) -> DailyRecord {
        DailyRecord {
            date: NaiveDate::parse_from_str(date, "%Y-%m-%d").unwrap(),
            subregion_id: sub.into(),
            region_id: sub[..5].into(),
            value,
        }
    }

    #[test]
    fn parses_single_row_with_default_schema() {
        let src = "date,subregion_id,value\n2020-03-15,510594801011,73.0\n";
        let panel = parse_panel(src.as_bytes(), &Schema::default()).unwrap();
        assert!(panel.row_errors.is_empty());
        assert_eq!(panel.records, vec![record("2020-03-15", "510594801011", 73.0)]);
        assert_eq!(panel.records[0].region_id, "51059");
    }

    #[test]
    fn header_only_is_empty() {
        let panel = parse_panel("date,subregion_id,value\n".as_bytes(), &Schema::default()).unwrap();
        assert!(panel.records.is_empty());
        assert!(panel.row_errors.is_empty());
    }

    #[test]
    fn malformed_dates_are_counted_with_line_numbers() {
        let mut src = String::from("date,subregion_id,value\n");
        for day in 1..=10 {
            if day == 3 || day == 8 {
                src.push_str(&format!("2020/01/{day:02},510594801011,5\n"));
            } else {
                src.push_str(&format!("2020-01-{day:02},510594801011,5\n"));
            }
        }
        let panel = parse_panel(src.as_bytes(), &Schema::default()).unwrap();
        assert_eq!(panel.records.len(), 8);
        assert_eq!(panel.row_errors.len(), 2);
        // header is line 1, so day d sits on line d + 1
        assert_eq!(panel.row_errors[0].line, 4);
        assert_eq!(panel.row_errors[1].line, 9);
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = parse_panel("day,subregion_id,value\n".as_bytes(), &Schema::default()).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(c) if c == "date"));
    }

    #[test]
    fn rejects_negative_and_out_of_range_years() {
        let schema = Schema {
            years: Some((2019, 2020)),
            ..Schema::default()
        };
        let src = "date,subregion_id,value\n2020-01-01,510594801011,-1\n2018-01-01,510594801011,2\n2019-01-01,510594801011,2\n";
        let panel = parse_panel(src.as_bytes(), &schema).unwrap();
        assert_eq!(panel.records.len(), 1);
        assert_eq!(panel.row_errors.len(), 2);
    }

    #[test]
    fn custom_delimiter_and_date_format() {
        let schema = Schema {
            delimiter: b';',
            date_format: "%d/%m/%Y".into(),
            region_column: Some("county".into()),
            ..Schema::default()
        };
        let src = "date;subregion_id;county;value\n15/03/2020;abc;X1;4.5\n";
        let panel = parse_panel(src.as_bytes(), &schema).unwrap();
        assert_eq!(panel.records[0].region_id, "X1");
        assert_eq!(panel.records[0].date, NaiveDate::from_ymd_opt(2020, 3, 15).unwrap());
    }

    #[test]
    fn aggregate_means_over_subregions() {
        let recs = vec![
            record("2019-01-01", "510590000001", 60.0),
            record("2019-01-01", "510590000002", 80.0),
            record("2019-01-02", "510590000001", 42.0),
        ];
        let agg = aggregate_to_region(&recs);
        let s = &agg[&("51059".to_string(), 2019)];
        assert_eq!(s.len(), 365);
        assert_eq!(s.values[0], 70.0);
        assert_eq!(s.values[1], 42.0);
        assert!(!s.present[2] && s.values[2].is_nan());
        assert_eq!(s.present_count(), 2);
    }

    #[test]
    fn aggregate_matches_brute_force_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let subs = ["510590000001", "510590000002", "510590000003"];
        let mut recs = Vec::new();
        let mut table = [[None; 5]; 3];
        for (s, sub) in subs.iter().enumerate() {
            for d in 0..5 {
                // roughly one in five cells missing
                if rng.random_bool(0.8) {
                    let v = rng.random_range(0.0..200.0);
                    table[s][d] = Some(v);
                    recs.push(record(&format!("2019-02-{:02}", d + 1), sub, v));
                }
            }
        }
        let agg = aggregate_to_region(&recs);
        let series = &agg[&("51059".to_string(), 2019)];
        for d in 0..5 {
            let vals: Vec<f64> = (0..3).filter_map(|s| table[s][d]).collect();
            let slot = 31 + d;
            if vals.is_empty() {
                assert!(!series.present[slot]);
            } else {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!((series.values[slot] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn leap_day_removed_and_later_days_shift() {
        let values: Vec<f64> = (0..366).map(|i| i as f64).collect();
        let s = RegionSeries::from_values("00001", 2020, values);
        let n = normalize_leap_year(&s);
        assert_eq!(n.len(), 365);
        assert!(!n.values.contains(&59.0));
        assert_eq!(n.values[59], 60.0);
        assert_eq!(n.values[58], 58.0);
        // March 1 sits where it does in 2019
        let mar1_2019 = NaiveDate::from_ymd_opt(2019, 3, 1).unwrap().ordinal0() as usize;
        assert_eq!(n.values[mar1_2019], 60.0);
        assert_eq!(n.values[364], 365.0);
    }

    #[test]
    fn leap_normalization_is_noop_for_common_year() {
        let s = RegionSeries::from_values("00001", 2019, vec![3.0; 365]);
        assert_eq!(normalize_leap_year(&s), s);
        let c = RegionSeries::from_values("00001", 2020, vec![3.0; 366]);
        assert_eq!(normalize_leap_year(&c).values, vec![3.0; 365]);
    }

    #[test]
    fn repair_interpolates_short_gaps() {
        let mut s = RegionSeries::from_values("00001", 2019, (0..365).map(|i| i as f64).collect());
        for i in [10, 11, 12, 0, 364] {
            s.values[i] = f64::NAN;
            s.present[i] = false;
        }
        let r = repair_gaps(&s, 3).unwrap();
        assert_eq!(&r.values[9..14], &[9.0, 10.0, 11.0, 12.0, 13.0]);
        assert_eq!(r.values[0], 1.0);
        assert_eq!(r.values[364], 363.0);
        assert!(!r.present[11]);
    }

    #[test]
    fn repair_rejects_long_gaps() {
        let mut s = RegionSeries::from_values("00001", 2019, vec![1.0; 365]);
        for i in 100..104 {
            s.values[i] = f64::NAN;
        }
        match repair_gaps(&s, 3) {
            Err(Error::UnrepairedGap { region, start, len }) => {
                assert_eq!((region.as_str(), start, len), ("00001", 100, 4));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coverage_population_std() {
        let recs = vec![
            record("2019-01-01", "510590000001", 8.0),
            record("2019-01-02", "510590000001", 12.0),
        ];
        let rep = coverage_report(&recs);
        let c = rep.regions["51059"];
        assert_eq!((c.count, c.mean, c.std, c.min, c.max), (2, 10.0, 2.0, 8.0, 12.0));
        assert!(coverage_report(&[]).regions.is_empty());
    }

    #[test]
    fn coverage_matches_oracle_on_twenty_regions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut recs = Vec::new();
        let mut by_region: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in 0..20 {
            let sub = format!("{:05}0000001", 10000 + r);
            for d in 1..=rng.random_range(1..28) {
                let v = rng.random_range(0.0..500.0);
                recs.push(record(&format!("2019-01-{d:02}"), &sub, v));
                by_region.entry(sub[..5].to_string()).or_default().push(v);
            }
        }
        let mut rep = coverage_report(&recs);
        for (region, vals) in &by_region {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((rep.regions[region].mean - mean).abs() < 1e-9);
        }
        rep.mark_dropped("10003", "gap");
        rep.mark_dropped("99999", "unseen");
        assert_eq!(rep.kept().count() + rep.dropped.len(), rep.regions_seen());
    }

    #[test]
    fn bundle_round_trip_keeps_absent_slots() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = RegionSeries::from_values("00001", 2019, (0..365).map(|i| i as f64 * 0.1).collect());
        a.values[4] = f64::NAN;
        a.present[4] = false;
        let b = RegionSeries::from_values("00002", 2020, vec![1.5; 365]);
        write_series_bundle(dir.path(), "series", [&a, &b]).unwrap();
        let back = read_series_bundle(dir.path(), "series").unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1], b);
        assert!(!back[0].present[4]);
        for i in (0..365).filter(|i| *i != 4) {
            assert_eq!(back[0].values[i].to_bits(), a.values[i].to_bits());
        }
    }

    proptest! {
        #[test]
        fn aggregation_is_permutation_invariant(
            values in proptest::collection::vec(0.0f64..1000.0, 1..40),
            seed in any::<u64>(),
        ) {
            let recs: Vec<DailyRecord> = values
                .iter()
                .enumerate()
                .map(|(i, v)| record(
                    &format!("2019-01-{:02}", i % 7 + 1),
                    &format!("{:05}{:07}", i % 3, i % 5),
                    *v,
                ))
                .collect();
            let mut shuffled = recs.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::SliceRandom::shuffle(&mut shuffled[..], &mut rng);
            let a = aggregate_to_region(&recs);
            let b = aggregate_to_region(&shuffled);
            prop_assert_eq!(a.len(), b.len());
            for (k, s) in &a {
                let t = &b[k];
                prop_assert_eq!(&s.present, &t.present);
                prop_assert_eq!(s.present_count() + s.present.iter().filter(|p| !**p).count(), s.len());
                for (x, y) in s.values.iter().zip(&t.values) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }

        #[test]
        fn leap_normalization_preserves_other_days_bitwise(
            values in proptest::collection::vec(-1e6f64..1e6, 366),
        ) {
            let s = RegionSeries::from_values("x", 2020, values.clone());
            let n = normalize_leap_year(&s);
            for (i, v) in n.values.iter().enumerate() {
                let src = if i < FEB29_INDEX { i } else { i + 1 };
                prop_assert_eq!(v.to_bits(), values[src].to_bits());
            }
        }

        #[test]
        fn single_subregion_aggregation_is_identity(values in proptest::collection::vec(0.0f64..500.0, 365)) {
            let start = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap();
            let recs: Vec<DailyRecord> = values
                .iter()
                .enumerate()
                .map(|(i, v)| DailyRecord {
                    date: start + chrono::Days::new(i as u64),
                    subregion_id: "123450000001".into(),
                    region_id: "12345".into(),
                    value: *v,
                })
                .collect();
            let agg = aggregate_to_region(&recs);
            let s = &agg[&("12345".to_string(), 2019)];
            prop_assert_eq!(&s.values, &values);
        }
    }
}
