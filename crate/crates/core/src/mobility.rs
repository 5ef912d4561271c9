//! Rolling dwell-time measure and its year-over-year change.

use std::collections::BTreeSet;
use std::io::Write;

use crate::error::{Error, Result};
use crate::ingest::RegionSeries;

/// Default half-width of the centered rolling window (7 days).
pub const DEFAULT_WINDOW_RADIUS: usize = 3;

/// Centered rolling mean of one region-year.
#[derive(Debug, Clone, PartialEq)]
pub struct TsppSeries {
    pub region_id: String,
    pub year: i32,
    pub values: Vec<f64>,
    /// 1-based day of year of `values[0]`.
    pub start_day_of_year: usize,
}

/// Target-year minus reference-year rolling measure.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaSeries {
    pub region_id: String,
    pub values: Vec<f64>,
}

/// Centered `2 * radius + 1` day rolling mean.
///
/// `out[k]` averages `raw[k..=k + 2 * radius]`, i.e. the window centred on
/// 1-based day `k + radius + 1`. A 365-day series with radius 3 yields 359
/// values. Each window is summed directly, without a running total.
pub fn tspp(series: &RegionSeries, radius: usize) -> Result<TsppSeries> {
    if let Some(&(start, len)) = series.gaps().first() {
        return Err(Error::UnrepairedGap {
            region: series.region_id.clone(),
            start,
            len,
        });
    }
    let width = 2 * radius + 1;
    if series.len() < width {
        return Err(Error::LengthMismatch {
            expected: width,
            actual: series.len(),
        });
    }
    let values = series
        .values
        .windows(width)
        .map(|w| w.iter().sum::<f64>() / width as f64)
        .collect();
    Ok(TsppSeries {
        region_id: series.region_id.clone(),
        year: series.year,
        values,
        start_day_of_year: radius + 1,
    })
}

pub fn delta_tspp(target: &TsppSeries, reference: &TsppSeries) -> Result<DeltaSeries> {
    if target.region_id != reference.region_id {
        return Err(Error::RegionMismatch(
            target.region_id.clone(),
            reference.region_id.clone(),
        ));
    }
    if target.values.len() != reference.values.len() {
        return Err(Error::LengthMismatch {
            expected: target.values.len(),
            actual: reference.values.len(),
        });
    }
    Ok(DeltaSeries {
        region_id: target.region_id.clone(),
        values: target
            .values
            .iter()
            .zip(&reference.values)
            .map(|(t, r)| t - r)
            .collect(),
    })
}

/// Unweighted day-wise mean over the selected regions.
///
/// `selection = None` takes every series. Regions are summed in id order.
pub fn aggregate_delta(
    deltas: &[DeltaSeries],
    selection: Option<&BTreeSet<String>>,
    label: &str,
) -> Result<DeltaSeries> {
    let mut chosen: Vec<&DeltaSeries> = deltas
        .iter()
        .filter(|d| selection.is_none_or(|s| s.contains(&d.region_id)))
        .collect();
    if chosen.is_empty() {
        return Err(Error::Empty("no regions selected for aggregation".into()));
    }
    chosen.sort_by(|a, b| a.region_id.cmp(&b.region_id));
    let len = chosen[0].values.len();
    if let Some(bad) = chosen.iter().find(|d| d.values.len() != len) {
        return Err(Error::LengthMismatch {
            expected: len,
            actual: bad.values.len(),
        });
    }
    let count = chosen.len() as f64;
    let values = (0..len)
        .map(|i| chosen.iter().map(|d| d.values[i]).sum::<f64>() / count)
        .collect();
    Ok(DeltaSeries {
        region_id: label.to_string(),
        values,
    })
}

/// Writes one row per region: `region_id,delta_0001,...`.
pub fn write_delta_csv<W: Write>(mut out: W, deltas: &[DeltaSeries]) -> Result<()> {
    let io_err = |e| Error::io("writing delta csv", e);
    let len = deltas.first().map_or(0, |d| d.values.len());
    let header: Vec<String> = std::iter::once("region_id".to_string())
        .chain((1..=len).map(|i| format!("delta_{i:04}")))
        .collect();
    writeln!(out, "{}", header.join(",")).map_err(io_err)?;
    for d in deltas {
        let row: Vec<String> = d.values.iter().map(f64::to_string).collect();
        writeln!(out, "{},{}", d.region_id, row.join(",")).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Writes `region_id,year,day_DDD...`; every series must share length and start.
pub fn write_tspp_csv<W: Write>(mut out: W, series: &[TsppSeries]) -> Result<()> {
    let io_err = |e| Error::io("writing tspp csv", e);
    let (start, len) = series
        .first()
        .map_or((1, 0), |s| (s.start_day_of_year, s.values.len()));
    if let Some(bad) = series
        .iter()
        .find(|s| s.start_day_of_year != start || s.values.len() != len)
    {
        return Err(Error::InvalidData(format!(
            "tspp series {}/{} does not match the first series' days",
            bad.region_id, bad.year
        )));
    }
    let header: Vec<String> = (start..start + len).map(|d| format!("day_{d:03}")).collect();
    writeln!(out, "region_id,year,{}", header.join(",")).map_err(io_err)?;
    for s in series {
        let row: Vec<String> = s.values.iter().map(f64::to_string).collect();
        writeln!(out, "{},{},{}", s.region_id, s.year, row.join(",")).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_tspp_csv(text: &str) -> Result<Vec<TsppSeries>> {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidData("empty tspp file".into()))?;
    let days: Vec<&str> = header.split(',').skip(2).collect();
    let start = match days.first() {
        Some(first) => first
            .strip_prefix("day_")
            .and_then(|d| d.parse().ok())
            .ok_or_else(|| Error::InvalidData(format!("bad tspp header `{header}`")))?,
        None => 1,
    };
    lines
        .map(|line| {
            let mut cells = line.split(',');
            let region_id = cells.next().unwrap_or_default().to_string();
            let year = cells
                .next()
                .and_then(|y| y.parse().ok())
                .ok_or_else(|| Error::InvalidData(format!("bad year for {region_id}")))?;
            let values = cells
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| Error::InvalidData(format!("bad tspp value `{c}` for {region_id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != days.len() {
                return Err(Error::LengthMismatch {
                    expected: days.len(),
                    actual: values.len(),
                });
            }
            Ok(TsppSeries {
                region_id,
                year,
                values,
                start_day_of_year: start,
            })
        })
        .collect()
}

pub fn read_delta_csv(text: &str) -> Result<Vec<DeltaSeries>> {
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidData("empty delta file".into()))?;
    let width = header.split(',').count() - 1;
    lines
        .map(|line| {
            let mut cells = line.split(',');
            let region_id = cells.next().unwrap_or_default().to_string();
            let values = cells
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| Error::InvalidData(format!("bad delta value `{c}` for {region_id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if values.len() != width {
                return Err(Error::LengthMismatch {
                    expected: width,
                    actual: values.len(),
                });
            }
            Ok(DeltaSeries { region_id, values })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tspp_csv_round_trip() {
        let series = vec![
            TsppSeries {
                region_id: "00001".into(),
                year: 2019,
                values: vec![1.5, 2.0, 0.1],
                start_day_of_year: 4,
            },
            TsppSeries {
                region_id: "00001".into(),
                year: 2020,
                values: vec![-1.0, 3.25, 7.0],
                start_day_of_year: 4,
            },
        ];
        let mut buf = Vec::new();
        write_tspp_csv(&mut buf, &series).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("region_id,year,day_004,day_005,day_006\n"));
        assert_eq!(read_tspp_csv(&text).unwrap(), series);
    }
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(values: Vec<f64>) -> RegionSeries {
        RegionSeries::from_values("r1", 2019, values)
    }

    fn random_values(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..365).map(|_| rng.random_range(0.0..300.0)).collect()
    }

    #[test]
    fn constant_series_stays_constant() {
        let t = tspp(&series(vec![42.5; 365]), 3).unwrap();
        assert_eq!(t.values.len(), 359);
        assert!(t.values.iter().all(|v| *v == 42.5));
        assert_eq!(t.start_day_of_year, 4);
    }

    #[test]
    fn arithmetic_progression_gives_middle_element() {
        let t = tspp(&series((1..=365).map(f64::from).collect()), 3).unwrap();
        assert_eq!(t.values[0], 4.0);
        assert_eq!(t.values[358], 362.0);
    }

    #[test]
    fn matches_direct_window_sum() {
        let raw = random_values(1);
        let t = tspp(&series(raw.clone()), 3).unwrap();
        for k in 0..359 {
            let mut s = 0.0;
            for j in 0..7 {
                s += raw[k + j];
            }
            assert!((t.values[k] - s / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_is_reported_with_span() {
        let mut s = series(vec![1.0; 365]);
        s.values[200] = f64::NAN;
        s.values[201] = f64::NAN;
        match tspp(&s, 3) {
            Err(Error::UnrepairedGap { region, start, len }) => {
                assert_eq!((region.as_str(), start, len), ("r1", 200, 2))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn delta_basic_cases() {
        let a = tspp(&series(random_values(2)), 3).unwrap();
        let zero = delta_tspp(&a, &a).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));

        let shifted: Vec<f64> = random_values(2).iter().map(|v| v + 10.0).collect();
        let b = tspp(&series(shifted), 3).unwrap();
        let d = delta_tspp(&b, &a).unwrap();
        assert!(d.values.iter().all(|v| (v - 10.0).abs() < 1e-12));
    }

    #[test]
    fn delta_matches_direct_subtraction() {
        let a = tspp(&series(random_values(3)), 3).unwrap();
        let b = tspp(&series(random_values(4)), 3).unwrap();
        let d = delta_tspp(&a, &b).unwrap();
        for i in 0..359 {
            assert_eq!(d.values[i], a.values[i] - b.values[i]);
        }
    }

    #[test]
    fn delta_rejects_mismatches() {
        let a = tspp(&series(vec![1.0; 365]), 3).unwrap();
        let mut b = a.clone();
        b.region_id = "r2".into();
        assert!(matches!(delta_tspp(&a, &b), Err(Error::RegionMismatch(..))));
        let mut c = a.clone();
        c.values.pop();
        assert!(matches!(delta_tspp(&a, &c), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn aggregate_cases() {
        let a = DeltaSeries {
            region_id: "a".into(),
            values: vec![1.0, -2.0, 3.5],
        };
        let b = DeltaSeries {
            region_id: "b".into(),
            values: vec![-1.0, 2.0, -3.5],
        };
        let one = aggregate_delta(std::slice::from_ref(&a), None, "all").unwrap();
        assert_eq!(one.values, a.values);
        let both = aggregate_delta(&[a.clone(), b.clone()], None, "all").unwrap();
        assert_eq!(both.values, vec![0.0; 3]);
        let none = BTreeSet::new();
        assert!(matches!(aggregate_delta(&[a, b], Some(&none), "x"), Err(Error::Empty(_))));
    }

    #[test]
    fn aggregate_matches_columnwise_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let deltas: Vec<DeltaSeries> = (0..50)
            .map(|r| DeltaSeries {
                region_id: format!("{r:05}"),
                values: (0..359).map(|_| rng.random_range(-50.0..50.0)).collect(),
            })
            .collect();
        let agg = aggregate_delta(&deltas, None, "US").unwrap();
        for i in 0..359 {
            let mean = deltas.iter().map(|d| d.values[i]).sum::<f64>() / 50.0;
            assert!((agg.values[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_csv_round_trip() {
        let d = vec![DeltaSeries {
            region_id: "51059".into(),
            values: vec![0.1, -2.25, 1e-17],
        }];
        let mut buf = Vec::new();
        write_delta_csv(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("region_id,delta_0001,delta_0002,delta_0003\n"));
        assert_eq!(read_delta_csv(&text).unwrap(), d);
    }

    proptest! {
        #[test]
        fn tspp_is_linear(
            x in proptest::collection::vec(-100.0f64..100.0, 365),
            y in proptest::collection::vec(-100.0f64..100.0, 365),
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
        ) {
            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let tc = tspp(&series(combo), 3).unwrap();
            let tx = tspp(&series(x), 3).unwrap();
            let ty = tspp(&series(y), 3).unwrap();
            for i in 0..359 {
                prop_assert!((tc.values[i] - (a * tx.values[i] + b * ty.values[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn tspp_shift_equivariant_and_bounded(
            x in proptest::collection::vec(0.0f64..500.0, 365),
            c in -100.0f64..100.0,
        ) {
            let tx = tspp(&series(x.clone()), 3).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let ts = tspp(&series(shifted), 3).unwrap();
            for k in 0..359 {
                prop_assert!((ts.values[k] - c - tx.values[k]).abs() < 1e-10);
                let w = &x[k..k + 7];
                let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(tx.values[k] >= lo - 1e-12 && tx.values[k] <= hi + 1e-12);
            }
        }

        #[test]
        fn delta_is_antisymmetric(
            x in proptest::collection::vec(0.0f64..500.0, 365),
            y in proptest::collection::vec(0.0f64..500.0, 365),
        ) {
            let tx = tspp(&series(x), 3).unwrap();
            let ty = tspp(&series(y), 3).unwrap();
            let d1 = delta_tspp(&tx, &ty).unwrap();
            let d2 = delta_tspp(&ty, &tx).unwrap();
            for (p, q) in d1.values.iter().zip(&d2.values) {
                prop_assert_eq!(*p, -*q);
            }
            prop_assert!(delta_tspp(&tx, &tx).unwrap().values.iter().all(|v| *v == 0.0));
        }
    }
}
