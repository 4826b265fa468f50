use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::train::TrainData;

/// Input columns; temperature may instead be given in kelvin as `temperature_k`.
pub const CYCLING_HEADER: [&str; 6] = ["time_days", "cycle_count", "capacity_ah", "voltage_v", "current_a", "temperature_c"];
pub const SERIES_HEADER: [&str; 3] = ["time_days", "soh_percent", "capacity_ah"];

/// Authored synthetic export in the input schema (200 records, no measured data).
pub const SANDIA_SCHEMA_FIXTURE: &str = include_str!("../../fixtures/synthetic_sandia_schema_fixture.csv");

/// Nominal capacity of the cells the fixture imitates.
pub const FIXTURE_NOMINAL_CAPACITY_AH: f64 = 3.0;

/// One parsed row; `None` marks a blank or unparseable field.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CyclingRecord {
    /// 1-based line in the source file.
    pub line: usize,
    pub time_days: Option<f64>,
    pub cycle_count: Option<f64>,
    pub capacity_ah: Option<f64>,
    pub voltage_v: Option<f64>,
    pub current_a: Option<f64>,
    pub temperature_k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadReport {
    pub records: Vec<CyclingRecord>,
    pub warnings: Vec<String>,
}

/// Parses a cycling export. Blank fields are missing values; fields that do
/// not parse as numbers are reported by line and also treated as missing.
pub fn read_cycling_csv<R: Read>(reader: R) -> Result<LoadReport> {
    let mut r = csv::ReaderBuilder::new().flexible(false).trim(csv::Trim::All).from_reader(reader);
    let header = r.headers().map_err(|e| Error::Data(format!("unreadable header: {e}")))?.clone();
    let names: Vec<&str> = header.iter().collect();
    let (temp_col, kelvin) = match (names.iter().position(|&h| h == "temperature_c"), names.iter().position(|&h| h == "temperature_k")) {
        (Some(i), _) => (i, false),
        (None, Some(i)) => (i, true),
        _ => return Err(Error::Data(format!("header lacks a temperature column: {names:?}"))),
    };
    let mut cols = Vec::with_capacity(6);
    for name in &CYCLING_HEADER[..5] {
        let i = names.iter().position(|h| h == name).ok_or_else(|| Error::Data(format!("header lacks column `{name}`")))?;
        cols.push(i);
    }
    cols.push(temp_col);

    let mut out = LoadReport::default();
    for (idx, row) in r.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        let mut v = [None; 6];
        for (slot, &c) in v.iter_mut().zip(&cols) {
            let field = row.get(c).unwrap_or("");
            if field.is_empty() {
                continue;
            }
            match field.parse::<f64>() {
                Ok(x) if x.is_finite() => *slot = Some(x),
                _ => out.warnings.push(format!("line {line}: cannot parse `{field}` in column `{}`", names[c])),
            }
        }
        let temperature_k = if kelvin { v[5] } else { v[5].map(|c| c + 273.15) };
        out.records.push(CyclingRecord {
            line,
            time_days: v[0],
            cycle_count: v[1],
            capacity_ah: v[2],
            voltage_v: v[3],
            current_a: v[4],
            temperature_k,
        });
    }
    if out.records.is_empty() {
        out.warnings.push("no data rows".into());
    }
    Ok(out)
}

pub fn load_cycling_csv(path: impl AsRef<Path>) -> Result<LoadReport> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    read_cycling_csv(file)
}

/// Fully populated record after preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub time_days: f64,
    pub cycle_count: f64,
    pub capacity_ah: f64,
    pub voltage_v: f64,
    pub current_a: f64,
    pub temperature_k: f64,
    pub soh: f64,
}

impl SeriesRecord {
    fn raw(&self, line: usize) -> CyclingRecord {
        CyclingRecord {
            line,
            time_days: Some(self.time_days),
            cycle_count: Some(self.cycle_count),
            capacity_ah: Some(self.capacity_ah),
            voltage_v: Some(self.voltage_v),
            current_a: Some(self.current_a),
            temperature_k: Some(self.temperature_k),
        }
    }
}

/// Cleaned records, strictly increasing in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentalSeries {
    pub records: Vec<SeriesRecord>,
    pub nominal_capacity_ah: f64,
}

impl ExperimentalSeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time_days).collect()
    }

    /// Back to raw records, e.g. to run preprocessing again.
    pub fn to_records(&self) -> Vec<CyclingRecord> {
        self.records.iter().enumerate().map(|(i, r)| r.raw(i + 2)).collect()
    }

    /// Cumulative loss `100 - soh` against time shifted by `offset` days.
    pub fn loss_data<T: Scalar>(&self, offset: f64) -> Result<TrainData<T>> {
        TrainData::new(
            self.records.iter().map(|r| T::of(r.time_days + offset)).collect(),
            self.records.iter().map(|r| T::of(100.0 - r.soh)).collect(),
        )
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(SERIES_HEADER)?;
        for r in &self.records {
            w.write_record([r.time_days, r.soh, r.capacity_ah].map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// `(time_days, soh_percent, capacity_ah)` rows of a series CSV.
pub fn read_series_csv<R: Read>(reader: R) -> Result<Vec<(f64, f64, f64)>> {
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().ne(SERIES_HEADER) {
        return Err(Error::Data(format!("series CSV needs header {}", SERIES_HEADER.join(","))));
    }
    r.records()
        .map(|row| {
            let row = row?;
            let f = |i: usize| row[i].parse::<f64>().map_err(|e| Error::Data(e.to_string()));
            Ok((f(0)?, f(1)?, f(2)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub nominal_capacity_ah: f64,
    /// Capacities above this multiple of nominal are invalid.
    pub max_capacity_factor: f64,
    pub temperature_range_k: (f64, f64),
    /// Rolling-median window (odd).
    pub window: usize,
    pub z_threshold: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            nominal_capacity_ah: FIXTURE_NOMINAL_CAPACITY_AH,
            max_capacity_factor: 1.5,
            temperature_range_k: (200.0, 400.0),
            window: 51,
            z_threshold: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub missing: usize,
    pub invalid: usize,
    pub duplicates: usize,
    pub outliers: usize,
}

impl PreprocessReport {
    pub fn dropped(&self) -> usize {
        self.missing + self.invalid + self.duplicates + self.outliers
    }
}

/// Drops incomplete and physically invalid records, sorts by time, keeps the
/// first of any duplicated timestamp, then removes capacity outliers until
/// none remain, and derives state of health.
pub fn preprocess(records: &[CyclingRecord], cfg: &PreprocessConfig) -> Result<(ExperimentalSeries, PreprocessReport)> {
    if records.is_empty() {
        return Err(Error::EmptySeries);
    }
    if !(cfg.nominal_capacity_ah > 0.0) || cfg.window == 0 || !(cfg.z_threshold > 0.0) {
        return Err(Error::Config("preprocessing needs a positive capacity, window and threshold".into()));
    }
    let mut report = PreprocessReport::default();
    let (t_lo, t_hi) = cfg.temperature_range_k;
    let cap_hi = cfg.max_capacity_factor * cfg.nominal_capacity_ah;
    let mut kept = Vec::with_capacity(records.len());
    for r in records {
        let (Some(t), Some(n), Some(c), Some(v), Some(i), Some(k)) =
            (r.time_days, r.cycle_count, r.capacity_ah, r.voltage_v, r.current_a, r.temperature_k)
        else {
            report.missing += 1;
            continue;
        };
        if !(c > 0.0 && c <= cap_hi) || !(t_lo..=t_hi).contains(&k) || t < 0.0 || n < 0.0 {
            report.invalid += 1;
            continue;
        }
        let soh = 100.0 * c / cfg.nominal_capacity_ah;
        kept.push(SeriesRecord { time_days: t, cycle_count: n, capacity_ah: c, voltage_v: v, current_a: i, temperature_k: k, soh });
    }
    kept.sort_by(|a, b| a.time_days.total_cmp(&b.time_days));
    let before = kept.len();
    kept.dedup_by(|b, a| a.time_days == b.time_days);
    report.duplicates = before - kept.len();

    loop {
        let flags = outlier_flags(&kept, cfg);
        let n_out = flags.iter().filter(|&&f| f).count();
        if n_out == 0 {
            break;
        }
        report.outliers += n_out;
        let mut it = flags.iter();
        kept.retain(|_| !*it.next().unwrap());
    }
    if kept.is_empty() {
        return Err(Error::EmptySeries);
    }
    Ok((ExperimentalSeries { records: kept, nominal_capacity_ah: cfg.nominal_capacity_ah }, report))
}

/// Robust z-score of each capacity against a centered rolling median.
///
/// The window shrinks symmetrically near the ends, so a monotone fade gives
/// zero residual everywhere. On a trending series most residuals are exactly
/// zero, so the noise scale comes from the median absolute deviation of
/// first differences instead (divided by sqrt 2), floored at a millionth of
/// nominal capacity.
fn outlier_flags(records: &[SeriesRecord], cfg: &PreprocessConfig) -> Vec<bool> {
    let n = records.len();
    if n < 3 {
        return vec![false; n];
    }
    let caps: Vec<f64> = records.iter().map(|r| r.capacity_ah).collect();
    let half_max = cfg.window / 2;
    let mut buf = Vec::with_capacity(cfg.window);
    let resid: Vec<f64> = (0..n)
        .map(|i| {
            let half = half_max.min(i).min(n - 1 - i);
            buf.clear();
            buf.extend_from_slice(&caps[i - half..=i + half]);
            caps[i] - median_of(&mut buf)
        })
        .collect();
    let mut diffs: Vec<f64> = caps.windows(2).map(|w| w[1] - w[0]).collect();
    let center = median_of(&mut diffs.clone());
    diffs.iter_mut().for_each(|d| *d = (*d - center).abs());
    let sigma = (1.4826 * median_of(&mut diffs) / std::f64::consts::SQRT_2).max(1e-6 * cfg.nominal_capacity_ah);
    resid.iter().map(|r| (r / sigma).abs() > cfg.z_threshold).collect()
}

fn median_of(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_fraction: 0.8 }
    }
}

/// Number of training records in a chronological split: `floor(n * f)`.
pub fn split_index(n: usize, spec: &SplitSpec) -> Result<usize> {
    let f = spec.train_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {f}")));
    }
    let k = (n as f64 * f).floor() as usize;
    if k == 0 || k == n {
        return Err(Error::Data(format!("split of {n} records at {f} leaves one side empty")));
    }
    Ok(k)
}

/// Chronological split; every training record precedes every test record.
pub fn split(series: &ExperimentalSeries, spec: &SplitSpec) -> Result<(ExperimentalSeries, ExperimentalSeries)> {
    let k = split_index(series.len(), spec)?;
    let part = |r: &[SeriesRecord]| ExperimentalSeries { records: r.to_vec(), nominal_capacity_ah: series.nominal_capacity_ah };
    Ok((part(&series.records[..k]), part(&series.records[k..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<CyclingRecord> {
        read_cycling_csv(SANDIA_SCHEMA_FIXTURE.as_bytes()).unwrap().records
    }

    #[test]
    fn fixture_loads_and_survives_preprocessing() {
        let recs = fixture();
        assert_eq!(recs.len(), 200);
        let (s, rep) = preprocess(&recs, &PreprocessConfig::default()).unwrap();
        assert_eq!(rep.dropped(), 0, "{rep:?}");
        assert_eq!(s.len(), 200);
        for r in &s.records {
            assert!((r.soh - 100.0 * r.capacity_ah / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn celsius_is_converted() {
        let csv = "time_days,cycle_count,capacity_ah,voltage_v,current_a,temperature_c\n1,1,3.0,3.7,1.5,25.0\n";
        let rep = read_cycling_csv(csv.as_bytes()).unwrap();
        assert!((rep.records[0].temperature_k.unwrap() - 298.15).abs() < 1e-12);
    }

    #[test]
    fn kelvin_column_is_accepted() {
        let csv = "time_days,cycle_count,capacity_ah,voltage_v,current_a,temperature_k\n1,1,3.0,3.7,1.5,300\n";
        assert_eq!(read_cycling_csv(csv.as_bytes()).unwrap().records[0].temperature_k, Some(300.0));
    }

    #[test]
    fn empty_body_warns() {
        let rep = read_cycling_csv("time_days,cycle_count,capacity_ah,voltage_v,current_a,temperature_c\n".as_bytes()).unwrap();
        assert!(rep.records.is_empty());
        assert_eq!(rep.warnings.len(), 1);
    }

    #[test]
    fn bad_fields_are_reported_with_line_numbers() {
        let csv = "time_days,cycle_count,capacity_ah,voltage_v,current_a,temperature_c\n1,1,3.0,3.7,1.5,25\n2,2,abc,3.7,,25\n";
        let rep = read_cycling_csv(csv.as_bytes()).unwrap();
        assert_eq!(rep.records[1].capacity_ah, None);
        assert_eq!(rep.records[1].current_a, None);
        assert_eq!(rep.warnings, vec!["line 3: cannot parse `abc` in column `capacity_ah`".to_string()]);
        let (s, r) = preprocess(&rep.records, &PreprocessConfig::default()).unwrap();
        assert_eq!((s.len(), r.missing), (1, 1));
    }

    #[test]
    fn malformed_header_and_ragged_rows_fail() {
        assert!(read_cycling_csv("a,b\n1,2\n".as_bytes()).is_err());
        let ragged = "time_days,cycle_count,capacity_ah,voltage_v,current_a,temperature_c\n1,1,3.0\n";
        assert!(read_cycling_csv(ragged.as_bytes()).is_err());
        assert!(load_cycling_csv("/nonexistent/file.csv").is_err());
    }

    #[test]
    fn tenfold_spike_is_the_only_drop() {
        let mut recs = fixture();
        recs[100].capacity_ah = Some(30.0);
        let (s, rep) = preprocess(&recs, &PreprocessConfig::default()).unwrap();
        assert_eq!(rep.dropped(), 1);
        assert!(!s.records.iter().any(|r| r.time_days == recs[100].time_days.unwrap()));
    }

    #[test]
    fn in_range_spike_is_caught_by_rolling_median() {
        let mut recs = fixture();
        recs[120].capacity_ah = Some(3.3);
        let (_, rep) = preprocess(&recs, &PreprocessConfig::default()).unwrap();
        assert_eq!((rep.outliers, rep.dropped()), (1, 1));
    }

    #[test]
    fn end_of_life_record_is_kept() {
        let mut recs = fixture();
        recs[199].capacity_ah = Some(2.4);
        let (s, _) = preprocess(&recs, &PreprocessConfig::default()).unwrap();
        let last = s.records.last().unwrap();
        assert_eq!(last.capacity_ah, 2.4);
        assert!((last.soh - 80.0).abs() < 1e-9);
    }

    #[test]
    fn duplicates_and_disorder_are_resolved() {
        let mut recs = fixture();
        recs.swap(3, 40);
        recs.push(recs[10]);
        let (s, rep) = preprocess(&recs, &PreprocessConfig::default()).unwrap();
        assert_eq!(rep.duplicates, 1);
        assert!(s.records.windows(2).all(|w| w[0].time_days < w[1].time_days));
    }

    #[test]
    fn everything_dropped_is_an_error() {
        let r = CyclingRecord { line: 2, ..Default::default() };
        assert!(matches!(preprocess(&[r], &PreprocessConfig::default()), Err(Error::EmptySeries)));
    }

    #[test]
    fn split_uses_floor() {
        assert_eq!(split_index(10, &SplitSpec::default()).unwrap(), 8);
        assert_eq!(split_index(57_212, &SplitSpec::default()).unwrap(), 45_769);
        assert!(split_index(10, &SplitSpec { train_fraction: 1.0 }).is_err());
        assert!(split_index(1, &SplitSpec::default()).is_err());
    }

    #[test]
    fn series_csv_round_trips() {
        let (s, _) = preprocess(&fixture(), &PreprocessConfig::default()).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let rows = read_series_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), s.len());
        for (r, (t, soh, cap)) in s.records.iter().zip(rows) {
            assert_eq!((r.time_days, r.soh, r.capacity_ah), (t, soh, cap));
        }
    }
}
