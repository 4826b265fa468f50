//! Training and test series for a command, from synthetic ground truth or a
//! measured CSV.

use std::path::Path;

use soh_core::data::{
    generate_synthetic, load_cycling_csv, preprocess, read_series_csv, split, split_index, ExperimentalSeries,
    PreprocessConfig, SplitSpec, SyntheticConfig, CYCLING_HEADER, SERIES_HEADER,
};
use soh_core::neuralode::FeatureTrace;
use soh_core::physics::BatteryParams;
use soh_core::train::TrainData;

use crate::error::{CliError, CliResult};
use crate::settings::{DataSource, Settings};

/// Default training window end for synthetic data (two years).
pub const DEFAULT_TRAIN_END: f64 = 730.0;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub source: &'static str,
    pub train: TrainData<f64>,
    pub test: Option<TrainData<f64>>,
    /// Physics parameters of the cell; measured cells override the nominal
    /// capacity and temperature.
    pub physics: BatteryParams<f64>,
    /// Mean measured `(temperature K, |current| A)` over the training part.
    pub operating_point: Option<(f64, f64)>,
    pub trace: FeatureTrace<f64>,
    /// Added to measured times so the series starts on day 1.
    pub offset: f64,
    /// Noise-free losses at the training and test times (synthetic only).
    pub clean: Option<TrainData<f64>>,
}

impl Dataset {
    pub fn train_end(&self) -> f64 {
        *self.train.times.last().unwrap()
    }

    pub fn last_time(&self) -> f64 {
        self.test.as_ref().map_or(self.train_end(), |t| *t.times.last().unwrap())
    }

    /// Training and test observations as one series.
    pub fn all(&self) -> CliResult<TrainData<f64>> {
        let mut times = self.train.times.clone();
        let mut targets = self.train.targets.clone();
        if let Some(test) = &self.test {
            times.extend(&test.times);
            targets.extend(&test.targets);
        }
        Ok(TrainData::new(times, targets)?)
    }
}

/// Builds the dataset named by `settings.data`. Synthetic data covers
/// `[1, train_end]` for training and `(train_end, horizon]` for testing.
pub fn load(settings: &Settings, horizon: Option<f64>) -> CliResult<Dataset> {
    match &settings.data {
        DataSource::Synthetic => synthetic(settings, horizon),
        DataSource::Csv(path) => measured(settings, path),
    }
}

fn synthetic(settings: &Settings, horizon: Option<f64>) -> CliResult<Dataset> {
    let train_end = settings.tspan_end_days.unwrap_or(DEFAULT_TRAIN_END);
    let end = horizon.map_or(train_end, |h| h.max(train_end));
    let physics = BatteryParams::default();
    let cfg = SyntheticConfig { noise_sigma: settings.noise_sigma, ..SyntheticConfig::new(end, settings.seed) };
    let data = generate_synthetic(&physics, &cfg)?;
    let part = |v: &[f64], test: bool| -> Vec<f64> {
        data.times.iter().zip(v).filter(|(t, _)| (**t > train_end) == test).map(|(_, y)| *y).collect()
    };
    let times_train = part(&data.times, false);
    let times_test = part(&data.times, true);
    let train = TrainData::new(times_train.clone(), part(&data.noisy, false))?;
    let test = if times_test.is_empty() { None } else { Some(TrainData::new(times_test, part(&data.noisy, true))?) };
    Ok(Dataset {
        source: "synthetic",
        train,
        test,
        trace: FeatureTrace::synthetic(&physics, 1.0, end)?,
        physics,
        operating_point: None,
        offset: 0.0,
        clean: Some(TrainData::new(data.times.clone(), data.clean.clone())?),
    })
}

fn header_of(path: &Path) -> CliResult<Vec<String>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(r.headers()?.iter().map(|h| h.trim().to_string()).collect())
}

fn measured(settings: &Settings, path: &Path) -> CliResult<Dataset> {
    let header = header_of(path)?;
    let spec = SplitSpec { train_fraction: settings.train_fraction };
    let nominal = settings.nominal_capacity_ah;
    let mut physics = BatteryParams { nominal_capacity_ah: nominal, ..BatteryParams::default() };

    if header.iter().map(String::as_str).eq(SERIES_HEADER) {
        let rows = read_series_csv(std::fs::File::open(path)?)?;
        if rows.len() < 2 {
            return Err(CliError::Data("series CSV needs at least two rows".into()));
        }
        let offset = 1.0 - rows[0].0;
        let k = split_index(rows.len(), &spec).map_err(|e| CliError::Usage(e.to_string()))?;
        let to_data = |r: &[(f64, f64, f64)]| TrainData::new(r.iter().map(|x| x.0 + offset).collect(), r.iter().map(|x| 100.0 - x.1).collect());
        let train = to_data(&rows[..k])?;
        let test = to_data(&rows[k..])?;
        let end = *test.times.last().unwrap();
        return Ok(Dataset {
            source: "series",
            trace: FeatureTrace::synthetic(&physics, 1.0, end)?,
            train,
            test: Some(test),
            physics,
            operating_point: None,
            offset,
            clean: None,
        });
    }
    let known: Vec<&str> = CYCLING_HEADER.iter().take(5).copied().collect();
    if !known.iter().all(|k| header.iter().any(|h| h == k)) {
        return Err(CliError::Data(format!(
            "{}: expected a cycling CSV ({}) or a series CSV ({})",
            path.display(),
            CYCLING_HEADER.join(","),
            SERIES_HEADER.join(",")
        )));
    }
    let report = load_cycling_csv(path)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let cfg = PreprocessConfig { nominal_capacity_ah: nominal, ..PreprocessConfig::default() };
    let (series, pre) = preprocess(&report.records, &cfg)?;
    eprintln!(
        "preprocess: kept {} of {} records (missing {}, invalid {}, duplicates {}, outliers {})",
        series.len(),
        report.records.len(),
        pre.missing,
        pre.invalid,
        pre.duplicates,
        pre.outliers
    );
    if series.len() < 4 {
        return Err(CliError::Data("too few records survive preprocessing".into()));
    }
    let (train_s, test_s) = split(&series, &spec).map_err(|e| CliError::Usage(e.to_string()))?;
    if train_s.len() < 2 || test_s.is_empty() {
        return Err(CliError::Data("split leaves an empty or single-record side".into()));
    }
    let offset = 1.0 - series.records[0].time_days;
    let (temp, current) = mean_operating_point(&train_s);
    physics.temperature_k = temp;
    Ok(Dataset {
        source: "cycling",
        train: train_s.loss_data(offset)?,
        test: Some(test_s.loss_data(offset)?),
        trace: FeatureTrace::from_series(&series, offset, settings.soc_percent)?,
        physics,
        operating_point: Some((temp, current)),
        offset,
        clean: None,
    })
}

fn mean_operating_point(series: &ExperimentalSeries) -> (f64, f64) {
    let n = series.len() as f64;
    let t = series.records.iter().map(|r| r.temperature_k).sum::<f64>() / n;
    let i = series.records.iter().map(|r| r.current_a.abs()).sum::<f64>() / n;
    (t, i)
}
