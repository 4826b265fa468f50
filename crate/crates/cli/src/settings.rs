//! Run settings: command-line flags over a TOML manifest over defaults.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Deserialize;
use soh_core::optim::OptimizerKind;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ude,
    Node,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Ude => "ude",
            ModelKind::Node => "node",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Rk4,
    Dopri5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Random,
    /// Regress the hybrid networks onto their closed-form targets first.
    Oracle,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Csv(PathBuf),
}

impl DataSource {
    fn parse(s: &str) -> Self {
        if s == "synthetic" {
            DataSource::Synthetic
        } else {
            DataSource::Csv(PathBuf::from(s))
        }
    }
}

/// Flags shared by every command. Each one overrides the manifest key of
/// the same name (dashes become underscores).
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML manifest with default values for any of these flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub model: Option<ModelKind>,
    /// `synthetic` or a path to a cycling or series CSV.
    #[arg(long, global = true)]
    pub data: Option<String>,
    /// Adam, RMSProp, AdaGrad, AdaBelief, Nesterov or Sophia.
    #[arg(long, global = true)]
    pub optimizer: Option<String>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    /// Last day of the simulated or training window.
    #[arg(long, global = true)]
    pub tspan_end_days: Option<f64>,
    /// Number of sweep cells to run, drawn deterministically from the grid.
    #[arg(long, global = true)]
    pub budget: Option<usize>,
    /// Multiplies every sweep iteration budget (for desk-scale sweeps).
    #[arg(long, global = true)]
    pub iteration_scale: Option<f64>,
    /// Comma-separated sweep timespan ends in days.
    #[arg(long, global = true, value_delimiter = ',')]
    pub timespans: Option<Vec<f64>>,
    /// Standard deviation of synthetic measurement noise (percent).
    #[arg(long, global = true)]
    pub noise_sigma: Option<f64>,
    /// Batch norm and dropout in the hybrid networks.
    #[arg(long, global = true)]
    pub regularized: Option<bool>,
    /// Dropout rate of the neural ODE network.
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub solver: Option<SolverKind>,
    /// Fixed RK4 step in days.
    #[arg(long, global = true)]
    pub step: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub init: Option<InitKind>,
    /// Iterations of the regression used by `--init oracle`.
    #[arg(long, global = true)]
    pub oracle_iterations: Option<usize>,
    /// Last forecast day.
    #[arg(long, global = true)]
    pub horizon_end_days: Option<f64>,
    /// Model checkpoint; defaults to `<out>/model.json`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Chronological training share of measured data.
    #[arg(long, global = true)]
    pub train_fraction: Option<f64>,
    /// Nominal capacity of a measured cell (Ah).
    #[arg(long, global = true)]
    pub nominal_capacity_ah: Option<f64>,
    /// State-of-charge setpoint fed to the neural ODE for measured data.
    #[arg(long, global = true)]
    pub soc_percent: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    out: Option<PathBuf>,
    seed: Option<u64>,
    model: Option<ModelKind>,
    data: Option<String>,
    optimizer: Option<String>,
    lr: Option<f64>,
    iterations: Option<usize>,
    tspan_end_days: Option<f64>,
    budget: Option<usize>,
    iteration_scale: Option<f64>,
    timespans: Option<Vec<f64>>,
    noise_sigma: Option<f64>,
    regularized: Option<bool>,
    dropout: Option<f64>,
    solver: Option<SolverKind>,
    step: Option<f64>,
    init: Option<InitKind>,
    oracle_iterations: Option<usize>,
    horizon_end_days: Option<f64>,
    checkpoint: Option<PathBuf>,
    train_fraction: Option<f64>,
    nominal_capacity_ah: Option<f64>,
    soc_percent: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub out: PathBuf,
    pub seed: u64,
    pub model: ModelKind,
    pub data: DataSource,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub iterations: usize,
    /// `None` means the command's own default.
    pub tspan_end_days: Option<f64>,
    pub budget: Option<usize>,
    pub iteration_scale: f64,
    pub timespans: Vec<f64>,
    pub noise_sigma: f64,
    pub regularized: bool,
    pub dropout: f64,
    pub solver: SolverKind,
    pub step: f64,
    pub init: InitKind,
    pub oracle_iterations: usize,
    pub horizon_end_days: Option<f64>,
    pub checkpoint: Option<PathBuf>,
    pub train_fraction: f64,
    pub nominal_capacity_ah: f64,
    pub soc_percent: f64,
}

impl Settings {
    pub fn resolve(flags: &Flags) -> CliResult<Self> {
        let m = match &flags.config {
            Some(path) => load_manifest(path)?,
            None => Manifest::default(),
        };
        macro_rules! pick {
            ($field:ident, $default:expr) => {
                flags.$field.clone().or(m.$field.clone()).unwrap_or_else(|| $default)
            };
        }
        let optimizer: OptimizerKind = pick!(optimizer, "adam".into()).parse().map_err(|e: soh_core::Error| CliError::Usage(e.to_string()))?;
        let s = Settings {
            out: pick!(out, PathBuf::from("out")),
            seed: pick!(seed, 42),
            model: pick!(model, ModelKind::Ude),
            data: DataSource::parse(&pick!(data, "synthetic".into())),
            optimizer,
            lr: pick!(lr, 0.01),
            iterations: pick!(iterations, 2000),
            tspan_end_days: flags.tspan_end_days.or(m.tspan_end_days),
            budget: flags.budget.or(m.budget),
            iteration_scale: pick!(iteration_scale, 1.0),
            timespans: pick!(timespans, (1..=10).map(|y| 365.0 * y as f64).collect()),
            noise_sigma: pick!(noise_sigma, 0.20),
            regularized: pick!(regularized, false),
            dropout: pick!(dropout, soh_core::neuralode::NodeConfig::default().dropout),
            solver: pick!(solver, SolverKind::Rk4),
            step: pick!(step, 1.0),
            init: pick!(init, InitKind::Random),
            oracle_iterations: pick!(oracle_iterations, 3000),
            horizon_end_days: flags.horizon_end_days.or(m.horizon_end_days),
            checkpoint: flags.checkpoint.clone().or(m.checkpoint),
            train_fraction: pick!(train_fraction, 0.8),
            nominal_capacity_ah: pick!(nominal_capacity_ah, soh_core::data::FIXTURE_NOMINAL_CAPACITY_AH),
            soc_percent: pick!(soc_percent, 90.0),
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> CliResult<()> {
        let usage = |msg: String| Err(CliError::Usage(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return usage(format!("--lr must be > 0, got {}", self.lr));
        }
        if let Some(t) = self.tspan_end_days {
            if !(t > 1.0 && t.is_finite()) {
                return usage(format!("--tspan-end-days must be > 1, got {t}"));
            }
        }
        if self.timespans.is_empty() || self.timespans.iter().any(|t| !(*t > 1.0 && t.is_finite())) {
            return usage("--timespans needs one or more ends > 1".into());
        }
        if !(self.iteration_scale > 0.0 && self.iteration_scale.is_finite()) {
            return usage("--iteration-scale must be > 0".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return usage("--noise-sigma must be >= 0".into());
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return usage("--step must be > 0".into());
        }
        if !(self.nominal_capacity_ah > 0.0) {
            return usage("--nominal-capacity-ah must be > 0".into());
        }
        if self.budget == Some(0) {
            return usage("--budget must be >= 1".into());
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("model.json"))
    }
}

fn load_manifest(path: &Path) -> CliResult<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid manifest {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_manifest_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "lr = 0.1\niterations = 7\nmodel = \"node\"\n").unwrap();
        let flags = Flags { config: Some(path), lr: Some(0.001), ..Flags::default() };
        let s = Settings::resolve(&flags).unwrap();
        assert_eq!(s.lr, 0.001);
        assert_eq!(s.iterations, 7);
        assert_eq!(s.model, ModelKind::Node);
        assert_eq!(s.seed, 42);
    }

    #[test]
    fn unknown_manifest_keys_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "learning_rate = 0.1\n").unwrap();
        let e = Settings::resolve(&Flags { config: Some(path), ..Flags::default() }).unwrap_err();
        assert_eq!(e.exit_code(), 1);
    }
}
