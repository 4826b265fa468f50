//! Model construction, training and checkpoint loading for either family.

use std::path::Path;

use soh_core::neuralode::{forecast_node, NodeConfig, NodeModel};
use soh_core::ode::SolverConfig;
use soh_core::optim::OptimizerConfig;
use soh_core::physics::Trajectory;
use soh_core::train::{rollout, train, TrainConfig, TrainData, TrainRun};
use soh_core::ude::{forecast_ude, UdeConfig, UdeModel};

use crate::dataset::Dataset;
use crate::error::{CliError, CliResult};
use crate::settings::{InitKind, ModelKind, Settings, SolverKind};

#[derive(Debug, Clone)]
pub enum AnyModel {
    Ude(UdeModel<f64>),
    Node(NodeModel<f64>),
}

pub struct Trained {
    pub run: TrainRun<f64>,
    pub model: AnyModel,
    pub best: AnyModel,
}

pub fn solver(settings: &Settings) -> SolverConfig<f64> {
    match settings.solver {
        SolverKind::Rk4 => SolverConfig::rk4(settings.step),
        SolverKind::Dopri5 => SolverConfig::dopri5(1e-6, 1e-8),
    }
}

pub fn build(settings: &Settings, kind: ModelKind, data: &Dataset, seed: u64) -> CliResult<AnyModel> {
    let train = &data.train;
    match kind {
        ModelKind::Ude => {
            let cfg = UdeConfig { regularized: settings.regularized, ..UdeConfig::default() };
            let mut m = UdeModel::new(data.physics, &train.times, &train.targets, cfg, seed)?;
            if let Some((temp, current)) = data.operating_point {
                m = m.with_operating_point(temp, current, &train.targets)?;
            }
            if settings.init == InitKind::Oracle {
                let hi = train.targets.iter().fold(0.0_f64, |a, &q| a.max(q));
                let span = (train.times[0], data.train_end());
                m.fit_to_physics(span, (0.0, 1.2 * hi + 1.0), OptimizerConfig::adam(0.01), settings.oracle_iterations)?;
            }
            Ok(AnyModel::Ude(m))
        }
        ModelKind::Node => {
            if settings.init == InitKind::Oracle {
                return Err(CliError::Usage("--init oracle applies to the hybrid model only".into()));
            }
            let cfg = NodeConfig { dropout: settings.dropout, ..NodeConfig::default() };
            let m = NodeModel::new(data.trace.clone(), data.physics.nominal_capacity_ah, &train.times, &train.targets, cfg, seed)?;
            Ok(AnyModel::Node(m))
        }
    }
}

pub fn train_config(settings: &Settings, data: &TrainData<f64>, iterations: usize, seed: u64) -> TrainConfig<f64> {
    let span = (data.times[0], *data.times.last().unwrap());
    let mut cfg = TrainConfig::new(span, OptimizerConfig::new(settings.optimizer, settings.lr), iterations, seed);
    cfg.solver = solver(settings);
    cfg
}

pub fn fit(model: AnyModel, data: &TrainData<f64>, cfg: &TrainConfig<f64>) -> CliResult<Trained> {
    Ok(match model {
        AnyModel::Ude(m) => {
            let o = train(m, "ude", data, cfg)?;
            Trained { run: o.run, model: AnyModel::Ude(o.model), best: AnyModel::Ude(o.best) }
        }
        AnyModel::Node(m) => {
            let o = train(m, "node", data, cfg)?;
            Trained { run: o.run, model: AnyModel::Node(o.model), best: AnyModel::Node(o.best) }
        }
    })
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Ude(_) => ModelKind::Ude,
            AnyModel::Node(_) => ModelKind::Node,
        }
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        match self {
            AnyModel::Ude(m) => m.save(path)?,
            AnyModel::Node(m) => m.save(path)?,
        }
        Ok(())
    }

    /// Loads a checkpoint of either family, telling them apart by the
    /// format tag.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some("soh-ude") => Ok(AnyModel::Ude(UdeModel::from_json(&text)?)),
            Some("soh-node") => Ok(AnyModel::Node(NodeModel::from_json(&text)?)),
            other => Err(CliError::Data(format!("{}: unknown checkpoint format {other:?}", path.display()))),
        }
    }

    /// Points a neural ODE at the exogenous trace of `data`.
    pub fn adapt_to(self, data: &Dataset) -> CliResult<Self> {
        Ok(match self {
            AnyModel::Node(m) => AnyModel::Node(m.with_trace(data.trace.clone())?),
            other => other,
        })
    }

    /// Deterministic states at `times` integrated from `start`.
    pub fn rollout(&self, start: (f64, f64), times: &[f64], solver: &SolverConfig<f64>) -> CliResult<Vec<f64>> {
        Ok(match self {
            AnyModel::Ude(m) => rollout(m, start, times, solver)?,
            AnyModel::Node(m) => rollout(m, start, times, solver)?,
        })
    }

    pub fn forecast(&self, start: (f64, f64), horizon_end: f64, solver: &SolverConfig<f64>) -> CliResult<Trajectory<f64>> {
        Ok(match self {
            AnyModel::Ude(m) => forecast_ude(m, start, horizon_end, solver)?,
            AnyModel::Node(m) => forecast_node(m, start, horizon_end, solver)?,
        })
    }
}
