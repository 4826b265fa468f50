//! Fully learned dynamics `dq/dt = s * NN(t, Tb, SoC, Ib, Q, V, cycles)`.
//!
//! Only the cumulative loss `q` is integrated. The other inputs are
//! exogenous signals read from a [`FeatureTrace`] by linear interpolation;
//! the capacity channel can instead follow the integrated loss.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{mlp_layers, DropoutMask, Matrix, MlpModel, Mode};
use crate::ode::sensitivity::ScalarDynamics;
use crate::ode::SolverConfig;
use crate::physics::{daily_grid, BatteryParams, DegradationState, Trajectory};
use crate::scalar::Scalar;
use crate::scaler::Standardizer;
use crate::train::{rollout, IntoGradient, TrajectoryModel};
use crate::ude::Checkpoint;

pub const NODE_HIDDEN: [usize; 3] = [32, 64, 32];
/// Network inputs: `t` followed by the exogenous channels.
pub const NODE_INPUTS: usize = 7;
/// Exogenous channels in trace order.
pub const CHANNELS: [&str; 6] = ["temperature_k", "soc_percent", "current_a", "capacity_ah", "voltage_v", "cycle_count"];
const CAPACITY: usize = 3;

/// Exogenous signals sampled at increasing times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct FeatureTrace<T: Scalar> {
    pub times: Vec<T>,
    /// One row per time in [`CHANNELS`] order.
    pub values: Vec<[T; 6]>,
}

impl<T: Scalar> FeatureTrace<T> {
    pub fn new(times: Vec<T>, values: Vec<[T; 6]>) -> Result<Self> {
        let trace = Self { times, values };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.values.len() {
            return Err(Error::Dimension { expected: self.times.len(), got: self.values.len() });
        }
        if self.times.is_empty() {
            return Err(Error::Data("feature trace is empty".into()));
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Data("feature trace times must be strictly increasing".into()));
        }
        if self.times.iter().chain(self.values.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature trace".into()));
        }
        Ok(())
    }

    /// Driving profile of the physics parameters over `[t_start, t_end]`:
    /// constant operating point at nominal capacity, one cycle per day.
    pub fn synthetic(params: &BatteryParams<T>, t_start: T, t_end: T) -> Result<Self> {
        let row = |t: T| {
            [
                params.temperature_k,
                params.soc_setpoint,
                params.discharge_current(),
                params.nominal_capacity_ah,
                params.nominal_voltage_v,
                t,
            ]
        };
        Self::new(vec![t_start, t_end], vec![row(t_start), row(t_end)])
    }

    /// Trace from measured records with times shifted by `offset` days and a
    /// fixed state-of-charge setpoint.
    pub fn from_series(series: &crate::data::ExperimentalSeries, offset: f64, soc_percent: f64) -> Result<Self> {
        let times = series.records.iter().map(|r| T::of(r.time_days + offset)).collect();
        let values = series
            .records
            .iter()
            .map(|r| {
                [r.temperature_k, soc_percent, r.current_a, r.capacity_ah, r.voltage_v, r.cycle_count].map(T::of)
            })
            .collect();
        Self::new(times, values)
    }

    pub fn span(&self) -> (T, T) {
        (self.times[0], *self.times.last().unwrap())
    }

    /// Channels at `t`, linearly interpolated.
    pub fn at(&self, t: T) -> Result<[T; 6]> {
        let (lo, hi) = self.span();
        if !(t >= lo && t <= hi) {
            return Err(Error::Domain(format!("feature trace covers [{lo}, {hi}], not t = {t}")));
        }
        let i = self.times.partition_point(|&s| s <= t);
        if i == self.times.len() {
            return Ok(self.values[i - 1]);
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        let (a, b) = (&self.values[i - 1], &self.values[i]);
        Ok(std::array::from_fn(|c| a[c] + w * (b[c] - a[c])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub batch_norm: bool,
    pub dropout: f64,
    /// Multiplies the network output; sets the initial rate scale.
    pub output_scale: f64,
    /// Feed the capacity implied by the integrated loss instead of the
    /// traced capacity.
    pub capacity_feedback: bool,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self { batch_norm: true, dropout: 0.15, output_scale: 0.1, capacity_feedback: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct NodeModel<T: Scalar> {
    pub net: MlpModel<T>,
    /// Standardization of the seven network inputs.
    pub feature_scaler: Standardizer<T>,
    pub trace: FeatureTrace<T>,
    pub nominal_capacity_ah: T,
    pub output_scale: T,
    pub config: NodeConfig,
    #[serde(skip)]
    mask: Option<DropoutMask<T>>,
}

impl<T: Scalar> NodeModel<T> {
    /// Builds a model whose scaler is fitted to the inputs seen at the
    /// training `times` with observed losses `q_total`.
    pub fn new(
        trace: FeatureTrace<T>,
        nominal_capacity_ah: T,
        times: &[T],
        q_total: &[T],
        config: NodeConfig,
        seed: u64,
    ) -> Result<Self> {
        trace.validate()?;
        if !(0.0..0.5).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 0.5), got {}", config.dropout)));
        }
        if !(config.output_scale > 0.0 && config.output_scale.is_finite()) {
            return Err(Error::Config("output scale must be > 0".into()));
        }
        if !(nominal_capacity_ah > T::zero()) {
            return Err(Error::Domain("nominal capacity must be > 0".into()));
        }
        if times.len() != q_total.len() || times.is_empty() {
            return Err(Error::Dimension { expected: times.len(), got: q_total.len() });
        }
        let mut net =
            MlpModel::init(&mlp_layers(NODE_INPUTS, &NODE_HIDDEN, 1, config.batch_norm, config.dropout), seed)?;
        // Start from the zero-rate model, as for the hybrid networks.
        net.zero_output_layer();
        let mut model = Self {
            net,
            feature_scaler: Standardizer::identity(NODE_INPUTS),
            trace,
            nominal_capacity_ah,
            output_scale: T::of(config.output_scale),
            config,
            mask: None,
        };
        let rows = times.iter().zip(q_total).map(|(&t, &q)| model.raw_input(t, q).map(|r| r.to_vec())).collect::<Result<Vec<_>>>()?;
        model.feature_scaler = Standardizer::fit(&rows)?;
        Ok(model)
    }

    /// Same network with a different exogenous trace, e.g. one that covers
    /// a forecast horizon.
    pub fn with_trace(mut self, trace: FeatureTrace<T>) -> Result<Self> {
        trace.validate()?;
        self.trace = trace;
        Ok(self)
    }

    fn capacity_from_loss(&self, q: T) -> T {
        self.nominal_capacity_ah * (T::of(100.0) - q) / T::of(100.0)
    }

    fn raw_input(&self, t: T, q: T) -> Result<[T; NODE_INPUTS]> {
        let mut f = self.trace.at(t)?;
        if self.config.capacity_feedback {
            f[CAPACITY] = self.capacity_from_loss(q);
        }
        Ok([t, f[0], f[1], f[2], f[3], f[4], f[5]])
    }

    fn input(&self, t: T, q: T) -> Result<[T; NODE_INPUTS]> {
        let raw = self.raw_input(t, q)?;
        let mut x = [T::zero(); NODE_INPUTS];
        self.feature_scaler.apply_row(&raw, &mut x);
        Ok(x)
    }

    fn mode(&self) -> (Mode, Option<&DropoutMask<T>>) {
        match &self.mask {
            Some(m) => (Mode::Frozen, Some(m)),
            None => (Mode::Infer, None),
        }
    }

    /// Right-hand side `d q_total / dt`.
    pub fn rate(&self, t: T, q_total: T) -> Result<T> {
        let x = Matrix::row_vector(&self.input(t, q_total)?);
        let (mode, mask) = self.mode();
        Ok(self.net.forward(&x, mode, mask)?.output.get(0, 0) * self.output_scale)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint { format: NODE_FORMAT.into(), version: 1, model: self })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint<Self> = serde_json::from_str(s)?;
        if ck.format != NODE_FORMAT || ck.version != 1 {
            return Err(Error::Checkpoint(format!("expected {NODE_FORMAT} v1, found {} v{}", ck.format, ck.version)));
        }
        let m = ck.model;
        m.net.validate_loaded()?;
        m.feature_scaler.validate()?;
        m.trace.validate()?;
        if m.net.in_dim() != NODE_INPUTS || m.net.out_dim() != 1 || m.feature_scaler.dim() != NODE_INPUTS {
            return Err(Error::Checkpoint("neural ODE network has the wrong shape".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

const NODE_FORMAT: &str = "soh-node";

pub struct NodeDynamics<'a, T: Scalar> {
    model: &'a NodeModel<T>,
    grad: Vec<T>,
}

impl<T: Scalar> ScalarDynamics<T> for NodeDynamics<'_, T> {
    fn rate(&mut self, t: T, y: T) -> Result<T> {
        self.model.rate(t, y)
    }

    fn rate_vjp(&mut self, t: T, y: T, upstream: T) -> Result<T> {
        let m = self.model;
        let x = Matrix::row_vector(&m.input(t, y)?);
        let (mode, mask) = m.mode();
        let fwd = m.net.forward(&x, mode, mask)?;
        let up = Matrix::row_vector(&[upstream * m.output_scale]);
        let dx = m.net.backward_into(&fwd, &up, &mut self.grad)?;
        if !m.config.capacity_feedback {
            return Ok(T::zero());
        }
        // q -> Q = Qnom (100 - q) / 100 -> standardized input 4.
        let dq = -m.nominal_capacity_ah / T::of(100.0) / m.feature_scaler.scale[CAPACITY + 1];
        Ok(dx.get(0, CAPACITY + 1) * dq)
    }
}

impl<T: Scalar> IntoGradient<T> for NodeDynamics<'_, T> {
    fn into_gradient(self) -> Result<Vec<T>> {
        Ok(self.grad)
    }
}

impl<T: Scalar> TrajectoryModel<T> for NodeModel<T> {
    type Dynamics<'a> = NodeDynamics<'a, T>;

    fn dynamics(&self) -> NodeDynamics<'_, T> {
        NodeDynamics { model: self, grad: vec![T::zero(); self.net.param_count()] }
    }

    fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn params(&self) -> Vec<T> {
        self.net.params().to_vec()
    }

    fn set_params(&mut self, params: &[T]) -> Result<()> {
        self.net.set_params(params)
    }

    fn resample_masks(&mut self, rng: &mut ChaCha8Rng) {
        if self.net.has_dropout() {
            self.mask = Some(self.net.sample_mask(1, rng));
        }
    }

    fn clear_masks(&mut self) {
        self.mask = None;
    }

    fn update_running_stats(&mut self, times: &[T], states: &[T]) -> Result<()> {
        if !self.net.has_batch_norm() {
            return Ok(());
        }
        let rows = times.iter().zip(states).map(|(&t, &q)| self.input(t, q).map(|r| r.to_vec())).collect::<Result<Vec<_>>>()?;
        self.net.update_running_stats(&Matrix::from_rows(&rows)?)
    }
}

/// Integrates the trained model from `(t_start, q_start)` to `horizon_end`
/// with daily samples. The model's trace must cover the horizon.
pub fn forecast_node<T: Scalar>(
    model: &NodeModel<T>,
    start: (T, T),
    horizon_end: T,
    solver: &SolverConfig<T>,
) -> Result<Trajectory<T>> {
    let (t0, q0) = start;
    if horizon_end < t0 {
        return Err(Error::Domain(format!("forecast horizon {horizon_end} precedes its start {t0}")));
    }
    let (lo, hi) = model.trace.span();
    if t0 < lo || horizon_end > hi {
        return Err(Error::Domain(format!("feature trace covers [{lo}, {hi}], forecast needs [{t0}, {horizon_end}]")));
    }
    let times = if horizon_end == t0 { vec![t0] } else { daily_grid(t0, horizon_end) };
    let states = rollout(model, (t0, q0), &times, solver)?;
    Ok(Trajectory {
        times,
        states: states.into_iter().map(|q| DegradationState::from_loss_nominal(q, model.nominal_capacity_ah)).collect(),
    })
}
