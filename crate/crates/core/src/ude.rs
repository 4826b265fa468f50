//! Hybrid model: known calendar kinetics with a learned time factor plus a
//! learned cycle term,
//!
//! ```text
//! dq/dt = f(SoC)/2 * exp(-Ea / (R Tb)) * s1 * NN1(t) + s2 * NN2(Tb, Ib, Q)
//! ```
//!
//! where `Q` is the capacity implied by the current loss `q`. Both networks
//! see standardized inputs. The output scales `s1`, `s2` put the networks'
//! natural O(1) outputs on the scale of their physical targets (`t^-1/2` and
//! a cycle rate of order 1e-4 %/day).

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{mlp_layers, DropoutMask, Matrix, MlpModel, Mode, RegressionFit};
use crate::ode::sensitivity::ScalarDynamics;
use crate::ode::SolverConfig;
use crate::optim::OptimizerConfig;
use crate::physics::{daily_grid, BatteryParams, DegradationState, Trajectory};
use crate::scalar::Scalar;
use crate::scaler::Standardizer;
use crate::train::{rollout, IntoGradient, TrajectoryModel};

pub const NN1_HIDDEN: [usize; 3] = [10, 5, 5];
pub const NN2_HIDDEN: [usize; 3] = [10, 5, 5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UdeConfig {
    /// Batch norm and dropout in the hidden layers.
    pub regularized: bool,
    pub dropout: f64,
    pub nn1_scale: f64,
    pub nn2_scale: f64,
}

impl Default for UdeConfig {
    fn default() -> Self {
        Self { regularized: false, dropout: 0.10, nn1_scale: 1.0, nn2_scale: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct UdeModel<T: Scalar> {
    pub nn1: MlpModel<T>,
    pub nn2: MlpModel<T>,
    pub physics: BatteryParams<T>,
    /// Operating point fed to NN2.
    pub temperature_k: T,
    pub current_a: T,
    /// Standardization of `ln t`.
    pub time_scaler: Standardizer<T>,
    /// Standardization of `(Tb, Ib, Q)`; see [`condition_scaler`].
    pub cond_scaler: Standardizer<T>,
    pub nn1_scale: T,
    pub nn2_scale: T,
    pub config: UdeConfig,
    #[serde(skip)]
    masks: Option<(DropoutMask<T>, DropoutMask<T>)>,
}

impl<T: Scalar> UdeModel<T> {
    /// Builds a randomly initialized model whose scalers are fitted to the
    /// training window `times` and the losses `q_total` observed there.
    pub fn new(physics: BatteryParams<T>, times: &[T], q_total: &[T], config: UdeConfig, seed: u64) -> Result<Self> {
        physics.validate()?;
        if times.iter().any(|&t| t < T::one()) {
            return Err(Error::Domain("hybrid model times must be >= 1 day".into()));
        }
        let (bn, p) = if config.regularized { (true, config.dropout) } else { (false, 0.0) };
        // Zero output layers: training starts from the zero-rate model, which
        // pushes outputs up rather than driving hidden ReLUs dead.
        let mut nn1 = MlpModel::init(&mlp_layers(1, &NN1_HIDDEN, 1, bn, p), seed)?;
        let mut nn2 = MlpModel::init(&mlp_layers(3, &NN2_HIDDEN, 1, bn, p), seed.wrapping_add(1))?;
        nn1.zero_output_layer();
        nn2.zero_output_layer();
        let temperature_k = physics.temperature_k;
        let current_a = physics.discharge_current();
        let log_times: Vec<T> = times.iter().map(|t| t.ln()).collect();
        let time_scaler = Standardizer::fit_1d(&log_times)?;
        let rows: Vec<Vec<T>> =
            q_total.iter().map(|&q| vec![temperature_k, current_a, physics.capacity_from_loss(q)]).collect();
        let cond_scaler = condition_scaler(&physics, &rows)?;
        Ok(Self {
            nn1,
            nn2,
            physics,
            temperature_k,
            current_a,
            time_scaler,
            cond_scaler,
            nn1_scale: T::of(config.nn1_scale),
            nn2_scale: T::of(config.nn2_scale),
            config,
            masks: None,
        })
    }

    /// Replaces the operating point seen by NN2 (for data not generated by
    /// the default driving profile). Refits the condition scaler.
    pub fn with_operating_point(mut self, temperature_k: T, current_a: T, q_total: &[T]) -> Result<Self> {
        self.temperature_k = temperature_k;
        self.current_a = current_a;
        let rows: Vec<Vec<T>> =
            q_total.iter().map(|&q| vec![temperature_k, current_a, self.physics.capacity_from_loss(q)]).collect();
        self.cond_scaler = condition_scaler(&self.physics, &rows)?;
        Ok(self)
    }

    /// NN1 sees standardized `ln t`: power-law kinetics are smooth in log
    /// time, while a linear day count crowds the fast early decay into a
    /// sliver of the input range.
    fn time_input(&self, t: T) -> T {
        self.time_scaler.apply(0, t.ln())
    }

    fn cond_input(&self, q: T) -> [T; 3] {
        let s = &self.cond_scaler;
        let cap = self.physics.capacity_from_loss(q);
        [s.apply(0, self.temperature_k), s.apply(1, self.current_a), s.apply(2, cap)]
    }

    fn nn1_mode(&self) -> (Mode, Option<&DropoutMask<T>>) {
        match &self.masks {
            Some((m, _)) => (Mode::Frozen, Some(m)),
            None => (Mode::Infer, None),
        }
    }

    fn nn2_mode(&self) -> (Mode, Option<&DropoutMask<T>>) {
        match &self.masks {
            Some((_, m)) => (Mode::Frozen, Some(m)),
            None => (Mode::Infer, None),
        }
    }

    /// Learned time factor `s1 * NN1(t)`, the stand-in for `t^-1/2`.
    pub fn time_factor(&self, t: T) -> Result<T> {
        Ok(self.time_factors(&[t])?[0])
    }

    pub fn time_factors(&self, ts: &[T]) -> Result<Vec<T>> {
        let x = Matrix::column(&ts.iter().map(|&t| self.time_input(t)).collect::<Vec<_>>());
        let (mode, mask) = self.nn1_mode();
        let y = self.nn1.forward(&x, mode, mask)?.output;
        Ok(y.into_vec().into_iter().map(|v| v * self.nn1_scale).collect())
    }

    /// Learned cycle rate `s2 * NN2(Tb, Ib, Q(q))` in %/day.
    pub fn cycle_term(&self, q_total: T) -> Result<T> {
        let x = Matrix::row_vector(&self.cond_input(q_total));
        let (mode, mask) = self.nn2_mode();
        Ok(self.nn2.forward(&x, mode, mask)?.output.get(0, 0) * self.nn2_scale)
    }

    /// Right-hand side `d q_total / dt` at day `t >= 1`.
    pub fn rate(&self, t: T, q_total: T) -> Result<T> {
        if t < T::one() {
            return Err(Error::Domain(format!("hybrid rate needs t >= 1 day, got {t}")));
        }
        Ok(self.physics.calendar_coefficient()? * self.time_factor(t)? + self.cycle_term(q_total)?)
    }

    /// Fits NN1 to `t^-1/2` and NN2 to the physical cycle rate by direct
    /// regression over `[t_start, t_end]` and the loss range `q_range`.
    /// Returns the two final relative regression losses.
    pub fn fit_to_physics(&mut self, t_span: (T, T), q_range: (T, T), optimizer: OptimizerConfig<T>, iterations: usize) -> Result<(T, T)> {
        let (t0, t1) = t_span;
        // Half-day points also cover the RK4 midpoint stages.
        let mut ts = Vec::new();
        let mut t = t0;
        while t <= t1 {
            ts.push(t);
            t += T::of(0.5);
        }
        let x1 = Matrix::column(&ts.iter().map(|&t| self.time_input(t)).collect::<Vec<_>>());
        let y1: Vec<T> = ts.iter().map(|&t| T::one() / t.sqrt()).collect();
        let fit1 = RegressionFit { optimizer, iterations, output_scale: self.nn1_scale, relative: true };
        let l1 = crate::nn::fit_regression(&mut self.nn1, &x1, &y1, &fit1)?;

        let n = 200;
        let qs: Vec<T> = (0..=n)
            .map(|i| q_range.0 + (q_range.1 - q_range.0) * T::from_usize(i).unwrap() / T::from_usize(n).unwrap())
            .collect();
        let rows: Vec<Vec<T>> = qs.iter().map(|&q| self.cond_input(q).to_vec()).collect();
        let x2 = Matrix::from_rows(&rows)?;
        let y2: Vec<T> = qs
            .iter()
            .map(|&q| self.physics.cycle_rate_at(self.temperature_k, self.current_a, self.physics.capacity_from_loss(q)))
            .collect();
        let fit2 = RegressionFit { optimizer, iterations, output_scale: self.nn2_scale, relative: true };
        let l2 = crate::nn::fit_regression(&mut self.nn2, &x2, &y2, &fit2)?;
        Ok((l1, l2))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint { format: UDE_FORMAT.into(), version: 1, model: self })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint<Self> = serde_json::from_str(s)?;
        if ck.format != UDE_FORMAT || ck.version != 1 {
            return Err(Error::Checkpoint(format!("expected {UDE_FORMAT} v1, found {} v{}", ck.format, ck.version)));
        }
        let m = ck.model;
        m.nn1.validate_loaded()?;
        m.nn2.validate_loaded()?;
        m.time_scaler.validate()?;
        m.cond_scaler.validate()?;
        m.physics.validate()?;
        if m.nn1.in_dim() != 1 || m.nn2.in_dim() != 3 || m.nn1.out_dim() != 1 || m.nn2.out_dim() != 1 {
            return Err(Error::Checkpoint("hybrid model networks have the wrong shape".into()));
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

const UDE_FORMAT: &str = "soh-ude";

/// Fraction of nominal capacity lost at end of life.
const END_OF_LIFE_FADE: f64 = 0.2;

/// Temperature and current are standardized over the training window. The
/// capacity channel instead uses the fixed map `(Q / Qnom - 1) / 0.2`
/// (0 when new, -1 at end of life). A window-fitted scale would stretch the
/// few percent of fade seen in training to unit variance, and NN2 could then
/// mimic any function of time through `Q(q(t))`, taking over the calendar
/// term that belongs to NN1.
fn condition_scaler<T: Scalar>(physics: &BatteryParams<T>, rows: &[Vec<T>]) -> Result<Standardizer<T>> {
    let mut s = Standardizer::fit(rows)?;
    s.mean[2] = physics.nominal_capacity_ah;
    s.scale[2] = physics.nominal_capacity_ah * T::of(END_OF_LIFE_FADE);
    Ok(s)
}

#[derive(Serialize, Deserialize)]
pub(crate) struct Checkpoint<M> {
    pub format: String,
    pub version: u32,
    pub model: M,
}

/// Right-hand side with gradient accumulation.
///
/// NN1 depends on time alone, so its values are memoized per distinct time
/// and its parameter gradient is formed in one batched backward pass.
pub struct UdeDynamics<'a, T: Scalar> {
    model: &'a UdeModel<T>,
    coeff: T,
    nn1_index: HashMap<u64, usize>,
    nn1_t: Vec<T>,
    nn1_val: Vec<T>,
    nn1_bar: Vec<T>,
    grad2: Vec<T>,
}

impl<'a, T: Scalar> UdeDynamics<'a, T> {
    fn new(model: &'a UdeModel<T>) -> Result<Self> {
        Ok(Self {
            model,
            coeff: model.physics.calendar_coefficient()?,
            nn1_index: HashMap::new(),
            nn1_t: Vec::new(),
            nn1_val: Vec::new(),
            nn1_bar: Vec::new(),
            grad2: vec![T::zero(); model.nn2.param_count()],
        })
    }

    fn nn1_slot(&mut self, t: T) -> Result<usize> {
        if t < T::one() {
            return Err(Error::Domain(format!("hybrid rate needs t >= 1 day, got {t}")));
        }
        let key = t.as_f64().to_bits();
        if let Some(&i) = self.nn1_index.get(&key) {
            return Ok(i);
        }
        let v = self.model.time_factor(t)?;
        let i = self.nn1_t.len();
        self.nn1_index.insert(key, i);
        self.nn1_t.push(t);
        self.nn1_val.push(v);
        self.nn1_bar.push(T::zero());
        Ok(i)
    }
}

impl<T: Scalar> ScalarDynamics<T> for UdeDynamics<'_, T> {
    fn rate(&mut self, t: T, y: T) -> Result<T> {
        let i = self.nn1_slot(t)?;
        Ok(self.coeff * self.nn1_val[i] + self.model.cycle_term(y)?)
    }

    fn rate_vjp(&mut self, t: T, y: T, upstream: T) -> Result<T> {
        let i = self.nn1_slot(t)?;
        self.nn1_bar[i] += upstream * self.coeff;

        let m = self.model;
        let x = Matrix::row_vector(&m.cond_input(y));
        let (mode, mask) = m.nn2_mode();
        let fwd = m.nn2.forward(&x, mode, mask)?;
        let up = Matrix::row_vector(&[upstream * m.nn2_scale]);
        let dx = m.nn2.backward_into(&fwd, &up, &mut self.grad2)?;
        // q -> Q = Qnom (100 - q) / 100 -> standardized input.
        let dq = -m.physics.nominal_capacity_ah / T::of(100.0) / m.cond_scaler.scale[2];
        Ok(dx.get(0, 2) * dq)
    }
}

impl<T: Scalar> IntoGradient<T> for UdeDynamics<'_, T> {
    fn into_gradient(self) -> Result<Vec<T>> {
        let m = self.model;
        let mut grad = vec![T::zero(); m.nn1.param_count()];
        if !self.nn1_t.is_empty() {
            let x = Matrix::column(&self.nn1_t.iter().map(|&t| m.time_input(t)).collect::<Vec<_>>());
            let (mode, mask) = m.nn1_mode();
            let fwd = m.nn1.forward(&x, mode, mask)?;
            let up = Matrix::column(&self.nn1_bar.iter().map(|&b| b * m.nn1_scale).collect::<Vec<_>>());
            m.nn1.backward_into(&fwd, &up, &mut grad)?;
        }
        grad.extend(self.grad2);
        Ok(grad)
    }
}

impl<T: Scalar> TrajectoryModel<T> for UdeModel<T> {
    type Dynamics<'a> = UdeDynamics<'a, T>;

    fn dynamics(&self) -> UdeDynamics<'_, T> {
        // Parameters were validated on construction, so the coefficient exists.
        UdeDynamics::new(self).expect("valid physics parameters")
    }

    fn param_count(&self) -> usize {
        self.nn1.param_count() + self.nn2.param_count()
    }

    fn params(&self) -> Vec<T> {
        let mut p = self.nn1.params().to_vec();
        p.extend_from_slice(self.nn2.params());
        p
    }

    fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension { expected: self.param_count(), got: params.len() });
        }
        let (a, b) = params.split_at(self.nn1.param_count());
        self.nn1.set_params(a)?;
        self.nn2.set_params(b)
    }

    fn resample_masks(&mut self, rng: &mut ChaCha8Rng) {
        if self.nn1.has_dropout() || self.nn2.has_dropout() {
            self.masks = Some((self.nn1.sample_mask(1, rng), self.nn2.sample_mask(1, rng)));
        }
    }

    fn clear_masks(&mut self) {
        self.masks = None;
    }

    fn update_running_stats(&mut self, times: &[T], states: &[T]) -> Result<()> {
        if !self.nn1.has_batch_norm() && !self.nn2.has_batch_norm() {
            return Ok(());
        }
        let x1 = Matrix::column(&times.iter().map(|&t| self.time_input(t)).collect::<Vec<_>>());
        let rows: Vec<Vec<T>> = states.iter().map(|&q| self.cond_input(q).to_vec()).collect();
        let x2 = Matrix::from_rows(&rows)?;
        self.nn1.update_running_stats(&x1)?;
        self.nn2.update_running_stats(&x2)
    }
}

/// One row of the learned-versus-analytic time factor comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Nn1Row<T> {
    pub t: T,
    pub learned: T,
    pub analytic: T,
    pub rel_error: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nn1Comparison<T> {
    pub rows: Vec<Nn1Row<T>>,
    /// Median relative error over the summary window.
    pub median_rel_error: T,
    pub window: (T, T),
}

/// Compares `s1 * NN1(t)` against `t^-1/2` on `grid` and summarizes the
/// median relative error over `window`.
pub fn compare_nn1<T: Scalar>(model: &UdeModel<T>, grid: &[T], window: (T, T)) -> Result<Nn1Comparison<T>> {
    if grid.iter().any(|&t| t < T::one()) {
        return Err(Error::Domain("comparison grid must start at t >= 1".into()));
    }
    let mut m = model.clone();
    m.clear_masks();
    let learned = m.time_factors(grid)?;
    let rows: Vec<Nn1Row<T>> = grid
        .iter()
        .zip(learned)
        .map(|(&t, l)| {
            let a = T::one() / t.sqrt();
            Nn1Row { t, learned: l, analytic: a, rel_error: ((l - a) / a).abs() }
        })
        .collect();
    let mut errs: Vec<T> = rows.iter().filter(|r| r.t >= window.0 && r.t <= window.1).map(|r| r.rel_error).collect();
    Ok(Nn1Comparison { median_rel_error: median(&mut errs).unwrap_or(T::nan()), rows, window })
}

pub(crate) fn median<T: Scalar>(v: &mut [T]) -> Option<T> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / T::of(2.0) })
}

/// Integrates the trained model from `(t_start, q_start)` to `horizon_end`
/// with daily samples. A zero-length horizon returns just the start state.
pub fn forecast_ude<T: Scalar>(
    model: &UdeModel<T>,
    start: (T, T),
    horizon_end: T,
    solver: &SolverConfig<T>,
) -> Result<Trajectory<T>> {
    let (t0, q0) = start;
    if horizon_end < t0 {
        return Err(Error::Domain(format!("forecast horizon {horizon_end} precedes its start {t0}")));
    }
    let times = if horizon_end == t0 { vec![t0] } else { daily_grid(t0, horizon_end) };
    let states = rollout(model, (t0, q0), &times, solver)?;
    Ok(Trajectory {
        times,
        states: states.into_iter().map(|q| DegradationState::from_loss(q, &model.physics)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{reference_solver, simulate};
    use crate::train::{evaluate, TrainData};

    fn ground_truth(end: f64) -> TrainData<f64> {
        let p = BatteryParams::default();
        let traj = simulate(&p, (1.0, end), &reference_solver()).unwrap();
        TrainData::new(traj.times.clone(), traj.states.iter().map(|s| s.q_total).collect()).unwrap()
    }

    fn model_for(data: &TrainData<f64>, cfg: UdeConfig) -> UdeModel<f64> {
        UdeModel::new(BatteryParams::default(), &data.times, &data.targets, cfg, 7).unwrap()
    }

    #[test]
    fn zeroed_networks_give_zero_rate() {
        let data = ground_truth(30.0);
        let mut m = model_for(&data, UdeConfig::default());
        let zeros = vec![0.0; m.param_count()];
        m.set_params(&zeros).unwrap();
        assert_eq!(m.rate(5.0, 1.0).unwrap(), 0.0);
        assert!(m.rate(0.5, 0.0).is_err());
    }

    #[test]
    fn time_factor_scales_with_output_scale() {
        let data = ground_truth(30.0);
        let mut m = model_for(&data, UdeConfig::default());
        let a = m.time_factor(10.0).unwrap();
        m.nn1_scale = 2.0;
        assert!((m.time_factor(10.0).unwrap() - 2.0 * a).abs() < 1e-15);
    }

    fn fd_check(cfg: UdeConfig) {
        let data = ground_truth(30.0);
        let mut m = model_for(&data, cfg);
        // Start from a nontrivial but modest rate.
        m.fit_to_physics((1.0, 30.0), (0.0, 3.0), OptimizerConfig::adam(0.01), 200).unwrap();
        let targets: Vec<f64> = data.targets.iter().map(|q| q * 1.1).collect();
        let data = TrainData::new(data.times.clone(), targets).unwrap();
        let solver = SolverConfig::rk4(1.0);
        let g = evaluate(&m, &data, &solver, true).unwrap().gradient.unwrap();
        let p0 = m.params();
        let scale = g.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        let mut central = |i: usize, eps: f64| {
            let mut p = p0.clone();
            p[i] += eps;
            m.set_params(&p).unwrap();
            let lp = evaluate(&m, &data, &solver, false).unwrap().mse;
            p[i] -= 2.0 * eps;
            m.set_params(&p).unwrap();
            let lm = evaluate(&m, &data, &solver, false).unwrap().mse;
            (lp - lm) / (2.0 * eps)
        };
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3 * scale);
        for i in 0..p0.len() {
            let mut fd = central(i, 1e-4);
            if rel(g[i], fd) >= 1e-3 {
                // A ReLU kink inside the stencil; a narrower one avoids it.
                fd = central(i, 1e-6);
            }
            assert!(rel(g[i], fd) < 1e-3, "param {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn trajectory_gradient_matches_finite_differences() {
        fd_check(UdeConfig::default());
    }

    #[test]
    fn trajectory_gradient_with_frozen_batch_norm() {
        fd_check(UdeConfig { regularized: true, dropout: 0.0, ..UdeConfig::default() });
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let data = ground_truth(30.0);
        let m = model_for(&data, UdeConfig { regularized: true, ..UdeConfig::default() });
        let back = UdeModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn forecast_of_zero_length_is_the_start_state() {
        let data = ground_truth(30.0);
        let m = model_for(&data, UdeConfig::default());
        let f = forecast_ude(&m, (30.0, 2.5), 30.0, &SolverConfig::rk4(1.0)).unwrap();
        assert_eq!(f.times, vec![30.0]);
        assert_eq!(f.states[0].q_total, 2.5);
    }
}
