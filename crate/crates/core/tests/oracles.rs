//! Checks against values computed independently of the library code.

use approx::assert_relative_eq;
use rand_chacha::ChaCha8Rng;
use soh_core::ode::sensitivity::ScalarDynamics;
use soh_core::optim::{step, OptimizerConfig, OptimizerKind, OptimizerState};
use soh_core::physics::{calendar_loss_closed_form, pre_exponential_f, reference_solver, simulate, BatteryParams};
use soh_core::train::{evaluate, train, IntoGradient, TrainConfig, TrainData, TrajectoryModel};
use soh_core::Result;

#[test]
fn default_constants_give_hand_computed_rates() {
    let p = BatteryParams::<f64>::default();
    // 60 km * 180 Wh/km over 2 h at 350.4 V.
    assert_relative_eq!(p.discharge_current(), 10800.0 / 2.0 / 350.4, max_relative = 1e-14);
    assert_relative_eq!(p.arrhenius_factor(), (-24500.0_f64 / (8.314 * 298.0)).exp(), max_relative = 1e-14);
    let f90 = 2.64 * 8100.0 - 409.55 * 90.0 + 22035.0;
    assert_relative_eq!(pre_exponential_f(90.0).unwrap(), f90, max_relative = 1e-14);
    assert_relative_eq!(p.calendar_rate(4.0).unwrap(), f90 / 2.0 * p.arrhenius_factor() / 2.0, max_relative = 1e-14);

    let (tb, i, q) = (298.0_f64, p.discharge_current(), 176.4);
    let quad = (8.61e-6 * tb * tb - 5.13e-3 * tb + 0.763).abs();
    let per_second = quad * ((-6.7e-3 * tb + 2.35) / q * i).exp() * i / (q * 3600.0);
    assert_relative_eq!(p.cycle_rate(q), per_second * 2.0 * 3600.0, max_relative = 1e-13);
}

#[test]
fn pre_exponential_factor_rejects_soc_outside_percent_range() {
    assert!(pre_exponential_f(-0.1_f64).is_err());
    assert!(pre_exponential_f(100.1_f64).is_err());
    assert!(pre_exponential_f(0.0_f64).is_ok() && pre_exponential_f(100.0_f64).is_ok());
}

#[test]
fn simulated_trajectory_obeys_the_total_rate() {
    let p = BatteryParams::<f64>::default();
    let traj = simulate(&p, (1.0, 400.0), &reference_solver()).unwrap();
    for i in (40..traj.len() - 1).step_by(37) {
        let t = traj.times[i];
        let fd = (traj.states[i + 1].q_total - traj.states[i - 1].q_total) / 2.0;
        let rate = p.total_rate(t, traj.states[i].q_total).unwrap();
        assert_relative_eq!(fd, rate, max_relative = 1e-4);
    }
    let last = traj.states.last().unwrap();
    assert_relative_eq!(last.q_cal, calendar_loss_closed_form(&p, 400.0).unwrap(), max_relative = 1e-6);
    assert_relative_eq!(last.soh, 100.0 - last.q_total, max_relative = 1e-15);
}

#[test]
fn first_optimizer_steps_match_closed_forms() {
    let g: [f64; 3] = [0.3, -1.7, 2e-4];
    let lr = 0.05;
    for kind in OptimizerKind::ALL {
        let cfg = OptimizerConfig::new(kind, lr);
        let mut x = [1.0; 3];
        step(&cfg, &mut OptimizerState::new(3), &mut x, &g).unwrap();
        for (xi, gi) in x.iter().zip(g) {
            let delta = match kind {
                OptimizerKind::Adam | OptimizerKind::AdaGrad => -lr * gi / (gi.abs() + 1e-8),
                OptimizerKind::RmsProp => -lr * gi / ((0.1_f64).sqrt() * gi.abs() + 1e-8),
                OptimizerKind::AdaBelief => -lr * gi / ((0.81 * gi * gi + 1e-8 / 0.001).sqrt() + 1e-8),
                OptimizerKind::Nesterov => -lr * 1.9 * gi,
                OptimizerKind::Sophia => -lr * (gi / (0.01 * gi * gi).max(1e-8)).clamp(-0.04, 0.04),
            };
            assert_relative_eq!(*xi, 1.0 + delta, max_relative = 1e-12);
        }
    }
}

/// Hybrid whose networks are replaced by the exact physics terms, each
/// scaled by one trainable coefficient.
#[derive(Clone)]
struct Substituted {
    physics: BatteryParams<f64>,
    theta: [f64; 2],
}

struct SubstitutedDynamics<'a> {
    model: &'a Substituted,
    grad: [f64; 2],
}

impl Substituted {
    fn terms(&self, t: f64, q: f64) -> Result<(f64, f64, f64)> {
        let p = &self.physics;
        let cap = p.capacity_from_loss(q);
        let cyc = p.cycle_rate(cap);
        let k = (p.d * p.temperature_k + p.e) * p.discharge_current();
        // d cycle_rate / dq through Q = Qnom (100 - q) / 100.
        let dcyc_dq = cyc * (-k / (cap * cap) - 1.0 / cap) * (-p.nominal_capacity_ah / 100.0);
        Ok((p.calendar_rate(t)?, cyc, dcyc_dq))
    }
}

impl ScalarDynamics<f64> for SubstitutedDynamics<'_> {
    fn rate(&mut self, t: f64, y: f64) -> Result<f64> {
        let (cal, cyc, _) = self.model.terms(t, y)?;
        Ok(self.model.theta[0] * cal + self.model.theta[1] * cyc)
    }

    fn rate_vjp(&mut self, t: f64, y: f64, upstream: f64) -> Result<f64> {
        let (cal, cyc, dcyc) = self.model.terms(t, y)?;
        self.grad[0] += upstream * cal;
        self.grad[1] += upstream * cyc;
        Ok(upstream * self.model.theta[1] * dcyc)
    }
}

impl IntoGradient<f64> for SubstitutedDynamics<'_> {
    fn into_gradient(self) -> Result<Vec<f64>> {
        Ok(self.grad.to_vec())
    }
}

impl TrajectoryModel<f64> for Substituted {
    type Dynamics<'a> = SubstitutedDynamics<'a>;

    fn dynamics(&self) -> SubstitutedDynamics<'_> {
        SubstitutedDynamics { model: self, grad: [0.0; 2] }
    }
    fn param_count(&self) -> usize {
        2
    }
    fn params(&self) -> Vec<f64> {
        self.theta.to_vec()
    }
    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        self.theta.copy_from_slice(params);
        Ok(())
    }
    fn resample_masks(&mut self, _rng: &mut ChaCha8Rng) {}
    fn clear_masks(&mut self) {}
    fn update_running_stats(&mut self, _times: &[f64], _states: &[f64]) -> Result<()> {
        Ok(())
    }
}

fn two_years() -> TrainData<f64> {
    let traj = simulate(&BatteryParams::default(), (1.0, 730.0), &reference_solver()).unwrap();
    TrainData::new(traj.times, traj.states.iter().map(|s| s.q_total).collect()).unwrap()
}

#[test]
fn exact_substitution_reproduces_the_ground_truth() {
    let data = two_years();
    let model = Substituted { physics: BatteryParams::default(), theta: [1.0, 1.0] };
    let solver = TrainConfig::new((1.0, 730.0), OptimizerConfig::adam(0.01), 0, 0).solver;
    let eval = evaluate(&model, &data, &solver, true).unwrap();
    assert!(eval.mse < 1e-4, "mse {}", eval.mse);
    for g in eval.gradient.unwrap() {
        assert!(g.abs() < 1e-2, "gradient {g} at the true coefficients");
    }
}

#[test]
fn substituted_gradient_matches_finite_differences() {
    let data = two_years();
    let mut model = Substituted { physics: BatteryParams::default(), theta: [0.8, 1.5] };
    let solver = TrainConfig::new((1.0, 730.0), OptimizerConfig::adam(0.01), 0, 0).solver;
    let g = evaluate(&model, &data, &solver, true).unwrap().gradient.unwrap();
    for i in 0..2 {
        let eps = 1e-6;
        let base = model.theta;
        let mut at = |d: f64| {
            model.theta = base;
            model.theta[i] += d;
            evaluate(&model, &data, &solver, false).unwrap().mse
        };
        let fd = (at(eps) - at(-eps)) / (2.0 * eps);
        model.theta = base;
        assert_relative_eq!(g[i], fd, max_relative = 1e-6);
    }
}

#[test]
fn training_recovers_the_substituted_coefficients() {
    let data = two_years();
    let model = Substituted { physics: BatteryParams::default(), theta: [0.6, 2.0] };
    let cfg = TrainConfig::new((1.0, 730.0), OptimizerConfig::adam(0.02), 600, 1);
    let out = train(model, "substituted", &data, &cfg).unwrap();
    assert!(out.run.completed());
    assert_relative_eq!(out.best.theta[0], 1.0, max_relative = 3e-2);
    assert!(out.run.best_mse < 1e-3 * out.run.initial_mse);
}
