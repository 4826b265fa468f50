//! First-order optimizers over a flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    RmsProp,
    AdaGrad,
    AdaBelief,
    Nesterov,
    Sophia,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 6] = [
        OptimizerKind::Adam,
        OptimizerKind::RmsProp,
        OptimizerKind::AdaGrad,
        OptimizerKind::AdaBelief,
        OptimizerKind::Nesterov,
        OptimizerKind::Sophia,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "Adam",
            OptimizerKind::RmsProp => "RMSProp",
            OptimizerKind::AdaGrad => "AdaGrad",
            OptimizerKind::AdaBelief => "AdaBelief",
            OptimizerKind::Nesterov => "Nesterov",
            OptimizerKind::Sophia => "Sophia",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name().to_ascii_lowercase() == lower)
            .ok_or_else(|| Error::Config(format!("unknown optimizer `{s}`")))
    }
}

/// Optimizer hyperparameters. Only `lr` is swept; the rest default to the
/// values of each method's original publication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct OptimizerConfig<T: Scalar> {
    pub kind: OptimizerKind,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    /// Nesterov momentum coefficient.
    pub momentum: T,
    /// RMSProp squared-gradient decay.
    pub rms_decay: T,
    /// Sophia update clip.
    pub rho: T,
    /// Sophia Hessian-diagonal refresh interval, in steps.
    pub hessian_interval: usize,
}

impl<T: Scalar> OptimizerConfig<T> {
    pub fn new(kind: OptimizerKind, lr: T) -> Self {
        let (beta1, beta2) = match kind {
            OptimizerKind::Sophia => (0.965, 0.99),
            _ => (0.9, 0.999),
        };
        Self {
            kind,
            lr,
            beta1: T::of(beta1),
            beta2: T::of(beta2),
            eps: T::of(1e-8),
            momentum: T::of(0.9),
            rms_decay: T::of(0.9),
            rho: T::of(0.04),
            hessian_interval: 10,
        }
    }

    pub fn adam(lr: T) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: T| v >= T::zero() && v < T::one();
        if !(self.lr > T::zero()) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !unit(self.beta1) || !unit(self.beta2) || !unit(self.momentum) || !unit(self.rms_decay) {
            return Err(Error::Config("decay constants must lie in [0, 1)".into()));
        }
        if !(self.eps > T::zero()) || !(self.rho > T::zero()) || self.hessian_interval == 0 {
            return Err(Error::Config("eps, rho and the Hessian interval must be positive".into()));
        }
        Ok(())
    }
}

/// Per-run optimizer buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct OptimizerState<T: Scalar> {
    pub step: u64,
    /// First moment / momentum velocity.
    pub m: Vec<T>,
    /// Second moment / accumulator / belief / Hessian diagonal.
    pub v: Vec<T>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(len: usize) -> Self {
        Self { step: 0, m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }
}

/// One optimizer update of `params` in place.
///
/// Non-finite gradients are rejected before anything is modified.
pub fn step<T: Scalar>(cfg: &OptimizerConfig<T>, state: &mut OptimizerState<T>, params: &mut [T], grad: &[T]) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Dimension { expected: params.len(), got: grad.len() });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient component {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let one = T::one();
    let lr = cfg.lr;
    let eps = cfg.eps;
    let (b1, b2) = (cfg.beta1, cfg.beta2);

    match cfg.kind {
        OptimizerKind::Adam => {
            let c1 = one - b1.powi(t);
            let c2 = one - b2.powi(t);
            for i in 0..params.len() {
                let g = grad[i];
                state.m[i] = b1 * state.m[i] + (one - b1) * g;
                state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        OptimizerKind::AdaBelief => {
            let c1 = one - b1.powi(t);
            let c2 = one - b2.powi(t);
            for i in 0..params.len() {
                let g = grad[i];
                state.m[i] = b1 * state.m[i] + (one - b1) * g;
                let dev = g - state.m[i];
                state.v[i] = b2 * state.v[i] + (one - b2) * dev * dev + eps;
                let m_hat = state.m[i] / c1;
                let s_hat = state.v[i] / c2;
                params[i] -= lr * m_hat / (s_hat.sqrt() + eps);
            }
        }
        OptimizerKind::RmsProp => {
            let rho = cfg.rms_decay;
            for i in 0..params.len() {
                let g = grad[i];
                state.v[i] = rho * state.v[i] + (one - rho) * g * g;
                params[i] -= lr * g / (state.v[i].sqrt() + eps);
            }
        }
        OptimizerKind::AdaGrad => {
            for i in 0..params.len() {
                let g = grad[i];
                state.v[i] += g * g;
                params[i] -= lr * g / (state.v[i].sqrt() + eps);
            }
        }
        OptimizerKind::Nesterov => {
            let mu = cfg.momentum;
            for i in 0..params.len() {
                let g = grad[i];
                state.m[i] = mu * state.m[i] + g;
                params[i] -= lr * (g + mu * state.m[i]);
            }
        }
        OptimizerKind::Sophia => {
            // Squared-gradient proxy for the Hessian diagonal, refreshed
            // every `hessian_interval` steps starting with the first.
            let refresh = (state.step - 1) % cfg.hessian_interval as u64 == 0;
            let c1 = one - b1.powi(t);
            for i in 0..params.len() {
                let g = grad[i];
                state.m[i] = b1 * state.m[i] + (one - b1) * g;
                if refresh {
                    state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
                }
                let m_hat = state.m[i] / c1;
                let ratio = m_hat / state.v[i].max(eps);
                params[i] -= lr * ratio.max(-cfg.rho).min(cfg.rho);
            }
        }
    }
    Ok(())
}

/// Learning rates of the hyperparameter sweep.
pub const SWEEP_LEARNING_RATES: [f64; 4] = [0.1, 0.01, 0.001, 0.0001];

/// Iteration budgets of the sweep: 10k to 80k in steps of 10k.
pub fn sweep_iterations() -> Vec<usize> {
    (1..=8).map(|i| i * 10_000).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct GridPoint<T: Scalar> {
    pub optimizer: OptimizerConfig<T>,
    pub iterations: usize,
}

/// Optimizer x learning rate x iteration budget grid (192 points).
pub fn sweep_grid<T: Scalar>() -> Vec<GridPoint<T>> {
    let mut out = Vec::with_capacity(192);
    for kind in OptimizerKind::ALL {
        for lr in SWEEP_LEARNING_RATES {
            for iterations in sweep_iterations() {
                out.push(GridPoint { optimizer: OptimizerConfig::new(kind, T::of(lr)), iterations });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        for kind in OptimizerKind::ALL {
            let cfg = OptimizerConfig::new(kind, 0.1_f64);
            let mut state = OptimizerState::new(3);
            let mut p = vec![1.0, -2.0, 0.5];
            step(&cfg, &mut state, &mut p, &[0.0; 3]).unwrap();
            assert_eq!(p, vec![1.0, -2.0, 0.5], "{kind}");
        }
    }

    #[test]
    fn nonfinite_gradient_is_rejected_without_side_effects() {
        let cfg = OptimizerConfig::adam(0.1_f64);
        let mut state = OptimizerState::new(2);
        let mut p = vec![1.0, 1.0];
        step(&cfg, &mut state, &mut p, &[1.0, 1.0]).unwrap();
        let (snap_s, snap_p) = (state.clone(), p.clone());
        assert!(matches!(step(&cfg, &mut state, &mut p, &[f64::NAN, 1.0]), Err(Error::NonFinite(_))));
        assert_eq!(state, snap_s);
        assert_eq!(p, snap_p);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let cfg = OptimizerConfig::adam(0.1_f64);
        let mut state = OptimizerState::new(2);
        let mut p = vec![1.0, 1.0];
        assert!(step(&cfg, &mut state, &mut p, &[1.0]).is_err());
    }

    #[test]
    fn adagrad_second_step_shrinks_by_sqrt_two() {
        let cfg = OptimizerConfig::new(OptimizerKind::AdaGrad, 0.01_f64);
        let mut state = OptimizerState::new(1);
        let mut p = vec![0.0];
        step(&cfg, &mut state, &mut p, &[0.7]).unwrap();
        let first = p[0];
        step(&cfg, &mut state, &mut p, &[0.7]).unwrap();
        let second = p[0] - first;
        assert!((second / first - 1.0 / 2f64.sqrt()).abs() < 1e-7);
    }

    #[test]
    fn grid_has_every_combination_once() {
        let grid = sweep_grid::<f64>();
        assert_eq!(grid.len(), 192);
        for lr in SWEEP_LEARNING_RATES {
            assert!(grid.iter().any(|g| g.optimizer.lr == lr));
        }
        let mut keys: Vec<_> = grid
            .iter()
            .map(|g| (g.optimizer.kind, g.optimizer.lr.to_bits(), g.iterations))
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 192);
        assert_eq!(sweep_iterations().first(), Some(&10_000));
        assert_eq!(sweep_iterations().last(), Some(&80_000));
    }

    #[test]
    fn kind_parses_case_insensitively() {
        assert_eq!("rmsprop".parse::<OptimizerKind>().unwrap(), OptimizerKind::RmsProp);
        assert_eq!("ADAM".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
        assert!("sgd".parse::<OptimizerKind>().is_err());
    }

    #[test]
    fn invalid_config() {
        let mut cfg = OptimizerConfig::adam(0.0_f64);
        assert!(cfg.validate().is_err());
        cfg.lr = 0.1;
        cfg.beta1 = 1.0;
        assert!(cfg.validate().is_err());
    }
}
