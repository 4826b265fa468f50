//! Explicit Runge–Kutta integrators.
//!
//! Two entry points are provided for vector-valued problems: fixed-step
//! classic RK4 ([`integrate_rk4`]) and the Dormand–Prince 5(4) pair with
//! PI step-size control ([`integrate_dopri5`]). Both return states at
//! caller-requested sample times using dense output, so samples need not
//! align with step boundaries.
//!
//! [`sensitivity`] holds the scalar-state solver used during training: it
//! records every stage of the solve so the loss can be backpropagated
//! through the discretized integration.

mod dopri5;
mod rk4;
pub mod sensitivity;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use dopri5::integrate_dopri5;
pub use rk4::integrate_rk4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    Dopri5,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Rk4 => f.write_str("rk4"),
            Method::Dopri5 => f.write_str("dopri5"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rk4" => Ok(Method::Rk4),
            "dopri5" | "dopri" => Ok(Method::Dopri5),
            other => Err(Error::Config(format!("unknown solver method `{other}`"))),
        }
    }
}

/// Solver selection and tolerances.
///
/// `step` is the fixed step for RK4 (and for DOPRI5 when `adaptive` is off).
/// `rtol`/`atol` drive the adaptive DOPRI5 error control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SolverConfig<T: Scalar> {
    pub method: Method,
    pub step: T,
    pub rtol: T,
    pub atol: T,
    pub max_steps: usize,
    pub adaptive: bool,
}

impl<T: Scalar> SolverConfig<T> {
    pub fn rk4(step: T) -> Self {
        Self {
            method: Method::Rk4,
            step,
            rtol: T::of(1e-6),
            atol: T::of(1e-9),
            max_steps: 10_000_000,
            adaptive: false,
        }
    }

    pub fn dopri5(rtol: T, atol: T) -> Self {
        Self {
            method: Method::Dopri5,
            step: T::one(),
            rtol,
            atol,
            max_steps: 1_000_000,
            adaptive: true,
        }
    }

    /// DOPRI5 tableau with uniform steps and no error control.
    pub fn dopri5_fixed(step: T) -> Self {
        Self {
            adaptive: false,
            step,
            ..Self::dopri5(T::of(1e-6), T::of(1e-9))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: T| v > T::zero() && v.is_finite();
        if !positive(self.step) {
            return Err(Error::Config(format!("step must be > 0, got {}", self.step)));
        }
        if !positive(self.rtol) || !positive(self.atol) {
            return Err(Error::Config("rtol and atol must be > 0".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be > 0".into()));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for SolverConfig<T> {
    /// One-day RK4, the training default.
    fn default() -> Self {
        Self::rk4(T::one())
    }
}

/// Initial-value problem `dy/dt = rhs(t, y)` on `t_span`.
///
/// The right-hand side writes the derivative into its third argument.
/// Context is captured by the closure.
pub struct OdeProblem<T, F> {
    pub rhs: F,
    pub y0: Vec<T>,
    pub t_span: (T, T),
}

impl<T: Scalar, F: Fn(T, &[T], &mut [T])> OdeProblem<T, F> {
    pub fn new(rhs: F, y0: Vec<T>, t_span: (T, T)) -> Self {
        Self { rhs, y0, t_span }
    }

    fn check(&self, sample_times: &[T]) -> Result<()> {
        let (t0, t1) = self.t_span;
        if !(t0 < t1) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::Domain(format!("t_span must be increasing, got ({t0}, {t1})")));
        }
        if self.y0.is_empty() {
            return Err(Error::Domain("empty initial state".into()));
        }
        check_samples(sample_times, (t0, t1))
    }
}

pub(crate) fn check_samples<T: Scalar>(sample_times: &[T], span: (T, T)) -> Result<()> {
    for w in sample_times.windows(2) {
        if w[1] < w[0] {
            return Err(Error::Domain("sample times must be sorted".into()));
        }
    }
    if let (Some(&first), Some(&last)) = (sample_times.first(), sample_times.last()) {
        if first < span.0 || last > span.1 {
            return Err(Error::Domain(format!(
                "sample times [{first}, {last}] outside t_span ({}, {})",
                span.0, span.1
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    MaxStepsExceeded,
    NonfiniteState,
}

/// States at the requested sample times. On failure `times`/`states` hold
/// the samples reached before the solver stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution<T> {
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
    pub step_count: usize,
    pub rejected_steps: usize,
    pub status: Status,
    pub last_valid_t: T,
}

impl<T: Scalar> Solution<T> {
    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    /// Converts a failed status into [`Error::Integration`].
    pub fn into_result(self) -> Result<Self> {
        match self.status {
            Status::Ok => Ok(self),
            status => Err(Error::Integration {
                status,
                last_valid_t: self.last_valid_t.as_f64(),
            }),
        }
    }

    /// Final sampled state, if any.
    pub fn last(&self) -> Option<&[T]> {
        self.states.last().map(Vec::as_slice)
    }
}

/// Dispatches on `cfg.method`.
pub fn integrate<T, F>(
    problem: &OdeProblem<T, F>,
    cfg: &SolverConfig<T>,
    sample_times: &[T],
) -> Result<Solution<T>>
where
    T: Scalar,
    F: Fn(T, &[T], &mut [T]),
{
    match cfg.method {
        Method::Rk4 => integrate_rk4(problem, cfg, sample_times),
        Method::Dopri5 => integrate_dopri5(problem, cfg, sample_times),
    }
}

/// Number of uniform steps of size at most `h` covering `span`.
pub(crate) fn uniform_steps<T: Scalar>(span: T, h: T) -> usize {
    let ratio = (span / h).as_f64();
    ((ratio - 1e-9).ceil() as usize).max(1)
}

#[inline]
pub(crate) fn all_finite<T: Scalar>(y: &[T]) -> bool {
    y.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay() -> OdeProblem<f64, impl Fn(f64, &[f64], &mut [f64])> {
        OdeProblem::new(|_t, y: &[f64], dy: &mut [f64]| dy[0] = -y[0], vec![1.0], (0.0, 1.0))
    }

    #[test]
    fn uniform_steps_handles_round_ratios() {
        assert_eq!(uniform_steps(1.0_f64, 0.1), 10);
        assert_eq!(uniform_steps(3649.0_f64, 1.0), 3649);
        assert_eq!(uniform_steps(0.5_f64, 1.0), 1);
        assert_eq!(uniform_steps(2.5_f64, 1.0), 3);
    }

    #[test]
    fn unsorted_samples_are_rejected() {
        let p = decay();
        let cfg = SolverConfig::rk4(0.1);
        assert!(matches!(integrate(&p, &cfg, &[0.5, 0.2]), Err(Error::Domain(_))));
        assert!(matches!(integrate(&p, &cfg, &[1.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let p = decay();
        let mut cfg = SolverConfig::rk4(0.0);
        assert!(integrate(&p, &cfg, &[1.0]).is_err());
        cfg = SolverConfig::dopri5(-1.0, 1e-9);
        assert!(integrate(&p, &cfg, &[1.0]).is_err());
    }

    #[test]
    fn method_parses() {
        assert_eq!("RK4".parse::<Method>().unwrap(), Method::Rk4);
        assert_eq!("dopri5".parse::<Method>().unwrap(), Method::Dopri5);
        assert!("euler".parse::<Method>().is_err());
    }
}
