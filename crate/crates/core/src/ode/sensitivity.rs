//! Discretize-then-optimize gradients for scalar-state dynamics.
//!
//! [`solve_recorded`] integrates `dy/dt = rate(t, y)` while keeping every
//! accepted step's stage derivatives; [`backprop`] then runs the exact
//! reverse pass of the explicit Runge–Kutta update, pulling sample-state
//! cotangents back through every stage via [`ScalarDynamics::rate_vjp`].
//! Step sizes chosen by the adaptive controller are treated as constants.
//!
//! The solver lands exactly on every sample time (RK4 subdivides each
//! inter-sample interval uniformly, DOPRI5 clamps its step), so no dense
//! output appears in the differentiated path.

use super::dopri5::{self, Controller};
use super::{check_samples, uniform_steps, Method, SolverConfig, Status};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Scalar right-hand side with a vector-Jacobian product.
///
/// Implementors accumulate parameter gradients internally; `rate_vjp`
/// returns `upstream * d rate / d y`.
pub trait ScalarDynamics<T: Scalar> {
    fn rate(&mut self, t: T, y: T) -> Result<T>;
    fn rate_vjp(&mut self, t: T, y: T, upstream: T) -> Result<T>;
}

/// Propagating part of an explicit Runge–Kutta tableau.
#[derive(Debug, Clone)]
struct Tableau<T> {
    a: Vec<Vec<T>>,
    b: Vec<T>,
    c: Vec<T>,
}

impl<T: Scalar> Tableau<T> {
    fn rk4() -> Self {
        let h = T::of(0.5);
        let z = T::zero();
        Self {
            a: vec![vec![], vec![h], vec![z, h], vec![z, z, T::one()]],
            b: [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0].iter().map(|&v| T::of(v)).collect(),
            c: vec![z, h, h, T::one()],
        }
    }

    /// First six stages of Dormand–Prince; the seventh has zero weight in
    /// the propagated solution and only feeds the error estimate.
    fn dopri5() -> Self {
        Self {
            a: (0..6).map(|s| dopri5::A[s][..s].iter().map(|&v| T::of(v)).collect()).collect(),
            b: dopri5::B[..6].iter().map(|&v| T::of(v)).collect(),
            c: dopri5::C[..6].iter().map(|&v| T::of(v)).collect(),
        }
    }

    fn stages(&self) -> usize {
        self.b.len()
    }

    fn stage_input(&self, s: usize, y: T, h: T, k: &[T]) -> T {
        let mut acc = T::zero();
        for (j, &a) in self.a[s].iter().enumerate() {
            acc += a * k[j];
        }
        y + h * acc
    }
}

#[derive(Debug, Clone)]
struct StepRecord<T> {
    t: T,
    h: T,
    y: T,
    k: Vec<T>,
}

/// Forward solve with everything needed for the reverse pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    tableau: Tableau<T>,
    steps: Vec<StepRecord<T>>,
    pub sample_times: Vec<T>,
    /// Predicted state at each sample time.
    pub states: Vec<T>,
    /// Number of completed steps when each sample was reached.
    sample_step: Vec<usize>,
    pub rejected_steps: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    /// Final state of the solve.
    pub fn final_state(&self) -> Option<T> {
        self.states.last().copied()
    }
}

fn evaluate<T: Scalar, D: ScalarDynamics<T>>(dynamics: &mut D, t: T, y: T) -> Result<T> {
    let v = dynamics.rate(t, y)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Integration { status: Status::NonfiniteState, last_valid_t: t.as_f64() })
    }
}

fn take_step<T: Scalar, D: ScalarDynamics<T>>(
    dynamics: &mut D,
    tab: &Tableau<T>,
    t: T,
    y: T,
    h: T,
    k1: Option<T>,
) -> Result<(Vec<T>, T)> {
    let mut k = Vec::with_capacity(tab.stages());
    for s in 0..tab.stages() {
        let v = match (s, k1) {
            (0, Some(v)) => v,
            _ => evaluate(dynamics, t + tab.c[s] * h, tab.stage_input(s, y, h, &k))?,
        };
        k.push(v);
    }
    let mut incr = T::zero();
    for (b, kv) in tab.b.iter().zip(&k) {
        incr += *b * *kv;
    }
    let y_new = y + h * incr;
    if !y_new.is_finite() {
        return Err(Error::Integration { status: Status::NonfiniteState, last_valid_t: t.as_f64() });
    }
    Ok((k, y_new))
}

/// Integrates from `(t0, y0)` and records the states at `sample_times`.
///
/// Sample times must be sorted and `>= t0`; samples equal to `t0` take `y0`.
pub fn solve_recorded<T, D>(
    dynamics: &mut D,
    y0: T,
    t0: T,
    sample_times: &[T],
    cfg: &SolverConfig<T>,
) -> Result<Tape<T>>
where
    T: Scalar,
    D: ScalarDynamics<T>,
{
    cfg.validate()?;
    let t_last = sample_times.last().copied().unwrap_or(t0);
    check_samples(sample_times, (t0, t_last.max(t0)))?;

    let tableau = match cfg.method {
        Method::Rk4 => Tableau::rk4(),
        Method::Dopri5 => Tableau::dopri5(),
    };
    let mut tape = Tape {
        tableau,
        steps: Vec::new(),
        sample_times: sample_times.to_vec(),
        states: Vec::with_capacity(sample_times.len()),
        sample_step: Vec::with_capacity(sample_times.len()),
        rejected_steps: 0,
    };

    let mut t = t0;
    let mut y = y0;
    let adaptive = cfg.method == Method::Dopri5 && cfg.adaptive;
    let mut controller = Controller::new();
    let mut h_adapt = cfg.step;
    let mut last_rejected = false;
    let mut attempts = 0usize;

    for &target in sample_times {
        if target > t {
            if adaptive {
                let mut k1 = Some(evaluate(dynamics, t, y)?);
                while t < target {
                    if attempts >= cfg.max_steps {
                        return Err(Error::Integration {
                            status: Status::MaxStepsExceeded,
                            last_valid_t: t.as_f64(),
                        });
                    }
                    attempts += 1;
                    let lands = t + T::of(1.01) * h_adapt >= target;
                    let h = if lands { target - t } else { h_adapt };
                    let (k, y_new) = take_step(dynamics, &tape.tableau, t, y, h, k1)?;
                    let k7 = evaluate(dynamics, t + h, y_new)?;
                    let mut e = T::zero();
                    for (i, kv) in k.iter().enumerate() {
                        e += T::of(dopri5::E[i]) * *kv;
                    }
                    e += T::of(dopri5::E[6]) * k7;
                    let err = dopri5::error_norm(&[h * e], &[y], &[y_new], cfg.rtol, cfg.atol);
                    let (accepted, h_next) = controller.propose(err, h.as_f64(), last_rejected);
                    h_adapt = T::of(h_next);
                    if !accepted {
                        tape.rejected_steps += 1;
                        last_rejected = true;
                        k1 = Some(k[0]);
                        continue;
                    }
                    last_rejected = false;
                    tape.steps.push(StepRecord { t, h, y, k });
                    t = if lands { target } else { t + h };
                    y = y_new;
                    k1 = Some(k7);
                }
            } else {
                let n = uniform_steps(target - t, cfg.step);
                let start = t;
                let h = (target - start) / T::from_usize(n).unwrap();
                for i in 0..n {
                    if tape.steps.len() >= cfg.max_steps {
                        return Err(Error::Integration {
                            status: Status::MaxStepsExceeded,
                            last_valid_t: t.as_f64(),
                        });
                    }
                    let (k, y_new) = take_step(dynamics, &tape.tableau, t, y, h, None)?;
                    tape.steps.push(StepRecord { t, h, y, k });
                    t = if i + 1 == n { target } else { start + T::from_usize(i + 1).unwrap() * h };
                    y = y_new;
                }
            }
        }
        tape.states.push(y);
        tape.sample_step.push(tape.steps.len());
    }
    Ok(tape)
}

/// Reverse pass: given `dL/d(state at sample i)` returns `dL/dy0`, with
/// parameter gradients accumulated by the dynamics.
pub fn backprop<T, D>(dynamics: &mut D, tape: &Tape<T>, sample_bar: &[T]) -> Result<T>
where
    T: Scalar,
    D: ScalarDynamics<T>,
{
    if sample_bar.len() != tape.states.len() {
        return Err(Error::Dimension { expected: tape.states.len(), got: sample_bar.len() });
    }
    let tab = &tape.tableau;
    let stages = tab.stages();
    let mut y_bar = T::zero();
    let mut sample = tape.sample_step.len();
    let mut k_bar = vec![T::zero(); stages];

    for step_idx in (0..tape.steps.len()).rev() {
        while sample > 0 && tape.sample_step[sample - 1] == step_idx + 1 {
            sample -= 1;
            y_bar += sample_bar[sample];
        }
        let rec = &tape.steps[step_idx];
        for s in 0..stages {
            k_bar[s] = rec.h * tab.b[s] * y_bar;
        }
        let mut y_prev_bar = y_bar;
        for s in (0..stages).rev() {
            if k_bar[s] == T::zero() {
                continue;
            }
            let u = tab.stage_input(s, rec.y, rec.h, &rec.k);
            let u_bar = dynamics.rate_vjp(rec.t + tab.c[s] * rec.h, u, k_bar[s])?;
            y_prev_bar += u_bar;
            for (j, &a) in tab.a[s].iter().enumerate() {
                k_bar[j] += rec.h * a * u_bar;
            }
        }
        y_bar = y_prev_bar;
    }
    while sample > 0 {
        sample -= 1;
        y_bar += sample_bar[sample];
    }
    Ok(y_bar)
}
