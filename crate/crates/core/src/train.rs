//! Trajectory-matching training shared by the hybrid and fully learned models.

use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::sensitivity::{backprop, solve_recorded, ScalarDynamics};
use crate::ode::SolverConfig;
use crate::optim::{self, OptimizerConfig, OptimizerState};
use crate::scalar::Scalar;

/// Observed cumulative loss (percent) at strictly increasing times (days).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData<T> {
    pub times: Vec<T>,
    pub targets: Vec<T>,
}

impl<T: Scalar> TrainData<T> {
    pub fn new(times: Vec<T>, targets: Vec<T>) -> Result<Self> {
        if times.len() != targets.len() {
            return Err(Error::Dimension { expected: times.len(), got: targets.len() });
        }
        if times.is_empty() {
            return Err(Error::EmptySeries);
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Data("training times must be strictly increasing".into()));
        }
        if let Some(i) = targets.iter().chain(&times).position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("training data entry {i}")));
        }
        Ok(Self { times, targets })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Initial condition used by every solve: the first observation.
    pub fn start(&self) -> (T, T) {
        (self.times[0], self.targets[0])
    }

    /// Observations with `lo <= t <= hi`.
    pub fn window(&self, lo: T, hi: T) -> Result<Self> {
        let (times, targets) = self
            .times
            .iter()
            .zip(&self.targets)
            .filter(|(t, _)| **t >= lo && **t <= hi)
            .map(|(t, y)| (*t, *y))
            .unzip();
        Self::new(times, targets)
    }
}

/// Right-hand side that can hand back the parameter gradient it accumulated
/// through [`ScalarDynamics::rate_vjp`].
pub trait IntoGradient<T> {
    fn into_gradient(self) -> Result<Vec<T>>;
}

/// A scalar ODE model `dq/dt = g_theta(t, q)` with a flat parameter vector.
pub trait TrajectoryModel<T: Scalar>: Clone {
    type Dynamics<'a>: ScalarDynamics<T> + IntoGradient<T>
    where
        Self: 'a;

    /// Right-hand side using the current parameters and dropout masks.
    fn dynamics(&self) -> Self::Dynamics<'_>;
    fn param_count(&self) -> usize;
    fn params(&self) -> Vec<T>;
    fn set_params(&mut self, params: &[T]) -> Result<()>;
    /// Draws the dropout masks held fixed for one iteration's solve.
    fn resample_masks(&mut self, rng: &mut ChaCha8Rng);
    /// Removes the masks so the model runs deterministically.
    fn clear_masks(&mut self);
    /// Batch-norm running statistics from the batch of states at sample times.
    fn update_running_stats(&mut self, times: &[T], states: &[T]) -> Result<()>;
}

/// Loss, predictions at the sample times and (optionally) the gradient.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub mse: T,
    pub predictions: Vec<T>,
    pub gradient: Option<Vec<T>>,
}

/// Solves from the first observation and scores the mean squared error over
/// every sample time.
pub fn evaluate<T, M>(model: &M, data: &TrainData<T>, solver: &SolverConfig<T>, with_grad: bool) -> Result<Evaluation<T>>
where
    T: Scalar,
    M: TrajectoryModel<T>,
{
    let (t0, y0) = data.start();
    let mut dynamics = model.dynamics();
    let tape = solve_recorded(&mut dynamics, y0, t0, &data.times, solver)?;
    let n = T::from_usize(data.len()).unwrap();
    let mut mse = T::zero();
    let mut bars = Vec::with_capacity(data.len());
    for (p, y) in tape.states.iter().zip(&data.targets) {
        let r = *p - *y;
        mse += r * r;
        bars.push(T::of(2.0) * r / n);
    }
    mse /= n;
    let gradient = if with_grad {
        backprop(&mut dynamics, &tape, &bars)?;
        Some(dynamics.into_gradient()?)
    } else {
        None
    };
    Ok(Evaluation { mse, predictions: tape.states, gradient })
}

/// Iterations above which only every tenth loss is logged.
pub const DENSE_LOG_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TrainConfig<T: Scalar> {
    pub t_span: (T, T),
    pub optimizer: OptimizerConfig<T>,
    pub iterations: usize,
    pub seed: u64,
    pub solver: SolverConfig<T>,
}

impl<T: Scalar> TrainConfig<T> {
    pub fn new(t_span: (T, T), optimizer: OptimizerConfig<T>, iterations: usize, seed: u64) -> Self {
        Self { t_span, optimizer, iterations, seed, solver: SolverConfig::rk4(T::one()) }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.solver.validate()?;
        if !(self.t_span.0 < self.t_span.1) {
            return Err(Error::Config("training span must be increasing".into()));
        }
        Ok(())
    }

    /// Whether the loss after `iteration` goes into the history.
    pub fn logs(&self, iteration: usize) -> bool {
        self.iterations <= DENSE_LOG_LIMIT || iteration % 10 == 0 || iteration == self.iterations
    }
}

/// Record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TrainRun<T: Scalar> {
    pub model_kind: String,
    pub config: TrainConfig<T>,
    pub initial_mse: T,
    /// `(iteration, mse)`: the loss after that many optimizer steps.
    pub loss_history: Vec<(usize, T)>,
    pub final_mse: T,
    pub best_mse: T,
    pub best_iteration: usize,
    pub wall_time_secs: f64,
    /// Set when the run stopped early on a non-finite loss or a failed solve.
    pub aborted: Option<String>,
}

pub const LOSS_HEADER: [&str; 2] = ["iteration", "mse"];

impl<T: Scalar> TrainRun<T> {
    pub fn completed(&self) -> bool {
        self.aborted.is_none()
    }

    pub fn write_loss_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(LOSS_HEADER)?;
        for (i, l) in &self.loss_history {
            w.write_record([i.to_string(), l.as_f64().to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_loss_csv(std::fs::File::create(path)?)
    }
}

/// Reads an `iteration,mse` loss history.
pub fn read_loss_csv<T: Scalar, R: Read>(reader: R) -> Result<Vec<(usize, T)>> {
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().ne(LOSS_HEADER) {
        return Err(Error::Data("loss history needs header iteration,mse".into()));
    }
    r.records()
        .map(|row| {
            let row = row?;
            let it = row[0].parse().map_err(|e| Error::Data(format!("iteration: {e}")))?;
            let mse: f64 = row[1].parse().map_err(|e| Error::Data(format!("mse: {e}")))?;
            Ok((it, T::of(mse)))
        })
        .collect()
}

/// Trained model, the lowest-loss snapshot and the run record.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar, M> {
    pub run: TrainRun<T>,
    pub model: M,
    pub best: M,
}

/// Optimizes `model` so its solve from the first observation matches `data`.
///
/// Each iteration samples fresh dropout masks, solves, backpropagates the
/// mean squared error through the discretized solve, updates batch-norm
/// running statistics from the predicted states, and takes one optimizer step.
pub fn train<T, M>(mut model: M, kind: &str, data: &TrainData<T>, cfg: &TrainConfig<T>) -> Result<TrainOutcome<T, M>>
where
    T: Scalar,
    M: TrajectoryModel<T>,
{
    cfg.validate()?;
    let (lo, hi) = cfg.t_span;
    if data.times[0] < lo || *data.times.last().unwrap() > hi {
        return Err(Error::Data(format!("training data must lie within ({lo}, {hi})")));
    }
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(model.param_count());
    let mut params = model.params();

    model.resample_masks(&mut rng);
    let first = evaluate(&model, data, &cfg.solver, cfg.iterations > 0)?;
    if !first.mse.is_finite() {
        return Err(Error::NonFinite("initial loss".into()));
    }
    let mut run = TrainRun {
        model_kind: kind.to_string(),
        config: *cfg,
        initial_mse: first.mse,
        loss_history: Vec::new(),
        final_mse: first.mse,
        best_mse: first.mse,
        best_iteration: 0,
        wall_time_secs: 0.0,
        aborted: None,
    };
    if cfg.iterations == 0 {
        run.loss_history.push((0, first.mse));
    }
    let mut best = model.clone();
    let mut current = first;

    for it in 1..=cfg.iterations {
        let grad = current.gradient.take().expect("gradient requested");
        if let Err(e) = optim::step(&cfg.optimizer, &mut state, &mut params, &grad) {
            run.aborted = Some(format!("iteration {it}: {e}"));
            break;
        }
        model.update_running_stats(&data.times, &current.predictions)?;
        model.set_params(&params)?;
        model.resample_masks(&mut rng);
        current = match evaluate(&model, data, &cfg.solver, it < cfg.iterations) {
            Ok(ev) if ev.mse.is_finite() => ev,
            Ok(_) => {
                run.aborted = Some(format!("iteration {it}: loss is not finite"));
                break;
            }
            Err(e @ (Error::Integration { .. } | Error::NonFinite(_))) => {
                run.aborted = Some(format!("iteration {it}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        if cfg.logs(it) {
            run.loss_history.push((it, current.mse));
        }
        run.final_mse = current.mse;
        if current.mse < run.best_mse {
            run.best_mse = current.mse;
            run.best_iteration = it;
            best = model.clone();
        }
    }
    if let Some(&(_, last)) = run.loss_history.last() {
        run.final_mse = last;
    }
    model.clear_masks();
    best.clear_masks();
    run.wall_time_secs = clock.elapsed().as_secs_f64();
    Ok(TrainOutcome { run, model, best })
}

/// Integrates `model` from `(t0, q0)` and returns the state at each of
/// `times` (sorted, `>= t0`).
pub fn rollout<T, M>(model: &M, start: (T, T), times: &[T], solver: &SolverConfig<T>) -> Result<Vec<T>>
where
    T: Scalar,
    M: TrajectoryModel<T>,
{
    let mut m = model.clone();
    m.clear_masks();
    let mut dynamics = m.dynamics();
    Ok(solve_recorded(&mut dynamics, start.1, start.0, times, solver)?.states)
}

/// Mean squared error between equally long series.
pub fn mse<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension { expected: a.len(), got: b.len() });
    }
    let s: T = a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum();
    Ok(s / T::from_usize(a.len()).unwrap())
}
