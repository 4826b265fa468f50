use super::{all_finite, uniform_steps, OdeProblem, Solution, SolverConfig, Status};
use crate::error::Result;
use crate::scalar::Scalar;

// Dormand–Prince 5(4) coefficients.
pub(crate) const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
pub(crate) const A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights (the last row of `A`; stage 7 has zero weight).
pub(crate) const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
/// Difference between fifth- and fourth-order weights.
pub(crate) const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
// Dense output (Hairer & Wanner, continuous extension of order 4).
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// PI step-size controller constants.
pub(crate) struct Controller {
    safety: f64,
    beta: f64,
    expo1: f64,
    fac_min_inv: f64,
    fac_max_inv: f64,
    err_old: f64,
}

impl Controller {
    pub(crate) fn new() -> Self {
        let beta = 0.04;
        Self {
            safety: 0.9,
            beta,
            expo1: 0.2 - beta * 0.75,
            fac_min_inv: 1.0 / 0.2,
            fac_max_inv: 1.0 / 10.0,
            err_old: 1e-4,
        }
    }

    /// Returns `(accepted, next_h)`.
    pub(crate) fn propose(&mut self, err: f64, h: f64, last_rejected: bool) -> (bool, f64) {
        let fac11 = err.powf(self.expo1);
        if err <= 1.0 {
            let fac = fac11 / self.err_old.powf(self.beta);
            let fac = (fac / self.safety).clamp(self.fac_max_inv, self.fac_min_inv);
            let mut h_new = h / fac;
            self.err_old = err.max(1e-4);
            if last_rejected {
                h_new = h_new.min(h);
            }
            (true, h_new)
        } else {
            (false, h / self.fac_min_inv.min(fac11 / self.safety))
        }
    }
}

/// Weighted RMS norm used by the error control.
pub(crate) fn error_norm<T: Scalar>(err: &[T], y: &[T], y_new: &[T], rtol: T, atol: T) -> f64 {
    let n = err.len().max(1) as f64;
    let sum: f64 = err
        .iter()
        .zip(y.iter().zip(y_new))
        .map(|(&e, (&a, &b))| {
            let sk = atol + rtol * a.abs().max(b.abs());
            let r = (e / sk).as_f64();
            r * r
        })
        .sum();
    (sum / n).sqrt()
}

fn initial_step<T, F>(rhs: &F, t0: T, y0: &[T], f0: &[T], cfg: &SolverConfig<T>, h_max: T) -> T
where
    T: Scalar,
    F: Fn(T, &[T], &mut [T]),
{
    let n = y0.len() as f64;
    let sk = |y: T| cfg.atol + cfg.rtol * y.abs();
    let norm = |v: &[T]| -> f64 {
        (v.iter()
            .zip(y0)
            .map(|(&vi, &yi)| (vi / sk(yi)).as_f64().powi(2))
            .sum::<f64>()
            / n)
            .sqrt()
    };
    let d0 = norm(y0);
    let d1 = norm(f0);
    let mut h0 = if d0 < 1e-10 || d1 < 1e-10 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(h_max.as_f64());
    let h0t = T::of(h0);
    let y1: Vec<T> = y0.iter().zip(f0).map(|(&y, &f)| y + h0t * f).collect();
    let mut f1 = vec![T::zero(); y0.len()];
    rhs(t0 + h0t, &y1, &mut f1);
    let diff: Vec<T> = f1.iter().zip(f0).map(|(&a, &b)| a - b).collect();
    let d2 = norm(&diff) / h0;
    let dm = d1.max(d2);
    let h1 = if dm <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / dm).powf(1.0 / 5.0) };
    T::of((100.0 * h0).min(h1).min(h_max.as_f64()))
}

/// Dormand–Prince 5(4) with PI step-size control and 4th-order dense output.
///
/// When `cfg.adaptive` is false the span is covered with uniform steps of
/// `cfg.step` and no error control, which is how the convergence order is
/// measured.
pub fn integrate_dopri5<T, F>(
    problem: &OdeProblem<T, F>,
    cfg: &SolverConfig<T>,
    sample_times: &[T],
) -> Result<Solution<T>>
where
    T: Scalar,
    F: Fn(T, &[T], &mut [T]),
{
    cfg.validate()?;
    problem.check(sample_times)?;

    let (t0, t1) = problem.t_span;
    let n = problem.y0.len();
    let rhs = &problem.rhs;
    let mut out = Solution {
        times: Vec::with_capacity(sample_times.len()),
        states: Vec::with_capacity(sample_times.len()),
        step_count: 0,
        rejected_steps: 0,
        status: Status::Ok,
        last_valid_t: t0,
    };

    let mut y = problem.y0.clone();
    let mut k: Vec<Vec<T>> = vec![vec![T::zero(); n]; 7];
    rhs(t0, &y, &mut k[0]);
    if !all_finite(&y) || !all_finite(&k[0]) {
        out.status = Status::NonfiniteState;
        return Ok(out);
    }

    let mut next = 0;
    while next < sample_times.len() && sample_times[next] <= t0 {
        out.times.push(sample_times[next]);
        out.states.push(y.clone());
        next += 1;
    }

    let span = t1 - t0;
    let fixed_steps = (!cfg.adaptive).then(|| uniform_steps(span, cfg.step));
    let mut h = match fixed_steps {
        Some(m) => span / T::from_usize(m).unwrap(),
        None => initial_step(rhs, t0, &y, &k[0], cfg, span),
    };
    let mut controller = Controller::new();
    let mut last_rejected = false;
    let mut t = t0;
    let mut stage = vec![T::zero(); n];
    let mut y_new = vec![T::zero(); n];
    let mut err = vec![T::zero(); n];
    let mut attempts = 0usize;

    while t < t1 {
        if attempts >= cfg.max_steps {
            out.status = Status::MaxStepsExceeded;
            return Ok(out);
        }
        attempts += 1;

        let last = match fixed_steps {
            Some(m) => out.step_count + 1 == m,
            None => (t + T::of(1.01) * h) >= t1,
        };
        if last {
            h = t1 - t;
        }

        for s in 1..7 {
            for j in 0..n {
                let mut acc = T::zero();
                for (i, ki) in k.iter().enumerate().take(s) {
                    acc += T::of(A[s][i]) * ki[j];
                }
                stage[j] = y[j] + h * acc;
            }
            let ts = if s >= 5 { t + h } else { t + T::of(C[s]) * h };
            rhs(ts, &stage, &mut k[s]);
        }
        // Stage 6 input is the fifth-order solution (FSAL).
        y_new.copy_from_slice(&stage);
        for j in 0..n {
            let mut acc = T::zero();
            for (i, ki) in k.iter().enumerate() {
                acc += T::of(E[i]) * ki[j];
            }
            err[j] = h * acc;
        }

        if !all_finite(&y_new) || !all_finite(&k[6]) {
            out.status = Status::NonfiniteState;
            return Ok(out);
        }

        let (accepted, h_next) = match fixed_steps {
            Some(_) => (true, h.as_f64()),
            None => {
                let e = error_norm(&err, &y, &y_new, cfg.rtol, cfg.atol);
                controller.propose(e, h.as_f64(), last_rejected)
            }
        };

        if !accepted {
            out.rejected_steps += 1;
            last_rejected = true;
            h = T::of(h_next);
            continue;
        }
        last_rejected = false;
        out.step_count += 1;
        let t_new = if last { t1 } else { t + h };

        if next < sample_times.len() && sample_times[next] <= t_new {
            let dense = DenseStep::new(&y, &y_new, &k, h);
            while next < sample_times.len() && sample_times[next] <= t_new {
                let s = sample_times[next];
                let state = if s == t_new { y_new.clone() } else { dense.eval((s - t) / h) };
                out.times.push(s);
                out.states.push(state);
                next += 1;
            }
        }

        std::mem::swap(&mut y, &mut y_new);
        k.swap(0, 6);
        t = t_new;
        out.last_valid_t = t;
        if fixed_steps.is_none() {
            h = T::of(h_next);
        }
    }
    Ok(out)
}

struct DenseStep<T> {
    r: [Vec<T>; 5],
}

impl<T: Scalar> DenseStep<T> {
    fn new(y: &[T], y_new: &[T], k: &[Vec<T>], h: T) -> Self {
        let n = y.len();
        let mut r: [Vec<T>; 5] = std::array::from_fn(|_| vec![T::zero(); n]);
        for j in 0..n {
            let dy = y_new[j] - y[j];
            let bspl = h * k[0][j] - dy;
            let mut d = T::zero();
            for (i, ki) in k.iter().enumerate() {
                d += T::of(D[i]) * ki[j];
            }
            r[0][j] = y[j];
            r[1][j] = dy;
            r[2][j] = bspl;
            r[3][j] = dy - h * k[6][j] - bspl;
            r[4][j] = h * d;
        }
        Self { r }
    }

    fn eval(&self, theta: T) -> Vec<T> {
        let th1 = T::one() - theta;
        (0..self.r[0].len())
            .map(|j| {
                self.r[0][j]
                    + theta
                        * (self.r[1][j]
                            + th1 * (self.r[2][j] + theta * (self.r[3][j] + th1 * self.r[4][j])))
            })
            .collect()
    }
}
