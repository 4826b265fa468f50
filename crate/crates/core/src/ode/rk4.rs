use super::{all_finite, uniform_steps, OdeProblem, Solution, SolverConfig, Status};
use crate::error::Result;
use crate::scalar::Scalar;

/// Classic fixed-step fourth-order Runge–Kutta.
///
/// The span is divided into `ceil(span / step)` uniform steps. Samples that
/// fall between grid points are filled by cubic Hermite interpolation using
/// the states and derivatives at both ends of the step.
pub fn integrate_rk4<T, F>(
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
    let steps = uniform_steps(t1 - t0, cfg.step);
    let h = (t1 - t0) / T::from_usize(steps).unwrap();
    let half = h / T::of(2.0);
    let sixth = h / T::of(6.0);

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
    let mut f0 = vec![T::zero(); n];
    rhs(t0, &y, &mut f0);
    if !all_finite(&f0) || !all_finite(&y) {
        out.status = Status::NonfiniteState;
        return Ok(out);
    }

    let mut next = 0;
    while next < sample_times.len() && sample_times[next] <= t0 {
        out.times.push(sample_times[next]);
        out.states.push(y.clone());
        next += 1;
    }

    let mut k2 = vec![T::zero(); n];
    let mut k3 = vec![T::zero(); n];
    let mut k4 = vec![T::zero(); n];
    let mut f1 = vec![T::zero(); n];
    let mut tmp = vec![T::zero(); n];
    let mut y_new = vec![T::zero(); n];

    for i in 0..steps {
        let t = t0 + T::from_usize(i).unwrap() * h;
        let t_new = if i + 1 == steps { t1 } else { t0 + T::from_usize(i + 1).unwrap() * h };

        for j in 0..n {
            tmp[j] = y[j] + half * f0[j];
        }
        rhs(t + half, &tmp, &mut k2);
        for j in 0..n {
            tmp[j] = y[j] + half * k2[j];
        }
        rhs(t + half, &tmp, &mut k3);
        for j in 0..n {
            tmp[j] = y[j] + h * k3[j];
        }
        rhs(t_new, &tmp, &mut k4);
        for j in 0..n {
            y_new[j] = y[j] + sixth * (f0[j] + T::of(2.0) * (k2[j] + k3[j]) + k4[j]);
        }
        rhs(t_new, &y_new, &mut f1);
        out.step_count += 1;

        if !all_finite(&y_new) || !all_finite(&f1) {
            out.status = Status::NonfiniteState;
            return Ok(out);
        }

        while next < sample_times.len() && sample_times[next] <= t_new {
            let s = sample_times[next];
            let state = if s == t_new {
                y_new.clone()
            } else {
                hermite(t, h, &y, &f0, &y_new, &f1, s)
            };
            out.times.push(s);
            out.states.push(state);
            next += 1;
        }

        std::mem::swap(&mut y, &mut y_new);
        std::mem::swap(&mut f0, &mut f1);
        out.last_valid_t = t_new;
    }
    Ok(out)
}

/// Cubic Hermite interpolant on `[t, t + h]`.
pub(crate) fn hermite<T: Scalar>(t: T, h: T, y0: &[T], f0: &[T], y1: &[T], f1: &[T], s: T) -> Vec<T> {
    let th = (s - t) / h;
    let th2 = th * th;
    let th3 = th2 * th;
    let two = T::of(2.0);
    let three = T::of(3.0);
    let h00 = two * th3 - three * th2 + T::one();
    let h10 = th3 - two * th2 + th;
    let h01 = three * th2 - two * th3;
    let h11 = th3 - th2;
    (0..y0.len())
        .map(|j| h00 * y0[j] + h10 * h * f0[j] + h01 * y1[j] + h11 * h * f1[j])
        .collect()
}
