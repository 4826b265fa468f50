//! Ground-truth degradation model for an NMC traction battery.
//!
//! Calendar loss follows square-root-of-time kinetics scaled by an
//! SoC-dependent pre-exponential factor and an Arrhenius temperature term.
//! Cycle loss integrates an empirical current/temperature/capacity
//! expression over daily driving. All losses are in percent of nominal
//! capacity and time is in days.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{integrate, OdeProblem, SolverConfig};
use crate::scalar::Scalar;

/// Physical and empirical constants of the degradation model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct BatteryParams<T: Scalar> {
    /// J/mol
    pub activation_energy: T,
    /// J/(mol K)
    pub gas_constant: T,
    /// K
    pub temperature_k: T,
    /// Ah
    pub nominal_capacity_ah: T,
    /// V
    pub nominal_voltage_v: T,
    pub a: T,
    pub b: T,
    pub c: T,
    pub d: T,
    pub e: T,
    pub odo_km_per_day: T,
    /// Wh/km
    pub energy_wh_per_km: T,
    pub driving_hours_per_day: T,
    /// Percent in [0, 100], held constant.
    pub soc_setpoint: T,
}

impl<T: Scalar> Default for BatteryParams<T> {
    fn default() -> Self {
        Self {
            activation_energy: T::of(24500.0),
            gas_constant: T::of(8.314),
            temperature_k: T::of(298.0),
            nominal_capacity_ah: T::of(176.4),
            nominal_voltage_v: T::of(350.4),
            a: T::of(8.61e-6),
            b: T::of(-5.13e-3),
            c: T::of(7.63e-1),
            d: T::of(-6.7e-3),
            e: T::of(2.35),
            odo_km_per_day: T::of(60.0),
            energy_wh_per_km: T::of(180.0),
            driving_hours_per_day: T::of(2.0),
            soc_setpoint: T::of(90.0),
        }
    }
}

impl<T: Scalar> BatteryParams<T> {
    pub fn validate(&self) -> Result<()> {
        let zero = T::zero();
        if !(self.temperature_k > zero) {
            return Err(Error::Domain(format!("temperature must be > 0 K, got {}", self.temperature_k)));
        }
        if !(self.nominal_capacity_ah > zero) {
            return Err(Error::Domain("nominal capacity must be > 0".into()));
        }
        if !(self.nominal_voltage_v > zero) {
            return Err(Error::Domain("nominal voltage must be > 0".into()));
        }
        if !(self.driving_hours_per_day > zero && self.driving_hours_per_day <= T::of(24.0)) {
            return Err(Error::Domain("driving hours per day must lie in (0, 24]".into()));
        }
        check_soc(self.soc_setpoint)?;
        Ok(())
    }

    /// `exp(-E_a / (R T_b))`.
    pub fn arrhenius_factor(&self) -> T {
        (-self.activation_energy / (self.gas_constant * self.temperature_k)).exp()
    }

    /// Calendar loss coefficient `f(SoC) / 2 * exp(-E_a / (R T_b))`, the
    /// factor multiplying `t^(-1/2)`.
    pub fn calendar_coefficient(&self) -> Result<T> {
        Ok(pre_exponential_f(self.soc_setpoint)? / T::of(2.0) * self.arrhenius_factor())
    }

    /// Calendar degradation rate in percent/day.
    pub fn calendar_rate(&self, t_days: T) -> Result<T> {
        if !(t_days >= T::one()) {
            return Err(Error::Domain(format!("calendar rate needs t >= 1 day, got {t_days}")));
        }
        Ok(self.calendar_coefficient()? / t_days.sqrt())
    }

    /// Mean discharge current in A: daily driving energy over driving time
    /// and nominal voltage.
    pub fn discharge_current(&self) -> T {
        self.odo_km_per_day * self.energy_wh_per_km / self.driving_hours_per_day / self.nominal_voltage_v
    }

    /// Per-second cycle-loss integrand at capacity `capacity_ah`.
    ///
    /// The temperature quadratic is negative between roughly 286 K and
    /// 309 K with the default coefficients; its magnitude is used.
    pub fn cycle_integrand(&self, temperature_k: T, current_a: T, capacity_ah: T) -> T {
        let tb = temperature_k;
        let quad = (self.a * tb * tb + self.b * tb + self.c).abs();
        let arg = (self.d * tb + self.e) / capacity_ah * current_a;
        quad * arg.exp() * current_a / (capacity_ah * T::of(3600.0))
    }

    /// Cycle-loss rate in percent/day at explicit operating conditions:
    /// the per-second integrand times the driving seconds in a day.
    pub fn cycle_rate_at(&self, temperature_k: T, current_a: T, capacity_ah: T) -> T {
        self.cycle_integrand(temperature_k, current_a, capacity_ah)
            * self.driving_hours_per_day
            * T::of(3600.0)
    }

    /// Cycle-loss rate in percent/day at the current capacity `capacity_ah`.
    pub fn cycle_rate(&self, capacity_ah: T) -> T {
        self.cycle_rate_at(self.temperature_k, self.discharge_current(), capacity_ah)
    }

    /// Capacity from cumulative loss: `Q_nom * (100 - q_total) / 100`.
    pub fn capacity_from_loss(&self, q_total: T) -> T {
        self.nominal_capacity_ah * (T::of(100.0) - q_total) / T::of(100.0)
    }

    /// Total degradation rate of the ground-truth model.
    pub fn total_rate(&self, t_days: T, q_total: T) -> Result<T> {
        Ok(self.calendar_rate(t_days)? + self.cycle_rate(self.capacity_from_loss(q_total)))
    }
}

fn check_soc<T: Scalar>(soc: T) -> Result<()> {
    if soc >= T::zero() && soc <= T::of(100.0) {
        Ok(())
    } else {
        Err(Error::Domain(format!("SoC must lie in [0, 100], got {soc}")))
    }
}

/// Piecewise-quadratic pre-exponential factor of the calendar model.
///
/// At the shared boundaries (50 and 70) the lower branch applies.
pub fn pre_exponential_f<T: Scalar>(soc: T) -> Result<T> {
    check_soc(soc)?;
    let (a, b, c) = if soc <= T::of(50.0) {
        (-1.04, 89.72, 1224.6)
    } else if soc <= T::of(70.0) {
        (10.35, -1083.6, 31447.0)
    } else {
        (2.64, -409.55, 22035.0)
    };
    Ok(T::of(a) * soc * soc + T::of(b) * soc + T::of(c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DegradationState<T: Scalar> {
    pub q_cal: T,
    pub q_cycl: T,
    pub q_total: T,
    pub soh: T,
    pub capacity_ah: T,
}

impl<T: Scalar> DegradationState<T> {
    pub fn from_parts(q_cal: T, q_cycl: T, params: &BatteryParams<T>) -> Self {
        Self::from_total(q_cal, q_cycl, q_cal + q_cycl, params)
    }

    /// State known only through its total loss (hybrid models); the split is
    /// reported as all-calendar.
    pub fn from_loss(q_total: T, params: &BatteryParams<T>) -> Self {
        Self::from_total(q_total, T::zero(), q_total, params)
    }

    /// As [`Self::from_loss`] for a cell known only by its nominal capacity.
    pub fn from_loss_nominal(q_total: T, nominal_capacity_ah: T) -> Self {
        let hundred = T::of(100.0);
        Self {
            q_cal: q_total,
            q_cycl: T::zero(),
            q_total,
            soh: hundred - q_total,
            capacity_ah: nominal_capacity_ah * (hundred - q_total) / hundred,
        }
    }

    fn from_total(q_cal: T, q_cycl: T, q_total: T, params: &BatteryParams<T>) -> Self {
        Self {
            q_cal,
            q_cycl,
            q_total,
            soh: T::of(100.0) - q_total,
            capacity_ah: params.capacity_from_loss(q_total),
        }
    }
}

/// Time-indexed degradation states (days).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Scalar> {
    pub times: Vec<T>,
    pub states: Vec<DegradationState<T>>,
}

pub const TRAJECTORY_HEADER: [&str; 6] = ["t_days", "q_cal", "q_cycl", "q_total", "soh", "capacity_ah"];

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<(T, &DegradationState<T>)> {
        self.times.last().copied().zip(self.states.last())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(TRAJECTORY_HEADER)?;
        for (t, s) in self.times.iter().zip(&self.states) {
            w.write_record([t, &s.q_cal, &s.q_cycl, &s.q_total, &s.soh, &s.capacity_ah].map(|v| v.as_f64().to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.iter().ne(TRAJECTORY_HEADER) {
            return Err(Error::Data(format!("unexpected trajectory header: {header:?}")));
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        for row in r.records() {
            let row = row?;
            let v: Vec<T> = row
                .iter()
                .map(|f| f.parse::<f64>().map(T::of).map_err(|e| Error::Data(e.to_string())))
                .collect::<Result<_>>()?;
            times.push(v[0]);
            states.push(DegradationState { q_cal: v[1], q_cycl: v[2], q_total: v[3], soh: v[4], capacity_ah: v[5] });
        }
        Ok(Self { times, states })
    }
}

/// Daily grid from `t_start` to `t_end`; the end point is always included.
pub fn daily_grid<T: Scalar>(t_start: T, t_end: T) -> Vec<T> {
    let mut out = Vec::new();
    let mut i = 0usize;
    loop {
        let t = t_start + T::from_usize(i).unwrap();
        if t >= t_end {
            break;
        }
        out.push(t);
        i += 1;
    }
    out.push(t_end);
    out
}

/// Solver used for ground-truth trajectories: quarter-day RK4.
///
/// The `t^(-1/2)` kinetics make one-day steps accurate only to a few parts
/// per million near `t = 1`; a quarter day is converged well below that.
pub fn reference_solver<T: Scalar>() -> SolverConfig<T> {
    SolverConfig::rk4(T::of(0.25))
}

/// Integrates calendar and cycle loss jointly over `t_span` and samples the
/// result daily. Capacity in the cycle term follows the accumulated loss.
pub fn simulate<T: Scalar>(params: &BatteryParams<T>, t_span: (T, T), solver: &SolverConfig<T>) -> Result<Trajectory<T>> {
    params.validate()?;
    let (t0, t1) = t_span;
    if !(t0 >= T::one() && t0 < t1) {
        return Err(Error::Domain(format!("simulation span must satisfy 1 <= start < end, got ({t0}, {t1})")));
    }
    let coeff = params.calendar_coefficient()?;
    let p = *params;
    let problem = OdeProblem::new(
        move |t: T, y: &[T], dy: &mut [T]| {
            dy[0] = coeff / t.sqrt();
            dy[1] = p.cycle_rate(p.capacity_from_loss(y[0] + y[1]));
        },
        vec![T::zero(), T::zero()],
        (t0, t1),
    );
    let samples = daily_grid(t0, t1);
    let sol = integrate(&problem, solver, &samples)?.into_result()?;
    let states = sol.states.iter().map(|y| DegradationState::from_parts(y[0], y[1], params)).collect();
    Ok(Trajectory { times: sol.times, states })
}

/// Closed-form calendar loss from day 1: `coeff * 2 (sqrt(T) - 1)`.
pub fn calendar_loss_closed_form<T: Scalar>(params: &BatteryParams<T>, t_days: T) -> Result<T> {
    Ok(params.calendar_coefficient()? * T::of(2.0) * (t_days.sqrt() - T::one()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn table_points() {
        let table = [
            (0.0, 1224.6),
            (10.0, 2017.8),
            (20.0, 2603.0),
            (30.0, 2980.2),
            (40.0, 3149.4),
            (50.0, 3110.6),
            (60.0, 3691.0),
            (70.0, 6310.0),
            (80.0, 6167.0),
            (90.0, 6559.5),
            (100.0, 7480.0),
        ];
        for (soc, f) in table {
            let v: f64 = pre_exponential_f(soc).unwrap();
            assert!((v - f).abs() < 0.1, "soc {soc}: {v} vs {f}");
        }
    }

    #[test]
    fn soc_out_of_range_is_domain_error() {
        assert!(matches!(pre_exponential_f(-0.1_f64), Err(Error::Domain(_))));
        assert!(matches!(pre_exponential_f(100.5_f64), Err(Error::Domain(_))));
        assert!(pre_exponential_f(f64::NAN).is_err());
    }

    #[test]
    fn arrhenius_limits() {
        let mut p = BatteryParams::<f64>::default();
        // exp(-24500 / (8.314 * 298)), 30-digit evaluation.
        assert_relative_eq!(p.arrhenius_factor(), 5.074_417_993_528_955e-5, max_relative = 1e-12);
        p.activation_energy = 0.0;
        assert_eq!(p.arrhenius_factor(), 1.0);
        p.activation_energy = 24500.0;
        p.temperature_k = 1e30;
        assert_relative_eq!(p.arrhenius_factor(), 1.0, max_relative = 1e-20);
    }

    #[test]
    fn calendar_rate_examples() {
        let mut p = BatteryParams::<f64>::default();
        assert_relative_eq!(p.calendar_rate(1.0).unwrap(), 0.166_428_224_142_765_9, max_relative = 1e-12);
        assert_relative_eq!(p.calendar_rate(4.0).unwrap(), p.calendar_rate(1.0).unwrap() / 2.0, max_relative = 1e-15);
        p.soc_setpoint = 100.0;
        assert_relative_eq!(p.calendar_rate(1.0).unwrap(), 0.189_783_232_957_982_9, max_relative = 1e-12);
        assert!(matches!(p.calendar_rate(0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn calendar_rate_strictly_decreasing() {
        let p = BatteryParams::<f64>::default();
        let rates: Vec<f64> = (1..2000).map(|t| p.calendar_rate(t as f64).unwrap()).collect();
        assert!(rates.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn discharge_current_examples() {
        let mut p = BatteryParams::<f64>::default();
        assert_relative_eq!(p.discharge_current(), 15.410_958_904_109_589, max_relative = 1e-14);
        p.odo_km_per_day = 120.0;
        assert_relative_eq!(p.discharge_current(), 2.0 * 15.410_958_904_109_589, max_relative = 1e-14);
        p.energy_wh_per_km = 0.0;
        assert_eq!(p.discharge_current(), 0.0);
    }

    #[test]
    fn cycle_rate_examples() {
        let mut p = BatteryParams::<f64>::default();
        assert_relative_eq!(p.cycle_rate(176.4), 2.049_953_186_860_639e-4, max_relative = 1e-10);
        assert_eq!(p.cycle_rate_at(298.0, 0.0, 176.4), 0.0);
        // Vertex of the temperature quadratic at -b / (2a): the magnitude is
        // smallest there.
        let vertex = -p.b / (2.0 * p.a);
        assert_relative_eq!(vertex, 297.909_407_665_505_2, max_relative = 1e-12);
        let at = |t: f64| p.cycle_integrand(t, 15.0, 176.4) / ((p.d * t + p.e) / 176.4 * 15.0).exp();
        assert!(at(vertex) > at(vertex - 0.5) && at(vertex) > at(vertex + 0.5));
        p.energy_wh_per_km = 0.0;
        assert_eq!(p.cycle_rate(176.4), 0.0);
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = BatteryParams::<f64>::default();
        p.driving_hours_per_day = 25.0;
        assert!(p.validate().is_err());
        p = BatteryParams::default();
        p.temperature_k = 0.0;
        assert!(p.validate().is_err());
        p = BatteryParams::default();
        p.soc_setpoint = 101.0;
        assert!(simulate(&p, (1.0, 10.0), &reference_solver()).is_err());
    }

    #[test]
    fn simulate_short_span_is_nearly_flat() {
        let p = BatteryParams::<f64>::default();
        let traj = simulate(&p, (1.0, 1.0 + 1e-6), &reference_solver()).unwrap();
        assert_eq!(traj.len(), 2);
        assert!(traj.states[1].q_total < 1e-6);
    }

    #[test]
    fn simulate_invariants() {
        let p = BatteryParams::<f64>::default();
        let traj = simulate(&p, (1.0, 730.0), &reference_solver()).unwrap();
        assert_eq!(traj.len(), 730);
        assert_eq!(traj.times[0], 1.0);
        for s in &traj.states {
            assert!((s.soh + s.q_total - 100.0).abs() < 1e-12);
            assert!((s.q_total - (s.q_cal + s.q_cycl)).abs() <= 1e-9 * s.q_total.abs().max(1e-12));
            assert_relative_eq!(s.capacity_ah, 176.4 * (100.0 - s.q_total) / 100.0, max_relative = 1e-12);
        }
        assert!(traj.states.windows(2).all(|w| w[1].soh <= w[0].soh && w[1].q_cal >= w[0].q_cal));
    }

    #[test]
    fn simulate_rejects_span_starting_before_day_one() {
        let p = BatteryParams::<f64>::default();
        assert!(matches!(simulate(&p, (0.0, 10.0), &reference_solver()), Err(Error::Domain(_))));
        assert!(simulate(&p, (5.0, 5.0), &reference_solver()).is_err());
    }

    #[test]
    fn trajectory_csv_roundtrip() {
        let p = BatteryParams::<f64>::default();
        let traj = simulate(&p, (1.0, 40.0), &reference_solver()).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("t_days,q_cal,q_cycl,q_total,soh,capacity_ah\n"));
        assert_eq!(Trajectory::read_csv(buf.as_slice()).unwrap(), traj);
    }

    #[test]
    fn single_precision_model() {
        let p = BatteryParams::<f32>::default();
        assert!((p.calendar_rate(1.0).unwrap() - 0.166_428_23).abs() < 1e-6);
        let traj = simulate(&p, (1.0, 365.0), &reference_solver()).unwrap();
        let exact = calendar_loss_closed_form(&BatteryParams::<f64>::default(), 365.0).unwrap();
        assert!((traj.states.last().unwrap().q_cal as f64 - exact).abs() / exact < 1e-4);
    }

    #[test]
    fn daily_grid_includes_fractional_end() {
        assert_eq!(daily_grid(1.0, 3.5), vec![1.0, 2.0, 3.0, 3.5]);
        assert_eq!(daily_grid(1.0, 2.0), vec![1.0, 2.0]);
    }
}
