use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::physics::{reference_solver, simulate, BatteryParams, Trajectory};
use crate::scalar::Scalar;
use crate::train::TrainData;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SyntheticConfig<T: Scalar> {
    pub t_span: (T, T),
    /// Standard deviation of the additive noise on `q_total`, in percent.
    pub noise_sigma: T,
    pub seed: u64,
}

impl<T: Scalar> SyntheticConfig<T> {
    pub fn new(t_end: T, seed: u64) -> Self {
        Self { t_span: (T::one(), t_end), noise_sigma: T::of(0.20), seed }
    }

    pub fn noiseless(mut self) -> Self {
        self.noise_sigma = T::zero();
        self
    }
}

/// Daily ground-truth losses with and without measurement noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData<T: Scalar> {
    pub times: Vec<T>,
    pub noisy: Vec<T>,
    pub clean: Vec<T>,
    pub trajectory: Trajectory<T>,
}

impl<T: Scalar> SyntheticData<T> {
    pub fn noisy_data(&self) -> Result<TrainData<T>> {
        TrainData::new(self.times.clone(), self.noisy.clone())
    }

    pub fn clean_data(&self) -> Result<TrainData<T>> {
        TrainData::new(self.times.clone(), self.clean.clone())
    }
}

/// Simulates the ground truth daily over the span and adds i.i.d. Gaussian
/// noise to every `q_total` sample.
pub fn generate_synthetic<T: Scalar>(params: &BatteryParams<T>, cfg: &SyntheticConfig<T>) -> Result<SyntheticData<T>> {
    let sigma = cfg.noise_sigma.as_f64();
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let trajectory = simulate(params, cfg.t_span, &reference_solver())?;
    let clean: Vec<T> = trajectory.states.iter().map(|s| s.q_total).collect();
    let noisy = if sigma == 0.0 {
        clean.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        clean.iter().map(|&q| q + T::of(normal.sample(&mut rng))).collect()
    };
    Ok(SyntheticData { times: trajectory.times.clone(), noisy, clean, trajectory })
}
