use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-feature affine map `z = (x - mean) / scale`.
///
/// Features with zero spread get a unit scale, so constant channels map to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Standardizer<T: Scalar> {
    pub mean: Vec<T>,
    pub scale: Vec<T>,
}

impl<T: Scalar> Standardizer<T> {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![T::zero(); dim], scale: vec![T::one(); dim] }
    }

    /// Fits mean and population standard deviation over `rows`.
    pub fn fit(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::EmptySeries)?;
        let n = T::from_usize(rows.len()).unwrap();
        let mut mean = vec![T::zero(); dim];
        for r in rows {
            if r.len() != dim {
                return Err(Error::Dimension { expected: dim, got: r.len() });
            }
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); dim];
        for r in rows {
            for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .zip(&mean)
            .map(|(s, &m)| {
                let sd = (s / n).sqrt();
                // Round-off spread on a constant channel is not a real scale.
                if sd > T::of(1e-12) * m.abs().max(T::one()) { sd } else { T::one() }
            })
            .collect();
        let out = Self { mean, scale };
        out.validate()?;
        Ok(out)
    }

    /// Fits a single feature.
    pub fn fit_1d(values: &[T]) -> Result<Self> {
        Self::fit(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.scale.len() {
            return Err(Error::Dimension { expected: self.mean.len(), got: self.scale.len() });
        }
        if self.mean.iter().any(|m| !m.is_finite()) || self.scale.iter().any(|s| !(s.is_finite() && *s > T::zero())) {
            return Err(Error::Config("standardizer needs finite means and positive scales".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, i: usize, x: T) -> T {
        (x - self.mean[i]) / self.scale[i]
    }

    pub fn apply_row(&self, x: &[T], out: &mut [T]) {
        for i in 0..x.len() {
            out[i] = self.apply(i, x[i]);
        }
    }

    pub fn invert(&self, i: usize, z: T) -> T {
        z * self.scale[i] + self.mean[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitted_features_have_zero_mean_unit_variance() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 3.0, (i * i) as f64]).collect();
        let s = Standardizer::fit(&rows).unwrap();
        assert_eq!(s.scale[1], 1.0);
        for f in [0, 2] {
            let z: Vec<f64> = rows.iter().map(|r| s.apply(f, r[f])).collect();
            let m = z.iter().sum::<f64>() / 50.0;
            let v = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
        assert_eq!(s.apply(1, 3.0), 0.0);
        assert!((s.invert(2, s.apply(2, 7.5)) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(Standardizer::<f64>::fit(&[]).is_err());
    }
}
