use super::{Matrix, MlpModel, Mode};
use crate::error::{Error, Result};
use crate::optim::{self, OptimizerConfig, OptimizerState};
use crate::scalar::Scalar;

/// Full-batch supervised regression of a single-output network.
#[derive(Debug, Clone, Copy)]
pub struct RegressionFit<T: Scalar> {
    pub optimizer: OptimizerConfig<T>,
    pub iterations: usize,
    /// The fitted function is `output_scale * net(x)`.
    pub output_scale: T,
    /// Minimize squared relative error instead of squared error.
    pub relative: bool,
}

/// Fits `model` to `(inputs, targets)` and returns the final loss.
///
/// Runs in frozen mode without dropout, so the fit is deterministic.
pub fn fit_regression<T: Scalar>(
    model: &mut MlpModel<T>,
    inputs: &Matrix<T>,
    targets: &[T],
    fit: &RegressionFit<T>,
) -> Result<T> {
    fit.optimizer.validate()?;
    if model.out_dim() != 1 {
        return Err(Error::Dimension { expected: 1, got: model.out_dim() });
    }
    if inputs.rows() != targets.len() || targets.is_empty() {
        return Err(Error::Dimension { expected: inputs.rows(), got: targets.len() });
    }
    let n = T::from_usize(targets.len()).unwrap();
    let weights: Vec<T> = targets
        .iter()
        .map(|&y| if fit.relative { T::one() / (y * y).max(T::epsilon()) } else { T::one() })
        .collect();
    let mut state = OptimizerState::new(model.param_count());
    let mut grad = vec![T::zero(); model.param_count()];
    let mut params = model.params().to_vec();

    let loss_and_grad = |model: &MlpModel<T>, grad: Option<&mut [T]>| -> Result<T> {
        let fwd = model.forward(inputs, Mode::Frozen, None)?;
        let mut upstream = Matrix::zeros(targets.len(), 1);
        let mut loss = T::zero();
        for (i, (&y, &w)) in targets.iter().zip(&weights).enumerate() {
            let r = fit.output_scale * fwd.output.get(i, 0) - y;
            loss += w * r * r;
            upstream.set(i, 0, T::of(2.0) * w * r * fit.output_scale / n);
        }
        if let Some(g) = grad {
            model.backward_into(&fwd, &upstream, g)?;
        }
        Ok(loss / n)
    };

    for _ in 0..fit.iterations {
        grad.iter_mut().for_each(|g| *g = T::zero());
        loss_and_grad(model, Some(&mut grad))?;
        optim::step(&fit.optimizer, &mut state, &mut params, &grad)?;
        model.set_params(&params)?;
    }
    loss_and_grad(model, None)
}
