//! Small feed-forward networks with hand-written reverse-mode gradients.
//!
//! A network is a stack of dense layers, each optionally followed by batch
//! normalization, an activation and inverted dropout. Parameters live in one
//! flat vector so optimizers can treat a model as a single point in
//! parameter space. Per layer the layout is `W (out x in, row-major)`, `b`,
//! then `gamma`, `beta` when batch normalization is enabled.

mod fit;
mod matrix;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use fit::{fit_regression, RegressionFit};
pub use matrix::Matrix;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const MIN_RUNNING_VAR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    pub dropout_rate: f64,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self { in_dim, out_dim, activation, batch_norm: false, dropout_rate: 0.0 }
    }

    pub fn with_batch_norm(mut self) -> Self {
        self.batch_norm = true;
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn param_count(&self) -> usize {
        let bn = if self.batch_norm { 2 * self.out_dim } else { 0 };
        self.in_dim * self.out_dim + self.out_dim + bn
    }

    fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("layer dimensions must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }
}

/// ReLU hidden layers of the given widths and a linear output layer.
///
/// With `batch_norm`, every hidden layer is normalized; `dropout` applies to
/// every hidden layer.
pub fn mlp_layers(in_dim: usize, hidden: &[usize], out_dim: usize, batch_norm: bool, dropout: f64) -> Vec<LayerSpec> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut prev = in_dim;
    for &h in hidden {
        let mut spec = LayerSpec::dense(prev, h, Activation::Relu).with_dropout(dropout);
        spec.batch_norm = batch_norm;
        layers.push(spec);
        prev = h;
    }
    layers.push(LayerSpec::dense(prev, out_dim, Activation::Identity));
    layers
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics in batch norm; dropout with the supplied mask.
    Train,
    /// Running statistics; no dropout.
    Infer,
    /// Running statistics; dropout with the supplied mask. This is the mode
    /// used inside ODE right-hand sides, where one mask is held for a whole
    /// solve.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RunningStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Scaled inverted-dropout masks: entries are `0` or `1 / (1 - p)`.
///
/// A mask with one row is shared by every row of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask<T> {
    rows: usize,
    layers: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> DropoutMask<T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    fn layer(&self, l: usize) -> Option<&[T]> {
        self.layers.get(l).and_then(|m| m.as_deref())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MlpModel<T: Scalar> {
    layers: Vec<LayerSpec>,
    params: Vec<T>,
    running: Vec<Option<RunningStats<T>>>,
    pub mode: Mode,
    seed: u64,
    /// Bumped on every mutation; detects stale forward caches.
    #[serde(skip)]
    version: u64,
}

/// Equality of content; the cache version is bookkeeping.
impl<T: Scalar> PartialEq for MlpModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.params == other.params
            && self.running == other.running
            && self.mode == other.mode
            && self.seed == other.seed
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    input: Matrix<T>,
    /// Value entering the activation (after batch norm when enabled).
    pre_act: Matrix<T>,
    xhat: Option<Matrix<T>>,
    inv_std: Vec<T>,
    batch_stats: bool,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
    mask: Option<Vec<T>>,
}

/// Forward pass output plus the activations needed by [`MlpModel::backward`].
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub output: Matrix<T>,
    layers: Vec<LayerCache<T>>,
    version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub params: Vec<T>,
    pub input: Matrix<T>,
}

impl<T: Scalar> MlpModel<T> {
    /// He-uniform weights (bound `sqrt(6 / in_dim)`), zero biases, unit
    /// batch-norm scale and zero shift.
    pub fn init(layers: &[LayerSpec], seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for (i, spec) in layers.iter().enumerate() {
            spec.validate()?;
            if i > 0 && layers[i - 1].out_dim != spec.in_dim {
                return Err(Error::Dimension { expected: layers[i - 1].out_dim, got: spec.in_dim });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layers.iter().map(LayerSpec::param_count).sum());
        let mut running = Vec::with_capacity(layers.len());
        for spec in layers {
            let bound = (6.0 / spec.in_dim as f64).sqrt();
            for _ in 0..spec.in_dim * spec.out_dim {
                params.push(T::of(rng.random_range(-bound..bound)));
            }
            params.extend(std::iter::repeat(T::zero()).take(spec.out_dim));
            if spec.batch_norm {
                params.extend(std::iter::repeat(T::one()).take(spec.out_dim));
                params.extend(std::iter::repeat(T::zero()).take(spec.out_dim));
                running.push(Some(RunningStats {
                    mean: vec![T::zero(); spec.out_dim],
                    var: vec![T::one(); spec.out_dim],
                }));
            } else {
                running.push(None);
            }
        }
        Ok(Self { layers: layers.to_vec(), params, running, mode: Mode::Train, seed, version: 0 })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.version += 1;
        &mut self.params
    }

    /// Zeroes every parameter of the last layer, so the network starts as
    /// the constant zero function while its hidden layers keep their random
    /// initialization.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.len() - 1;
        let (w, _, _) = self.offsets(last);
        self.params_mut()[w..].iter_mut().for_each(|p| *p = T::zero());
        if let Some(spec) = self.layers.last() {
            if spec.batch_norm {
                // gamma must stay 1 for the layer to remain trainable.
                let (_, _, g) = self.offsets(last);
                let n = spec.out_dim;
                self.params[g..g + n].iter_mut().for_each(|p| *p = T::one());
            }
        }
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension { expected: self.params.len(), got: params.len() });
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    pub fn running_stats(&self) -> &[Option<RunningStats<T>>] {
        &self.running
    }

    pub fn has_dropout(&self) -> bool {
        self.layers.iter().any(|l| l.dropout_rate > 0.0)
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| l.batch_norm)
    }

    fn offsets(&self, l: usize) -> (usize, usize, usize) {
        let start: usize = self.layers[..l].iter().map(LayerSpec::param_count).sum();
        let spec = &self.layers[l];
        let w = start;
        let b = w + spec.in_dim * spec.out_dim;
        let g = b + spec.out_dim;
        (w, b, g)
    }

    /// Samples a dropout mask for a batch of `rows` (use 1 for a mask
    /// shared across the batch).
    pub fn sample_mask<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> DropoutMask<T> {
        let layers = self
            .layers
            .iter()
            .map(|spec| {
                (spec.dropout_rate > 0.0).then(|| {
                    let keep = 1.0 - spec.dropout_rate;
                    let scale = T::of(1.0 / keep);
                    (0..rows * spec.out_dim)
                        .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
                        .collect()
                })
            })
            .collect();
        DropoutMask { rows, layers }
    }

    /// Runs the network on a batch (one sample per row).
    pub fn forward(&self, x: &Matrix<T>, mode: Mode, mask: Option<&DropoutMask<T>>) -> Result<Forward<T>> {
        if x.cols() != self.in_dim() {
            return Err(Error::Dimension { expected: self.in_dim(), got: x.cols() });
        }
        if let Some(m) = mask {
            if m.rows != 1 && m.rows != x.rows() {
                return Err(Error::Dimension { expected: x.rows(), got: m.rows });
            }
        }
        let rows = x.rows();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (l, spec) in self.layers.iter().enumerate() {
            let (w_off, b_off, g_off) = self.offsets(l);
            let (n_in, n_out) = (spec.in_dim, spec.out_dim);
            let w = &self.params[w_off..b_off];
            let b = &self.params[b_off..b_off + n_out];
            let mut z = Matrix::zeros(rows, n_out);
            for r in 0..rows {
                let xr = current.row(r);
                let zr = z.row_mut(r);
                for j in 0..n_out {
                    let wj = &w[j * n_in..(j + 1) * n_in];
                    let mut acc = b[j];
                    for i in 0..n_in {
                        acc += wj[i] * xr[i];
                    }
                    zr[j] = acc;
                }
            }

            let mut cache = LayerCache {
                input: current,
                pre_act: Matrix::zeros(0, 0),
                xhat: None,
                inv_std: Vec::new(),
                batch_stats: false,
                batch_mean: Vec::new(),
                batch_var: Vec::new(),
                mask: None,
            };

            if spec.batch_norm {
                let gamma = &self.params[g_off..g_off + n_out];
                let beta = &self.params[g_off + n_out..g_off + 2 * n_out];
                let (mean, var) = match mode {
                    Mode::Train => {
                        let (m, v) = column_stats(&z);
                        cache.batch_stats = true;
                        cache.batch_mean = m.clone();
                        cache.batch_var = v.clone();
                        (m, v)
                    }
                    Mode::Infer | Mode::Frozen => {
                        let rs = self.running[l].as_ref().expect("batch-norm layer has running stats");
                        (rs.mean.clone(), rs.var.clone())
                    }
                };
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt()).collect();
                let mut xhat = Matrix::zeros(rows, n_out);
                for r in 0..rows {
                    for j in 0..n_out {
                        let xh = (z.get(r, j) - mean[j]) * inv_std[j];
                        xhat.set(r, j, xh);
                        z.set(r, j, gamma[j] * xh + beta[j]);
                    }
                }
                cache.xhat = Some(xhat);
                cache.inv_std = inv_std;
            }

            let mut a = z.clone();
            if spec.activation == Activation::Relu {
                a.data_mut().iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v = T::zero()
                    }
                });
            }
            cache.pre_act = z;

            if mode != Mode::Infer {
                if let Some(m) = mask.and_then(|m| m.layer(l)) {
                    let shared = m.len() == n_out;
                    for r in 0..rows {
                        let mr = if shared { m } else { &m[r * n_out..(r + 1) * n_out] };
                        for (v, &k) in a.row_mut(r).iter_mut().zip(mr) {
                            *v *= k;
                        }
                    }
                    cache.mask = Some(m.to_vec());
                }
            }
            caches.push(cache);
            current = a;
        }
        Ok(Forward { output: current, layers: caches, version: self.version })
    }

    /// Inference-mode forward pass returning only the output.
    pub fn predict(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.forward(x, Mode::Infer, None)?.output)
    }

    /// Forward pass in `self.mode`, sampling a fresh dropout mask per row in
    /// train mode.
    pub fn run<R: Rng + ?Sized>(&self, x: &Matrix<T>, rng: &mut R) -> Result<Forward<T>> {
        match self.mode {
            Mode::Train => {
                let mask = self.sample_mask(x.rows(), rng);
                self.forward(x, Mode::Train, Some(&mask))
            }
            mode => self.forward(x, mode, None),
        }
    }

    /// Reverse pass; see [`MlpModel::backward_into`].
    pub fn backward(&self, fwd: &Forward<T>, upstream: &Matrix<T>) -> Result<Gradients<T>> {
        let mut params = vec![T::zero(); self.params.len()];
        let input = self.backward_into(fwd, upstream, &mut params)?;
        Ok(Gradients { params, input })
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d output`
    /// and returns `d loss / d input`.
    pub fn backward_into(&self, fwd: &Forward<T>, upstream: &Matrix<T>, grad: &mut [T]) -> Result<Matrix<T>> {
        if fwd.version != self.version || fwd.layers.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        if grad.len() != self.params.len() {
            return Err(Error::Dimension { expected: self.params.len(), got: grad.len() });
        }
        if upstream.rows() != fwd.output.rows() || upstream.cols() != fwd.output.cols() {
            return Err(Error::Dimension { expected: fwd.output.cols(), got: upstream.cols() });
        }
        let mut d = upstream.clone();
        for (l, spec) in self.layers.iter().enumerate().rev() {
            let cache = &fwd.layers[l];
            let (w_off, b_off, g_off) = self.offsets(l);
            let (n_in, n_out) = (spec.in_dim, spec.out_dim);
            let rows = d.rows();

            if let Some(m) = &cache.mask {
                let shared = m.len() == n_out;
                for r in 0..rows {
                    let mr = if shared { &m[..] } else { &m[r * n_out..(r + 1) * n_out] };
                    for (v, &k) in d.row_mut(r).iter_mut().zip(mr) {
                        *v *= k;
                    }
                }
            }
            if spec.activation == Activation::Relu {
                for (v, &p) in d.data_mut().iter_mut().zip(cache.pre_act.data()) {
                    if p <= T::zero() {
                        *v = T::zero();
                    }
                }
            }

            if spec.batch_norm {
                let xhat = cache.xhat.as_ref().expect("batch-norm cache");
                for j in 0..n_out {
                    let gamma = self.params[g_off + j];
                    let mut dgamma = T::zero();
                    let mut dbeta = T::zero();
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for r in 0..rows {
                        let dv = d.get(r, j);
                        let xh = xhat.get(r, j);
                        dgamma += dv * xh;
                        dbeta += dv;
                        sum_dxhat += dv * gamma;
                        sum_dxhat_xhat += dv * gamma * xh;
                    }
                    grad[g_off + j] += dgamma;
                    grad[g_off + n_out + j] += dbeta;
                    let inv_std = cache.inv_std[j];
                    if cache.batch_stats {
                        let n = T::from_usize(rows).unwrap();
                        for r in 0..rows {
                            let dxhat = d.get(r, j) * gamma;
                            let dz = inv_std / n * (n * dxhat - sum_dxhat - xhat.get(r, j) * sum_dxhat_xhat);
                            d.set(r, j, dz);
                        }
                    } else {
                        for r in 0..rows {
                            d.set(r, j, d.get(r, j) * gamma * inv_std);
                        }
                    }
                }
            }

            let w = &self.params[w_off..b_off];
            let mut dx = Matrix::zeros(rows, n_in);
            for r in 0..rows {
                let xr = cache.input.row(r);
                let dzr = d.row(r);
                for j in 0..n_out {
                    let dz = dzr[j];
                    if dz == T::zero() {
                        continue;
                    }
                    grad[b_off + j] += dz;
                    let gw = &mut grad[w_off + j * n_in..w_off + (j + 1) * n_in];
                    for i in 0..n_in {
                        gw[i] += dz * xr[i];
                    }
                    let wj = &w[j * n_in..(j + 1) * n_in];
                    let dxr = dx.row_mut(r);
                    for i in 0..n_in {
                        dxr[i] += dz * wj[i];
                    }
                }
            }
            d = dx;
        }
        Ok(d)
    }

    /// Moves running batch-norm statistics toward the statistics of `x`
    /// (momentum 0.1, unbiased variance). Dropout is not applied.
    pub fn update_running_stats(&mut self, x: &Matrix<T>) -> Result<()> {
        if !self.has_batch_norm() || x.rows() == 0 {
            return Ok(());
        }
        let fwd = self.forward(x, Mode::Train, None)?;
        let n = x.rows();
        let correction = if n > 1 { T::from_usize(n).unwrap() / T::from_usize(n - 1).unwrap() } else { T::one() };
        let m = T::of(BN_MOMENTUM);
        for (l, cache) in fwd.layers.iter().enumerate() {
            if let Some(rs) = self.running[l].as_mut() {
                for j in 0..rs.mean.len() {
                    rs.mean[j] = (T::one() - m) * rs.mean[j] + m * cache.batch_mean[j];
                    let v = (T::one() - m) * rs.var[j] + m * cache.batch_var[j] * correction;
                    rs.var[j] = v.max(T::of(MIN_RUNNING_VAR));
                }
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Overrides the running statistics of every batch-norm layer.
    pub fn set_running_stats(&mut self, stats: Vec<Option<RunningStats<T>>>) -> Result<()> {
        if stats.len() != self.running.len() {
            return Err(Error::Dimension { expected: self.running.len(), got: stats.len() });
        }
        for (cur, new) in self.running.iter().zip(&stats) {
            match (cur, new) {
                (Some(c), Some(n)) if c.mean.len() == n.mean.len() && c.var.len() == n.var.len() => {}
                (None, None) => {}
                _ => return Err(Error::Config("running statistics do not match layer layout".into())),
            }
        }
        self.running = stats;
        self.version += 1;
        Ok(())
    }

    fn check_consistency(&self) -> Result<()> {
        let expected: usize = self.layers.iter().map(LayerSpec::param_count).sum();
        if expected != self.params.len() {
            return Err(Error::Checkpoint(format!("{} parameters for a layout needing {expected}", self.params.len())));
        }
        if self.running.len() != self.layers.len() {
            return Err(Error::Checkpoint("running statistics per layer missing".into()));
        }
        for (spec, rs) in self.layers.iter().zip(&self.running) {
            spec.validate()?;
            match rs {
                Some(s) if spec.batch_norm => {
                    if s.mean.len() != spec.out_dim || s.var.len() != spec.out_dim || s.var.iter().any(|&v| !(v > T::zero())) {
                        return Err(Error::Checkpoint("invalid running statistics".into()));
                    }
                }
                None if !spec.batch_norm => {}
                _ => return Err(Error::Checkpoint("running statistics do not match batch-norm flags".into())),
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Checkpoint { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, model: self })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint<Self> = serde_json::from_str(s)?;
        ck.check()?;
        let model = ck.model;
        model.check_consistency()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Validates a deserialized model embedded in a larger checkpoint.
    pub(crate) fn validate_loaded(&self) -> Result<()> {
        self.check_consistency()
    }
}

const CHECKPOINT_FORMAT: &str = "soh-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint<M> {
    format: String,
    version: u32,
    model: M,
}

impl<M> Checkpoint<M> {
    fn check(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", self.format, self.version)));
        }
        Ok(())
    }
}

fn column_stats<T: Scalar>(z: &Matrix<T>) -> (Vec<T>, Vec<T>) {
    let rows = z.rows();
    let n = T::from_usize(rows.max(1)).unwrap();
    let mut mean = vec![T::zero(); z.cols()];
    for r in 0..rows {
        for (m, &v) in mean.iter_mut().zip(z.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![T::zero(); z.cols()];
    for r in 0..rows {
        for ((s, &v), &m) in var.iter_mut().zip(z.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

#[cfg(test)]
mod tests;
