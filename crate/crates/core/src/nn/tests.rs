use super::*;
use crate::optim::OptimizerConfig;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn scalar_loss(model: &MlpModel<f64>, x: &Matrix<f64>, mode: Mode, w: &[f64]) -> f64 {
    let out = model.forward(x, mode, None).unwrap().output;
    out.data().iter().zip(w).map(|(o, wi)| o * wi).sum()
}

/// Central-difference gradient of `sum(w * output)` w.r.t. every parameter.
fn fd_param_grad(model: &MlpModel<f64>, x: &Matrix<f64>, mode: Mode, w: &[f64], eps: f64) -> Vec<f64> {
    let mut m = model.clone();
    let base = model.params().to_vec();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + eps;
            m.set_params(&p).unwrap();
            let up = scalar_loss(&m, x, mode, w);
            p[i] = base[i] - eps;
            m.set_params(&p).unwrap();
            let down = scalar_loss(&m, x, mode, w);
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn min_abs_preactivation(model: &MlpModel<f64>, x: &Matrix<f64>) -> f64 {
    let fwd = model.forward(x, Mode::Infer, None).unwrap();
    fwd.layers[..fwd.layers.len() - 1]
        .iter()
        .flat_map(|c| c.pre_act.data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn same_seed_same_params() {
    let layers = mlp_layers(3, &[10, 5, 5], 1, true, 0.1);
    let a = MlpModel::<f64>::init(&layers, 7).unwrap();
    let b = MlpModel::<f64>::init(&layers, 7).unwrap();
    let c = MlpModel::<f64>::init(&layers, 8).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    assert_eq!(a.param_count(), 3 * 10 + 10 + 20 + 10 * 5 + 5 + 10 + 5 * 5 + 5 + 10 + 5 + 1);
}

#[test]
fn empty_layer_list_is_an_error() {
    assert!(MlpModel::<f64>::init(&[], 1).is_err());
    let bad = [LayerSpec::dense(2, 3, Activation::Relu), LayerSpec::dense(4, 1, Activation::Identity)];
    assert!(MlpModel::<f64>::init(&bad, 1).is_err());
    assert!(MlpModel::<f64>::init(&[LayerSpec::dense(0, 1, Activation::Relu)], 1).is_err());
    assert!(MlpModel::<f64>::init(&[LayerSpec::dense(1, 1, Activation::Relu).with_dropout(1.0)], 1).is_err());
}

#[test]
fn he_uniform_variance() {
    // Uniform(-b, b) with b = sqrt(6 / n) has variance 2 / n.
    let layers = [LayerSpec::dense(128, 64, Activation::Relu)];
    let m = MlpModel::<f64>::init(&layers, 3).unwrap();
    let w = &m.params()[..128 * 64];
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
    let expected = 2.0 / 128.0;
    assert!((var - expected).abs() / expected < 0.2, "var {var}");
    assert!(m.params()[128 * 64..].iter().all(|&b| b == 0.0));
}

#[test]
fn zero_network_outputs_zero() {
    let layers = [LayerSpec::dense(3, 4, Activation::Identity), LayerSpec::dense(4, 1, Activation::Identity)];
    let mut m = MlpModel::<f64>::init(&layers, 1).unwrap();
    m.params_mut().iter_mut().for_each(|p| *p = 0.0);
    let out = m.predict(&Matrix::row_vector(&[1.0, -2.0, 3.0])).unwrap();
    assert_eq!(out.data(), &[0.0]);
}

#[test]
fn single_linear_layer_is_affine() {
    let mut m = MlpModel::<f64>::init(&[LayerSpec::dense(2, 2, Activation::Identity)], 1).unwrap();
    m.set_params(&[1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
    let out = m.predict(&Matrix::row_vector(&[1.0, -1.0])).unwrap();
    assert_eq!(out.data(), &[1.0 - 2.0 + 0.5, 3.0 - 4.0 - 0.5]);
}

#[test]
fn input_dimension_is_checked() {
    let m = MlpModel::<f64>::init(&mlp_layers(3, &[4], 1, false, 0.0), 1).unwrap();
    assert!(matches!(m.predict(&Matrix::row_vector(&[1.0])), Err(Error::Dimension { expected: 3, got: 1 })));
}

#[test]
fn infer_mode_is_deterministic() {
    let m = MlpModel::<f64>::init(&mlp_layers(2, &[8, 8], 1, true, 0.3), 5).unwrap();
    let x = Matrix::row_vector(&[0.3, -0.7]);
    let a = m.predict(&x).unwrap();
    let b = m.predict(&x).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let m = MlpModel::<f64>::init(&mlp_layers(1, &[10, 5, 5], 1, false, 0.0), 11).unwrap();
    let x = [0.37, -1.2, 0.9, 2.1, -0.05]
        .iter()
        .map(|&v| Matrix::row_vector(&[v]))
        .find(|x| min_abs_preactivation(&m, x) > 1e-3)
        .expect("an input away from ReLU kinks");
    let fwd = m.forward(&x, Mode::Infer, None).unwrap();
    let g = m.backward(&fwd, &Matrix::row_vector(&[1.0])).unwrap();
    let fd = fd_param_grad(&m, &x, Mode::Infer, &[1.0], 1e-5);
    let worst = g.params.iter().zip(&fd).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max);
    assert!(worst < 1e-4, "max relative error {worst}");

    let eps = 1e-5;
    let f = |v: f64| m.predict(&Matrix::row_vector(&[v])).unwrap().get(0, 0);
    let fd_x = (f(x.get(0, 0) + eps) - f(x.get(0, 0) - eps)) / (2.0 * eps);
    assert!(rel_err(g.input.get(0, 0), fd_x) < 1e-4);
}

#[test]
fn batch_norm_train_mode_gradient_matches_finite_differences() {
    let m = MlpModel::<f64>::init(&mlp_layers(3, &[6, 4], 1, true, 0.0), 2).unwrap();
    let x = Matrix::from_rows(&[
        vec![0.1, -0.4, 1.3],
        vec![1.1, 0.2, -0.3],
        vec![-0.8, 0.9, 0.5],
        vec![0.4, 0.4, -1.2],
        vec![-0.2, -1.1, 0.7],
    ])
    .unwrap();
    let w = [0.3, -1.0, 0.7, 0.2, 1.5];
    let fwd = m.forward(&x, Mode::Train, None).unwrap();
    let g = m.backward(&fwd, &Matrix::column(&w)).unwrap();
    let fd = fd_param_grad(&m, &x, Mode::Train, &w, 1e-6);
    // Biases feeding a batch-norm layer have an exactly zero gradient; the
    // larger floor absorbs finite-difference round-off on those.
    let worst = g.params.iter().zip(&fd).map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-4)).fold(0.0, f64::max);
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let m = MlpModel::<f64>::init(&mlp_layers(2, &[5], 1, true, 0.0), 4).unwrap();
    let x = Matrix::from_rows(&[vec![0.2, 0.3], vec![-0.5, 1.0]]).unwrap();
    let fwd = m.forward(&x, Mode::Train, None).unwrap();
    let g = m.backward(&fwd, &Matrix::zeros(2, 1)).unwrap();
    assert!(g.params.iter().all(|&v| v == 0.0));
    assert!(g.input.data().iter().all(|&v| v == 0.0));
}

#[test]
fn linear_layer_weight_gradient_is_outer_product() {
    let m = MlpModel::<f64>::init(&[LayerSpec::dense(3, 2, Activation::Identity)], 9).unwrap();
    let x = [0.5, -1.5, 2.0];
    let up = [0.25, -3.0];
    let fwd = m.forward(&Matrix::row_vector(&x), Mode::Infer, None).unwrap();
    let g = m.backward(&fwd, &Matrix::row_vector(&up)).unwrap();
    for j in 0..2 {
        for i in 0..3 {
            assert_eq!(g.params[j * 3 + i], up[j] * x[i]);
        }
        assert_eq!(g.params[6 + j], up[j]);
    }
}

#[test]
fn stale_cache_is_detected() {
    let mut m = MlpModel::<f64>::init(&mlp_layers(1, &[3], 1, false, 0.0), 1).unwrap();
    let fwd = m.forward(&Matrix::row_vector(&[0.5]), Mode::Infer, None).unwrap();
    m.params_mut()[0] += 1.0;
    assert!(matches!(m.backward(&fwd, &Matrix::row_vector(&[1.0])), Err(Error::StaleCache)));
}

#[test]
fn dropout_expectation_matches_inference() {
    // A linear network keeps the inverted-dropout expectation exact.
    let layers = [
        LayerSpec::dense(2, 16, Activation::Identity).with_dropout(0.2),
        LayerSpec::dense(16, 1, Activation::Identity),
    ];
    let m = MlpModel::<f64>::init(&layers, 21).unwrap();
    let x = Matrix::row_vector(&[0.8, -0.3]);
    let infer = m.predict(&x).unwrap().get(0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let draws = 20_000;
    let mut sum = 0.0;
    for _ in 0..draws {
        let mask = m.sample_mask(1, &mut rng);
        sum += m.forward(&x, Mode::Frozen, Some(&mask)).unwrap().output.get(0, 0);
    }
    let mean = sum / draws as f64;
    assert!((mean - infer).abs() / infer.abs() < 0.02, "{mean} vs {infer}");
}

#[test]
fn dropout_masks_are_scaled_and_shared() {
    let m = MlpModel::<f64>::init(&mlp_layers(1, &[50], 1, false, 0.5), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = m.sample_mask(1, &mut rng);
    let first = mask.layer(0).unwrap();
    assert!(first.iter().all(|&v| v == 0.0 || v == 2.0));
    assert!(mask.layer(1).is_none());
    let batch = Matrix::from_rows(&[vec![0.5], vec![0.5]]).unwrap();
    let out = m.forward(&batch, Mode::Frozen, Some(&mask)).unwrap().output;
    assert_eq!(out.get(0, 0), out.get(1, 0));
    let infer = m.forward(&batch, Mode::Infer, Some(&mask)).unwrap().output;
    assert_eq!(infer, m.predict(&batch).unwrap());
}

#[test]
fn batch_norm_inference_is_affine_in_running_stats() {
    let layers = [LayerSpec::dense(1, 1, Activation::Identity).with_batch_norm()];
    let mut m = MlpModel::<f64>::init(&layers, 1).unwrap();
    // w, b, gamma, beta
    m.set_params(&[2.0, 0.5, 1.5, -0.25]).unwrap();
    m.set_running_stats(vec![Some(RunningStats { mean: vec![1.0], var: vec![4.0] })]).unwrap();
    let inv = 1.0 / (4.0 + BN_EPS).sqrt();
    let slope = 1.5 * 2.0 * inv;
    let intercept = 1.5 * (0.5 - 1.0) * inv - 0.25;
    for x in [-2.0, 0.0, 0.7, 3.0] {
        let y = m.predict(&Matrix::row_vector(&[x])).unwrap().get(0, 0);
        assert!((y - (slope * x + intercept)).abs() < 1e-12);
    }
}

#[test]
fn running_stats_track_batches() {
    let layers = [LayerSpec::dense(1, 1, Activation::Identity).with_batch_norm()];
    let mut m = MlpModel::<f64>::init(&layers, 1).unwrap();
    m.set_params(&[1.0, 0.0, 1.0, 0.0]).unwrap();
    let x = Matrix::column(&[1.0, 2.0, 3.0, 4.0, 5.0]);
    for _ in 0..200 {
        m.update_running_stats(&x).unwrap();
    }
    let rs = m.running_stats()[0].as_ref().unwrap();
    assert!((rs.mean[0] - 3.0).abs() < 1e-6);
    assert!((rs.var[0] - 2.5).abs() < 1e-6);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let mut m = MlpModel::<f64>::init(&mlp_layers(7, &[32, 64, 32], 1, true, 0.15), 77).unwrap();
    m.update_running_stats(&Matrix::from_rows(&[vec![0.1; 7], vec![0.3; 7], vec![-1.0; 7]]).unwrap()).unwrap();
    m.params_mut()[3] = 0.1 + 0.2;
    let back = MlpModel::<f64>::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(m.layers(), back.layers());
    assert_eq!(m.running_stats(), back.running_stats());
    assert_eq!(m.seed(), back.seed());
    assert!(m.params().iter().zip(back.params()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let m32 = MlpModel::<f32>::init(&mlp_layers(1, &[10, 5, 5], 1, false, 0.0), 5).unwrap();
    let back32 = MlpModel::<f32>::from_json(&m32.to_json().unwrap()).unwrap();
    assert!(m32.params().iter().zip(back32.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let m = MlpModel::<f64>::init(&mlp_layers(1, &[3], 1, false, 0.0), 1).unwrap();
    let json = m.to_json().unwrap();
    assert!(MlpModel::<f64>::from_json(&json.replace("soh-mlp", "other")).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&json).unwrap();
    v["model"]["params"].as_array_mut().unwrap().pop();
    assert!(MlpModel::<f64>::from_json(&v.to_string()).is_err());
}

#[test]
fn regression_fits_a_line() {
    let mut m = MlpModel::<f64>::init(&mlp_layers(1, &[8], 1, false, 0.0), 3).unwrap();
    let xs: Vec<f64> = (0..40).map(|i| -1.0 + i as f64 / 20.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x + 0.2).collect();
    let fit = RegressionFit { optimizer: OptimizerConfig::adam(0.01), iterations: 2000, output_scale: 1.0, relative: false };
    let mse = fit_regression(&mut m, &Matrix::column(&xs), &ys, &fit).unwrap();
    assert!(mse < 1e-4, "mse {mse}");
}

#[test]
fn single_precision_network() {
    let m = MlpModel::<f32>::init(&mlp_layers(1, &[10, 5, 5], 1, true, 0.1), 2).unwrap();
    let fwd = m.forward(&Matrix::row_vector(&[0.5_f32]), Mode::Infer, None).unwrap();
    let g = m.backward(&fwd, &Matrix::row_vector(&[1.0])).unwrap();
    assert!(g.params.iter().all(|v| v.is_finite()));
}
