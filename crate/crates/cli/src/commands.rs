//! One function per subcommand. Each writes its artifacts under `--out`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::json;
use soh_core::data::{generate_synthetic, SyntheticConfig, SERIES_HEADER};
use soh_core::physics::{reference_solver, simulate, BatteryParams, Trajectory};
use soh_core::train::{mse, TrainData};
use soh_core::ude::compare_nn1;

use crate::dataset::{self, Dataset, DEFAULT_TRAIN_END};
use crate::error::{CliError, CliResult};
use crate::models::{self, AnyModel};
use crate::settings::{DataSource, Settings};
use crate::svg::{Plot, Series};

/// Default end of simulations and forecasts: ten years.
pub const TEN_YEARS: f64 = 3650.0;

fn prepare_out(settings: &Settings) -> CliResult<()> {
    fs::create_dir_all(&settings.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", settings.out.display())))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn soh_points(times: &[f64], losses: &[f64]) -> Vec<(f64, f64)> {
    times.iter().zip(losses).map(|(t, q)| (*t, 100.0 - q)).collect()
}

fn trajectory_points(traj: &Trajectory<f64>) -> Vec<(f64, f64)> {
    traj.times.iter().zip(&traj.states).map(|(t, s)| (*t, s.soh)).collect()
}

pub fn simulate_cmd(settings: &Settings) -> CliResult<()> {
    prepare_out(settings)?;
    let end = settings.tspan_end_days.unwrap_or(TEN_YEARS);
    let params = BatteryParams::default();
    let traj = simulate(&params, (1.0, end), &reference_solver())?;
    traj.save_csv(settings.out.join("trajectory.csv"))?;
    Plot {
        title: "Simulated state of health",
        x_label: "time (days)",
        y_label: "SoH (%)",
        series: vec![Series { label: "SoH", points: trajectory_points(&traj) }],
        log_y: false,
    }
    .save(&settings.out.join("trajectory.svg"))?;
    let (t, s) = traj.last().expect("simulation has samples");
    println!("simulated {} days: SoH {:.4}% (calendar {:.4}%, cycle {:.4}%) at day {t}", end, s.soh, s.q_cal, s.q_cycl);
    Ok(())
}

pub fn generate_cmd(settings: &Settings) -> CliResult<()> {
    if settings.data != DataSource::Synthetic {
        return Err(CliError::Usage("generate produces synthetic data; drop --data".into()));
    }
    prepare_out(settings)?;
    let end = settings.tspan_end_days.unwrap_or(TEN_YEARS);
    let params = BatteryParams::default();
    let cfg = SyntheticConfig { noise_sigma: settings.noise_sigma, ..SyntheticConfig::new(end, settings.seed) };
    let data = generate_synthetic(&params, &cfg)?;
    let mut w = csv::Writer::from_path(settings.out.join("synthetic.csv"))?;
    w.write_record(SERIES_HEADER)?;
    for (t, q) in data.times.iter().zip(&data.noisy) {
        w.write_record([*t, 100.0 - q, params.capacity_from_loss(*q)].map(|v| v.to_string()))?;
    }
    w.flush()?;
    data.trajectory.save_csv(settings.out.join("ground_truth.csv"))?;
    Plot {
        title: "Synthetic state of health",
        x_label: "time (days)",
        y_label: "SoH (%)",
        series: vec![
            Series { label: "noisy", points: soh_points(&data.times, &data.noisy) },
            Series { label: "ground truth", points: soh_points(&data.times, &data.clean) },
        ],
        log_y: false,
    }
    .save(&settings.out.join("synthetic.svg"))?;
    println!("generated {} daily samples (noise sd {})", data.times.len(), settings.noise_sigma);
    Ok(())
}

fn write_predictions(path: &Path, times: &[f64], targets: &[f64], predictions: &[f64]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t_days", "target_q_total", "predicted_q_total"])?;
    for ((t, y), p) in times.iter().zip(targets).zip(predictions) {
        w.write_record([t, y, p].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn train_cmd(settings: &Settings) -> CliResult<()> {
    prepare_out(settings)?;
    let data = dataset::load(settings, None)?;
    let model = models::build(settings, settings.model, &data, settings.seed)?;
    let cfg = models::train_config(settings, &data.train, settings.iterations, settings.seed);
    let trained = models::fit(model, &data.train, &cfg)?;
    let run = &trained.run;
    let out = &settings.out;

    run.save_loss_csv(out.join("loss.csv"))?;
    trained.best.save(&out.join("model.json"))?;
    trained.model.save(&out.join("model_final.json"))?;
    let solver = models::solver(settings);
    let predictions = trained.best.rollout(data.train.start(), &data.train.times, &solver)?;
    write_predictions(&out.join("predictions.csv"), &data.train.times, &data.train.targets, &predictions)?;
    let eval_mse = mse(&predictions, &data.train.targets)?;
    Plot {
        title: "Training fit",
        x_label: "time (days)",
        y_label: "SoH (%)",
        series: vec![
            Series { label: "data", points: soh_points(&data.train.times, &data.train.targets) },
            Series { label: "prediction", points: soh_points(&data.train.times, &predictions) },
        ],
        log_y: false,
    }
    .save(&out.join("predictions.svg"))?;
    Plot {
        title: "Training loss",
        x_label: "iteration",
        y_label: "MSE",
        series: vec![Series { label: "MSE", points: run.loss_history.iter().map(|&(i, l)| (i as f64, l)).collect() }],
        log_y: true,
    }
    .save(&out.join("loss.svg"))?;
    write_json(
        &out.join("run.json"),
        &json!({
            "model": settings.model.name(),
            "data": data.source,
            "time_offset_days": data.offset,
            "train_window": [data.train.times[0], data.train_end()],
            "run": run,
            "checkpoint_mse": eval_mse,
        }),
    )?;
    println!(
        "trained {} on {} data: initial MSE {:.6}, final MSE {:.6}, best MSE {:.6} at iteration {} ({:.1}s)",
        settings.model.name(),
        data.source,
        run.initial_mse,
        run.final_mse,
        run.best_mse,
        run.best_iteration,
        run.wall_time_secs
    );
    if let Some(msg) = &run.aborted {
        return Err(CliError::Numerical(format!("training stopped early at {msg}")));
    }
    Ok(())
}

fn load_checkpoint(settings: &Settings, data: &Dataset) -> CliResult<AnyModel> {
    AnyModel::load(&settings.checkpoint_path())?.adapt_to(data)
}

/// Model state at the end of the training window, integrated from the first
/// observation.
fn state_at_train_end(model: &AnyModel, data: &Dataset, settings: &Settings) -> CliResult<f64> {
    let states = model.rollout(data.train.start(), &data.train.times, &models::solver(settings))?;
    Ok(*states.last().unwrap())
}

pub fn forecast_cmd(settings: &Settings) -> CliResult<()> {
    prepare_out(settings)?;
    let horizon = match (&settings.data, settings.horizon_end_days) {
        (_, Some(h)) => h,
        (DataSource::Synthetic, None) => TEN_YEARS,
        (DataSource::Csv(_), None) => f64::NAN,
    };
    let data = dataset::load(settings, horizon.is_finite().then_some(horizon))?;
    let horizon = if horizon.is_finite() { horizon } else { data.last_time() };
    let train_end = data.train_end();
    if horizon < train_end {
        return Err(CliError::Usage(format!("forecast horizon {horizon} precedes the end of training {train_end}")));
    }
    let model = load_checkpoint(settings, &data)?;
    let solver = models::solver(settings);
    let q_end = state_at_train_end(&model, &data, settings)?;
    let traj = model.forecast((train_end, q_end), horizon, &solver)?;
    if traj.states.iter().any(|s| !s.q_total.is_finite()) {
        return Err(CliError::Numerical("forecast is not finite".into()));
    }
    traj.save_csv(settings.out.join("forecast.csv"))?;

    let test = data.test.as_ref().map(|t| t.window(f64::NEG_INFINITY, horizon)).transpose().ok().flatten();
    let mut test_mse = None;
    let mut series = vec![Series { label: "training data", points: soh_points(&data.train.times, &data.train.targets) }];
    if let Some(test) = &test {
        let preds = model.rollout((train_end, q_end), &test.times, &solver)?;
        let m = mse(&preds, &test.targets)?;
        if !m.is_finite() {
            return Err(CliError::Numerical("test-window MSE is not finite".into()));
        }
        write_predictions(&settings.out.join("forecast_test.csv"), &test.times, &test.targets, &preds)?;
        series.push(Series { label: "test data", points: soh_points(&test.times, &test.targets) });
        test_mse = Some(m);
    }
    series.push(Series { label: "forecast", points: trajectory_points(&traj) });
    Plot { title: "Forecast", x_label: "time (days)", y_label: "SoH (%)", series, log_y: false }
        .save(&settings.out.join("forecast.svg"))?;
    let (_, last) = traj.last().expect("forecast has samples");
    write_json(
        &settings.out.join("forecast.json"),
        &json!({
            "model": model.kind().name(),
            "data": data.source,
            "train_end": train_end,
            "horizon_end": horizon,
            "soh_at_horizon": last.soh,
            "test_mse": test_mse,
            "test_points": test.as_ref().map_or(0, |t| t.len()),
        }),
    )?;
    match test_mse {
        Some(m) => println!("forecast to day {horizon}: SoH {:.4}%; test MSE {m:.6} over {} points", last.soh, test.unwrap().len()),
        None => println!("forecast to day {horizon}: SoH {:.4}%", last.soh),
    }
    Ok(())
}

pub fn compare_nn1_cmd(settings: &Settings) -> CliResult<()> {
    prepare_out(settings)?;
    let model = match AnyModel::load(&settings.checkpoint_path())? {
        AnyModel::Ude(m) => m,
        AnyModel::Node(_) => return Err(CliError::Usage("compare-nn1 needs a hybrid (ude) checkpoint".into())),
    };
    let end = settings.tspan_end_days.unwrap_or(DEFAULT_TRAIN_END);
    let grid: Vec<f64> = (1..=end.floor() as usize).map(|d| d as f64).collect();
    let cmp = compare_nn1(&model, &grid, (30.0, end))?;
    let mut w = csv::Writer::from_path(settings.out.join("nn1_comparison.csv"))?;
    w.write_record(["t_days", "learned", "analytic", "rel_error"])?;
    for r in &cmp.rows {
        w.write_record([r.t, r.learned, r.analytic, r.rel_error].map(|v| v.to_string()))?;
    }
    w.flush()?;
    Plot {
        title: "Learned time factor against t^-1/2",
        x_label: "time (days)",
        y_label: "factor",
        series: vec![
            Series { label: "learned", points: cmp.rows.iter().map(|r| (r.t, r.learned)).collect() },
            Series { label: "t^-1/2", points: cmp.rows.iter().map(|r| (r.t, r.analytic)).collect() },
        ],
        log_y: false,
    }
    .save(&settings.out.join("nn1_comparison.svg"))?;
    write_json(
        &settings.out.join("nn1_summary.json"),
        &json!({ "window": [cmp.window.0, cmp.window.1], "median_rel_error": cmp.median_rel_error, "rows": cmp.rows.len() }),
    )?;
    println!("median relative error over [30, {end}]: {:.6}", cmp.median_rel_error);
    Ok(())
}

pub fn eval_cmd(settings: &Settings) -> CliResult<()> {
    prepare_out(settings)?;
    let data = dataset::load(settings, settings.horizon_end_days)?;
    let model = load_checkpoint(settings, &data)?;
    let all = data.all()?;
    let solver = models::solver(settings);
    let preds = model.rollout(all.start(), &all.times, &solver)?;
    write_predictions(&settings.out.join("eval_predictions.csv"), &all.times, &all.targets, &preds)?;
    let n_train = data.train.len();
    let mut rows: Vec<(&str, usize, f64)> = vec![("train", n_train, mse(&preds[..n_train], &data.train.targets)?)];
    if let Some(test) = &data.test {
        rows.push(("test", test.len(), mse(&preds[n_train..], &test.targets)?));
    }
    if let Some(clean) = &data.clean {
        let clean = TrainData::new(clean.times[..all.len()].to_vec(), clean.targets[..all.len()].to_vec())?;
        rows.push(("clean", clean.len(), mse(&preds, &clean.targets)?));
    }
    let mut w = csv::Writer::from_path(settings.out.join("eval.csv"))?;
    w.write_record(["split", "points", "mse"])?;
    let mut stdout = std::io::stdout().lock();
    for (name, n, m) in &rows {
        w.write_record([name.to_string(), n.to_string(), m.to_string()])?;
        writeln!(stdout, "{name}: MSE {m:.6} over {n} points")?;
    }
    w.flush()?;
    if rows.iter().any(|r| !r.2.is_finite()) {
        return Err(CliError::Numerical("evaluation produced a non-finite MSE".into()));
    }
    Ok(())
}
