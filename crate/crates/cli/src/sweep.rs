//! Grid sweep over timespans and optimizer settings on a bounded pool.

use std::collections::BTreeMap;
use std::fs;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;
use soh_core::optim::{sweep_grid, GridPoint, OptimizerKind};

use crate::dataset::{self, Dataset};
use crate::error::{CliError, CliResult};
use crate::models;
use crate::settings::{DataSource, Settings};

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "SOH_WORKERS";

pub const SWEEP_HEADER: [&str; 8] = ["timespan_end", "optimizer", "lr", "iterations", "loss", "seed", "best", "status"];

#[derive(Debug, Clone, Copy)]
pub struct Cell {
    pub timespan_end: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub timespan_end: f64,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub iterations: usize,
    pub loss: f64,
    pub seed: u64,
    pub best: bool,
    pub status: String,
    pub wall_time_secs: f64,
}

pub fn workers() -> CliResult<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Timespans x optimizer grid, with iteration budgets scaled and at most
/// `budget` cells drawn without replacement (kept in grid order).
pub fn cells(settings: &Settings) -> Vec<Cell> {
    let grid: Vec<GridPoint<f64>> = sweep_grid();
    let mut all = Vec::with_capacity(settings.timespans.len() * grid.len());
    for &end in &settings.timespans {
        for g in &grid {
            // The grid position offsets the seed, so a cell's run does not
            // depend on which other cells are drawn.
            let index = all.len();
            all.push(Cell {
                timespan_end: end,
                optimizer: g.optimizer.kind,
                lr: g.optimizer.lr,
                iterations: ((g.iterations as f64 * settings.iteration_scale).round() as usize).max(1),
                seed: settings.seed.wrapping_add(index as u64),
            });
        }
    }
    if let Some(budget) = settings.budget {
        if budget < all.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            let mut picked: Vec<usize> = (0..all.len()).collect();
            picked.shuffle(&mut rng);
            picked.truncate(budget);
            picked.sort_unstable();
            return picked.into_iter().map(|i| all[i]).collect();
        }
    }
    all
}

fn run_cell(settings: &Settings, data: &Dataset, cell: &Cell) -> Row {
    let clock = Instant::now();
    let cell_settings = Settings { optimizer: cell.optimizer, lr: cell.lr, ..settings.clone() };
    let result = models::build(&cell_settings, settings.model, data, cell.seed).and_then(|model| {
        let cfg = models::train_config(&cell_settings, &data.train, cell.iterations, cell.seed);
        models::fit(model, &data.train, &cfg)
    });
    let (loss, status) = match result {
        Ok(t) => match t.run.aborted {
            None => (t.run.final_mse, "ok".to_string()),
            Some(msg) => (t.run.final_mse, format!("aborted: {msg}")),
        },
        Err(e) => (f64::NAN, format!("failed: {e}")),
    };
    Row {
        timespan_end: cell.timespan_end,
        optimizer: cell.optimizer,
        lr: cell.lr,
        iterations: cell.iterations,
        loss,
        seed: cell.seed,
        best: false,
        status,
        wall_time_secs: clock.elapsed().as_secs_f64(),
    }
}

/// Marks one row per timespan: least loss among completed runs, ties to the
/// lower learning rate and then to fewer iterations.
pub fn mark_best(rows: &mut [Row]) {
    let mut best: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        if r.status != "ok" || !r.loss.is_finite() {
            continue;
        }
        let key = r.timespan_end.to_bits();
        let better = match best.get(&key) {
            None => true,
            Some(&j) => {
                let b = &rows[j];
                (r.loss, r.lr, r.iterations) < (b.loss, b.lr, b.iterations)
            }
        };
        if better {
            best.insert(key, i);
        }
    }
    for r in rows.iter_mut() {
        r.best = false;
    }
    for i in best.into_values() {
        rows[i].best = true;
    }
}

pub fn sweep_cmd(settings: &Settings) -> CliResult<()> {
    if settings.data != DataSource::Synthetic {
        return Err(CliError::Usage("sweep runs on synthetic data over its timespans".into()));
    }
    fs::create_dir_all(&settings.out)?;
    let cells = cells(settings);
    let mut datasets: BTreeMap<u64, Dataset> = BTreeMap::new();
    for &end in &settings.timespans {
        let s = Settings { tspan_end_days: Some(end), ..settings.clone() };
        datasets.insert(end.to_bits(), dataset::load(&s, None)?);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers()?)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))?;
    let mut rows: Vec<Row> =
        pool.install(|| cells.par_iter().map(|c| run_cell(settings, &datasets[&c.timespan_end.to_bits()], c)).collect());
    mark_best(&mut rows);

    write_sweep_csv(&settings.out.join("sweep.csv"), &rows)?;
    let timing: Vec<_> = rows
        .iter()
        .map(|r| json!({ "timespan_end": r.timespan_end, "optimizer": r.optimizer.name(), "lr": r.lr, "iterations": r.iterations, "seed": r.seed, "wall_time_secs": r.wall_time_secs }))
        .collect();
    fs::write(settings.out.join("sweep_timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    println!("swept {} cells ({} not completed)", rows.len(), failed);
    for r in rows.iter().filter(|r| r.best) {
        println!("best for {}: {} lr {} x{} -> {:.6}", r.timespan_end, r.optimizer, r.lr, r.iterations, r.loss);
    }
    Ok(())
}

pub fn write_sweep_csv(path: &std::path::Path, rows: &[Row]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.timespan_end.to_string(),
            r.optimizer.name().to_string(),
            r.lr.to_string(),
            r.iterations.to_string(),
            r.loss.to_string(),
            r.seed.to_string(),
            (if r.best { "1" } else { "0" }).to_string(),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a sweep CSV back into rows (wall time is not stored there).
#[cfg(test)]
pub fn read_sweep_csv(path: &std::path::Path) -> CliResult<Vec<Row>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(SWEEP_HEADER) {
        return Err(CliError::Data(format!("{}: not a sweep report", path.display())));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let num = |i: usize| rec[i].parse::<f64>().map_err(|e| CliError::Data(e.to_string()));
            Ok(Row {
                timespan_end: num(0)?,
                optimizer: rec[1].parse().map_err(|e: soh_core::Error| CliError::Data(e.to_string()))?,
                lr: num(2)?,
                iterations: rec[3].parse().map_err(|e: std::num::ParseIntError| CliError::Data(e.to_string()))?,
                loss: num(4)?,
                seed: rec[5].parse().map_err(|e: std::num::ParseIntError| CliError::Data(e.to_string()))?,
                best: &rec[6] == "1",
                status: rec[7].to_string(),
                wall_time_secs: f64::NAN,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(end: f64, lr: f64, iterations: usize, loss: f64) -> Row {
        Row {
            timespan_end: end,
            optimizer: OptimizerKind::Adam,
            lr,
            iterations,
            loss,
            seed: 0,
            best: false,
            status: "ok".into(),
            wall_time_secs: 0.0,
        }
    }

    #[test]
    fn best_marker_breaks_ties_by_lr_then_iterations() {
        let mut rows = vec![
            row(365.0, 0.1, 10, 1.0),
            row(365.0, 0.01, 20, 1.0),
            row(365.0, 0.01, 10, 1.0),
            row(730.0, 0.1, 10, 2.0),
            row(730.0, 0.1, 10, f64::NAN),
        ];
        mark_best(&mut rows);
        let marks: Vec<bool> = rows.iter().map(|r| r.best).collect();
        assert_eq!(marks, vec![false, false, true, true, false]);
    }

    #[test]
    fn sweep_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let mut rows = vec![row(365.0, 0.1, 10, 0.5), row(365.0, 0.01, 10, f64::NAN)];
        rows[1].status = "failed: solver, diverged".into();
        mark_best(&mut rows);
        write_sweep_csv(&path, &rows).unwrap();
        let back = read_sweep_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].loss, 0.5);
        assert!(back[0].best);
        assert!(back[1].loss.is_nan());
        assert_eq!(back[1].status, rows[1].status);
    }

    #[test]
    fn budget_draws_a_fixed_subset_in_grid_order() {
        let flags = crate::settings::Flags { budget: Some(5), timespans: Some(vec![365.0, 730.0]), ..Default::default() };
        let s = Settings::resolve(&flags).unwrap();
        let a = cells(&s);
        let b = cells(&s);
        assert_eq!(a.len(), 5);
        assert!(a.windows(2).all(|w| w[0].seed < w[1].seed));
        assert_eq!(a.iter().map(|c| c.seed).collect::<Vec<_>>(), b.iter().map(|c| c.seed).collect::<Vec<_>>());
        let full = Settings { budget: None, ..s };
        assert_eq!(cells(&full).len(), 2 * 192);
    }
}
