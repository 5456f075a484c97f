//! Sweep execution and CSV output.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use bilevel_core::bilevel::{cv_run, ud_run, BilevelProblem, RunTrace};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};

pub const CSV_HEADER: [&str; 9] = [
    "run_id",
    "algorithm",
    "seed",
    "t",
    "K",
    "mu",
    "nu",
    "val_loss",
    "test_loss",
];

pub const AGGREGATE_HEADER: [&str; 10] = [
    "algorithm",
    "K",
    "mu",
    "nu",
    "t",
    "n_seeds",
    "val_loss_mean",
    "val_loss_std",
    "test_loss_mean",
    "test_loss_std",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Ud,
    Cv,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Ud => "ud",
            Algorithm::Cv => "cv",
        }
    }
}

/// One run of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub k: usize,
    pub mu: f64,
    pub nu: f64,
}

impl Cell {
    pub fn run_id(&self) -> String {
        format!(
            "{}-K{}-mu{}-nu{}-seed{}",
            self.algorithm.name(),
            self.k,
            self.mu,
            self.nu,
            self.seed
        )
    }
}

/// Every (K, μ, ν, seed) combination, seeds innermost. CV has no outer
/// decay, so its cells take only μ = 0.
pub fn cells(cfg: &ExperimentConfig, algorithm: Algorithm) -> Vec<Cell> {
    let mus = match algorithm {
        Algorithm::Ud => cfg.sweep.mu.clone(),
        Algorithm::Cv => vec![0.0],
    };
    let mut out = Vec::new();
    for &k in &cfg.sweep.k {
        for &mu in &mus {
            for &nu in &cfg.sweep.nu {
                for &seed in &cfg.seeds {
                    out.push(Cell {
                        algorithm,
                        seed,
                        k,
                        mu,
                        nu,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    /// UD: rows t = 0..=T. CV: best-so-far rows t = 1..=T.
    pub trace: RunTrace,
}

pub fn run_cell(problem: &BilevelProblem, cfg: &ExperimentConfig, cell: &Cell) -> Result<RunTrace> {
    Ok(match cell.algorithm {
        Algorithm::Ud => ud_run(problem, &cfg.ud_config(cell.seed, cell.k, cell.mu, cell.nu))?.trace,
        Algorithm::Cv => cv_run(problem, &cfg.cv_config(cell.seed, cell.k, cell.nu))?
            .trace
            .best_so_far(),
    })
}

/// Run cells on a pool of `workers` threads; results keep the input order.
pub fn run_cells(
    problem: &BilevelProblem,
    cfg: &ExperimentConfig,
    cells: &[Cell],
    workers: usize,
) -> Result<Vec<CellResult>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Config(format!("worker pool: {e}")))?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                Ok(CellResult {
                    cell: cell.clone(),
                    trace: run_cell(problem, cfg, cell)?,
                })
            })
            .collect()
    })
}

/// Create `dir` and check it is writable.
pub fn prepare_out_dir(dir: &Path) -> Result<()> {
    let io = |source| HarnessError::Io {
        path: dir.to_path_buf(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(io)?;
    fs::remove_file(&probe).map_err(io)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |source| HarnessError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_cell_csv(dir: &Path, result: &CellResult) -> Result<PathBuf> {
    let c = &result.cell;
    let id = c.run_id();
    let path = dir.join(format!("{id}.csv"));
    let mut w = csv_writer(&path)?;
    let err = csv_err(&path);
    w.write_record(CSV_HEADER).map_err(&err)?;
    for r in &result.trace.rows {
        w.write_record([
            id.clone(),
            c.algorithm.name().to_string(),
            c.seed.to_string(),
            r.t.to_string(),
            c.k.to_string(),
            c.mu.to_string(),
            c.nu.to_string(),
            r.val_loss.to_string(),
            r.test_loss.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: path.clone(),
        source,
    })?;
    drop(err);
    Ok(path)
}

/// Seed-mean and sample standard deviation of one (K, μ, ν, t) group.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub algorithm: Algorithm,
    pub k: usize,
    pub mu: f64,
    pub nu: f64,
    pub t: usize,
    pub n_seeds: usize,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Group results by (K, μ, ν) in first-seen order and average over seeds at
/// each t present in every member.
pub fn aggregate(results: &[CellResult]) -> Vec<AggregateRow> {
    let mut groups: Vec<(&Cell, Vec<&RunTrace>)> = Vec::new();
    for r in results {
        let c = &r.cell;
        match groups
            .iter_mut()
            .find(|(g, _)| g.algorithm == c.algorithm && g.k == c.k && g.mu == c.mu && g.nu == c.nu)
        {
            Some((_, traces)) => traces.push(&r.trace),
            None => groups.push((c, vec![&r.trace])),
        }
    }
    let mut rows = Vec::new();
    for (c, traces) in groups {
        let len = traces.iter().map(|t| t.rows.len()).min().unwrap_or(0);
        for i in 0..len {
            let vals: Vec<f64> = traces.iter().map(|t| t.rows[i].val_loss).collect();
            let tests: Vec<f64> = traces.iter().map(|t| t.rows[i].test_loss).collect();
            let (val_mean, val_std) = mean_std(&vals);
            let (test_mean, test_std) = mean_std(&tests);
            rows.push(AggregateRow {
                algorithm: c.algorithm,
                k: c.k,
                mu: c.mu,
                nu: c.nu,
                t: traces[0].rows[i].t,
                n_seeds: traces.len(),
                val_mean,
                val_std,
                test_mean,
                test_std,
            });
        }
    }
    rows
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_err(path);
    w.write_record(AGGREGATE_HEADER).map_err(&err)?;
    for r in rows {
        w.write_record([
            r.algorithm.name().to_string(),
            r.k.to_string(),
            r.mu.to_string(),
            r.nu.to_string(),
            r.t.to_string(),
            r.n_seeds.to_string(),
            r.val_mean.to_string(),
            r.val_std.to_string(),
            r.test_mean.to_string(),
            r.test_std.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub results: Vec<CellResult>,
    pub aggregate: Vec<AggregateRow>,
    pub files: Vec<PathBuf>,
}

/// Run every cell of `algorithm`, write one CSV per cell and
/// `<algorithm>-aggregate.csv` into `out_dir`.
pub fn run_sweep(cfg: &ExperimentConfig, algorithm: Algorithm, out_dir: &Path, workers: usize) -> Result<SweepOutput> {
    prepare_out_dir(out_dir)?;
    let problem = cfg.problem()?;
    let cells = cells(cfg, algorithm);
    let results = run_cells(&problem, cfg, &cells, workers)?;
    let mut files = results
        .iter()
        .map(|r| write_cell_csv(out_dir, r))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&results);
    let agg_path = out_dir.join(format!("{}-aggregate.csv", algorithm.name()));
    write_aggregate(&agg_path, &aggregate)?;
    files.push(agg_path);
    Ok(SweepOutput {
        results,
        aggregate,
        files,
    })
}
