//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bilevel_core::autodiff::Tape;
use bilevel_core::bilevel::{hypergradient, inner_unroll, BilevelProblem, InnerLoop, Mode};
use bilevel_core::bounds::*;
use bilevel_core::models::{quadratic_losses, QuadraticSpec};
use bilevel_core::tensor::Tensor;
use bilevel_harness::config::{ExperimentConfig, Profile, Task};
use bilevel_harness::gradcheck::{gradcheck, GradcheckSpec};
use bilevel_harness::report::cod_grid;
use bilevel_harness::sweep::{aggregate, cells, run_cells, run_sweep, AggregateRow, Algorithm, Cell, CellResult};

type Outcome = std::result::Result<String, String>;

// 50-digit evaluations of the closed forms, rounded to f64.
const SGD_BETA_ORACLE: f64 = 3.518_104_226_175_904_445_483_890_931_162_7;
const CV_GAP_ORACLE: f64 = 0.214_596_602_628_934_723_963_618_357_029_0;

const SAMPLES: usize = 200;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scalar_problem() -> BilevelProblem {
    BilevelProblem::data_free(Arc::new(quadratic_losses(QuadraticSpec::scalar(2.0)).unwrap())).unwrap()
}

fn gd(steps: usize) -> InnerLoop {
    InnerLoop {
        steps,
        mode: Mode::Gd,
        eta: 0.5,
        nu: 0.0,
        batch: 1,
    }
}

fn hypergradient_closed_form() -> Outcome {
    let p = scalar_problem();
    let lambda = vec![Tensor::matrix(1, 1, vec![2.0]).unwrap()];
    let theta0 = vec![Tensor::matrix(1, 1, vec![0.0]).unwrap()];
    let inner = gd(3);
    let plan = vec![None; 3];
    let hg = hypergradient(&p, &lambda, &theta0, &inner, &plan, p.val_batch()).map_err(|e| e.to_string())?;
    let mut tape = Tape::new();
    let l = vec![tape.leaf(lambda[0].clone())];
    let theta = inner_unroll(&p, &mut tape, &l, &theta0, &inner, &plan).map_err(|e| e.to_string())?;
    let dtheta = tape.gradient(theta[0], &l).map_err(|e| e.to_string())?[0].data()[0];
    let h = hg.grad[0].data()[0];
    let (eh, ed) = (((h - 1.53125) / 1.53125).abs(), ((dtheta - 0.875) / 0.875).abs());
    check(
        eh <= 1e-10 && ed <= 1e-10,
        format!("hypergradient {h} (rel err {eh:.1e}), dθ_K/dλ {dtheta} (rel err {ed:.1e})"),
    )
}

fn hypergradient_finite_differences() -> Outcome {
    let spec = GradcheckSpec {
        task: Task::Reweighting,
        n_train: 8,
        n_val: 4,
        hidden_dim: 8,
        k: 4,
        seed: 0,
    };
    let r = gradcheck(&spec).map_err(|e| e.to_string())?;
    check(
        r.max_rel_err <= 1e-4,
        format!("{} coordinates, max rel err {:.2e} (tol 1e-4)", r.coords, r.max_rel_err),
    )
}

fn bound_values() -> Outcome {
    let sgd = ud_sgd_beta(&BoundInputs {
        c: 1.0,
        l: 1.0,
        gamma: 1.0,
        m: 10,
        s_ell: 2.0,
        t: 100,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let gd = ud_gd_beta(&BoundInputs {
        l: 1.0,
        gamma: 2.0,
        mu: 1.0,
        alpha: 0.1,
        m: 10,
        t: 5,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let hp = gd_hp_bound(
        &BoundInputs {
            m: 100,
            s_ell: 1.0,
            delta: (-2.0f64).exp(),
            ..Default::default()
        },
        0.1,
    )
    .map_err(|e| e.to_string())?;
    let cv = cv_gap_bound(&BoundInputs {
        s_ell: 1.0,
        t: 100,
        m: 50,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let cod = cod_bound(1.0, 4, 16);
    let checks = [
        ("ud_sgd_beta", sgd.value, SGD_BETA_ORACLE),
        ("ud_gd_beta", gd.value, 0.122102),
        ("gd_hp_bound", hp.value, 2.2),
        ("cv_gap_bound", cv.value, CV_GAP_ORACLE),
        ("cod_bound", cod, 1.0),
    ];
    let worst = checks.iter().map(|(_, v, o)| (v - o).abs()).fold(0.0, f64::max);
    let detail = checks
        .iter()
        .map(|(n, v, _)| format!("{n}={v:.6}"))
        .collect::<Vec<_>>()
        .join(" ");
    let valid = sgd.is_valid() && gd.is_valid() && hp.is_valid() && cv.is_valid();
    check(valid && worst <= 1e-6, format!("{detail}, max abs err {worst:.1e}"))
}

fn sgd_value(i: &BoundInputs) -> Option<f64> {
    ud_sgd_beta(i).ok().filter(|r| r.is_valid()).map(|r| r.value)
}

fn gd_value(i: &BoundInputs) -> Option<f64> {
    ud_gd_beta(i).ok().filter(|r| r.is_valid()).map(|r| r.value)
}

fn cv_value(i: &BoundInputs) -> Option<f64> {
    cv_gap_bound(i).ok().filter(|r| r.is_valid()).map(|r| r.value)
}

/// Counts base draws for which some perturbation moves the wrong way or
/// leaves the valid domain. `up` perturbations must raise the value, `down`
/// perturbations must lower it.
fn monotone_violations(
    base: impl Fn(&mut ChaCha8Rng) -> BoundInputs,
    eval: fn(&BoundInputs) -> Option<f64>,
    up: &[fn(&BoundInputs) -> BoundInputs],
    down: &[fn(&BoundInputs) -> BoundInputs],
    seed: u64,
) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..SAMPLES)
        .filter(|_| {
            let i = base(&mut rng);
            let Some(b) = eval(&i) else { return true };
            let bad_up = up.iter().any(|f| eval(&f(&i)).is_none_or(|v| v <= b));
            let bad_down = down.iter().any(|f| eval(&f(&i)).is_none_or(|v| v >= b));
            bad_up || bad_down
        })
        .count()
}

fn bound_monotonicity() -> Outcome {
    let sgd = monotone_violations(
        |r| {
            let m = r.random_range(10..=1000);
            let (l, gamma, s_ell) = (
                r.random_range(0.1..10.0),
                r.random_range(0.1..10.0),
                r.random_range(0.1..10.0),
            );
            let c = r.random_range(0.01..0.85) * s_ell / (2.0 * l * l);
            let mu = r.random_range(0.01..0.99) * (1.0f64 / c).min((1.0 - 1.0 / m as f64) * gamma);
            BoundInputs {
                t: r.random_range(1..=1000),
                m,
                l,
                gamma,
                s_ell,
                c,
                mu,
                ..Default::default()
            }
        },
        sgd_value,
        &[
            |i| BoundInputs { t: i.t + 1, ..*i },
            |i| BoundInputs { l: i.l * 1.05, ..*i },
            |i| BoundInputs {
                gamma: i.gamma * 1.1,
                ..*i
            },
            |i| BoundInputs { mu: i.mu * 0.9, ..*i },
        ],
        &[|i| BoundInputs { m: i.m + 1, ..*i }],
        1,
    );
    let cv = monotone_violations(
        |r| BoundInputs {
            t: r.random_range(2..=100_000),
            m: r.random_range(1..=10_000),
            s_ell: r.random_range(0.1..10.0),
            ..Default::default()
        },
        cv_value,
        &[|i| BoundInputs { t: i.t + 1, ..*i }],
        &[|i| BoundInputs { m: i.m + 1, ..*i }],
        2,
    );
    let gd = monotone_violations(
        |r| {
            let (gamma, alpha) = (r.random_range(0.01..5.0), r.random_range(0.001..0.5));
            BoundInputs {
                t: r.random_range(2..=200),
                m: r.random_range(1..=1000),
                l: r.random_range(0.1..5.0),
                gamma,
                alpha,
                mu: r.random_range(0.01..0.9) * gamma.min(1.0 / alpha),
                ..Default::default()
            }
        },
        gd_value,
        &[
            |i| BoundInputs { t: i.t + 1, ..*i },
            |i| BoundInputs {
                alpha: i.alpha * 1.1,
                ..*i
            },
            |i| BoundInputs { mu: i.mu * 0.9, ..*i },
        ],
        &[],
        3,
    );
    check(
        sgd + cv + gd == 0,
        format!("violations over {SAMPLES} draws each: ud_sgd_beta {sgd}, cv_gap_bound {cv}, ud_gd_beta {gd}"),
    )
}

fn curve(agg: &[AggregateRow], alg: Algorithm, k: usize, mu: f64, nu: f64) -> Vec<&AggregateRow> {
    agg.iter()
        .filter(|r| r.algorithm == alg && r.k == k && r.mu == mu && r.nu == nu)
        .collect()
}

fn min_by(rows: &[&AggregateRow], f: fn(&AggregateRow) -> f64) -> f64 {
    rows.iter().map(|r| f(r)).fold(f64::INFINITY, f64::min)
}

fn tradeoff(agg: &[AggregateRow]) -> Outcome {
    let deep = curve(agg, Algorithm::Ud, 64, 0.0, 0.0);
    let shallow = curve(agg, Algorithm::Ud, 1, 0.0, 0.0);
    let (Some(d), Some(s)) = (deep.last(), shallow.last()) else {
        return Err("missing K=1 or K=64 results".into());
    };
    let test_ratio = d.test_mean / min_by(&deep, |r| r.test_mean);
    let val_ratio = d.val_mean / min_by(&deep, |r| r.val_mean);
    let under = s.val_mean / d.val_mean;
    check(
        test_ratio >= 1.05 && val_ratio <= 1.01 && under >= 1.10,
        format!(
            "K=64 final/min test {test_ratio:.4} (>= 1.05), final/min val {val_ratio:.4} (<= 1.01); \
             K=1/K=64 final val {under:.4} (>= 1.10)"
        ),
    )
}

fn cv_stability(agg: &[AggregateRow]) -> Outcome {
    let rows = curve(agg, Algorithm::Cv, 64, 0.0, 0.0);
    let Some(last) = rows.last() else {
        return Err("missing CV results".into());
    };
    let ratio = last.test_mean / min_by(&rows, |r| r.test_mean);
    check(
        ratio <= 1.02,
        format!("best-so-far test at t={} over its minimum {ratio:.4} (<= 1.02)", last.t),
    )
}

fn final_test(agg: &[AggregateRow], mu: f64, nu: f64) -> f64 {
    curve(agg, Algorithm::Ud, 64, mu, nu)
        .last()
        .map_or(f64::NAN, |r| r.test_mean)
}

fn regularization(baseline: &[AggregateRow], reg: &[AggregateRow]) -> Outcome {
    let base = final_test(baseline, 0.0, 0.0);
    let best_nu = [1e-3, 1e-2]
        .map(|nu| final_test(reg, 0.0, nu))
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let best_mu = [1e-3, 1e-2]
        .map(|mu| final_test(reg, mu, 0.0))
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    check(
        best_nu < base && best_mu < base,
        format!("final test: baseline {base:.4}, best nu {best_nu:.4}, best mu {best_mu:.4}"),
    )
}

fn curse_of_dimensionality() -> Outcome {
    let checks = cod_grid(&[1, 2, 5], &[10, 100, 1000], 1000, 0).map_err(|e| e.to_string())?;
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("d={} T={}", c.d, c.t))
        .collect();
    let slack = checks
        .iter()
        .map(|c| c.inf_f + c.bound + 3.0 * c.stderr - c.mean_min)
        .fold(f64::INFINITY, f64::min);
    check(
        failed.is_empty(),
        format!("{} cells, smallest slack {slack:.2e}, failing {failed:?}", checks.len()),
    )
}

fn same_files(a: &Path, b: &Path) -> std::result::Result<usize, String> {
    let mut n = 0;
    for entry in fs::read_dir(b).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        if name.to_string_lossy().contains("aggregate") {
            continue;
        }
        let (x, y) = (fs::read(a.join(&name)), fs::read(b.join(&name)));
        match (x, y) {
            (Ok(x), Ok(y)) if x == y => n += 1,
            _ => return Err(format!("{name:?} differs")),
        }
    }
    Ok(n)
}

fn determinism(cfg: &ExperimentConfig, first: &Path, scratch: &Path) -> Outcome {
    let mut again = cfg.clone();
    again.seeds = vec![0];
    again.sweep.k = vec![64];
    let mut n = 0;
    for alg in [Algorithm::Ud, Algorithm::Cv] {
        let dir = scratch.join(alg.name());
        run_sweep(&again, alg, &dir, 1).map_err(|e| e.to_string())?;
        n += same_files(first, &dir)?;
    }
    check(n == 2, format!("{n} per-seed CSVs byte-identical on rerun"))
}

fn lipschitz_growth() -> Outcome {
    let p = scalar_problem();
    let probe = LipschitzProbe {
        num_probes: 20,
        radius: 0.05,
        lo: 0.5,
        hi: 2.0,
        seed: 0,
    };
    let est = [1, 2, 4, 8]
        .into_iter()
        .map(|k| estimate_lipschitz_empirical(&p, &gd(k), &probe))
        .collect::<bilevel_core::Result<Vec<f64>>>()
        .map_err(|e| e.to_string())?;
    let nondecreasing = est.windows(2).all(|w| w[1] >= w[0]);
    let ratio = est[3] / est[0];
    let oracle = (1.0 - 0.5f64.powi(8)).powi(2) / 0.25;
    check(
        nondecreasing && ratio >= 0.95 * oracle,
        format!("estimates {est:.4?}, K=8/K=1 ratio {ratio:.4} vs closed form {oracle:.4}"),
    )
}

struct Line {
    id: usize,
    name: &'static str,
    limit: Duration,
    elapsed: Duration,
    outcome: Outcome,
}

impl Line {
    fn passed(&self) -> bool {
        self.outcome.is_ok() && self.elapsed <= self.limit
    }

    fn print(&self) {
        let detail = match &self.outcome {
            Ok(d) | Err(d) => d,
        };
        println!(
            "[{}] {:>2} {} ({:.2}s, limit {}s): {detail}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.elapsed.as_secs_f64(),
            self.limit.as_secs()
        );
    }
}

fn timed(id: usize, name: &'static str, limit_s: u64, f: impl FnOnce() -> Outcome) -> Line {
    let start = Instant::now();
    let outcome = f();
    let line = Line {
        id,
        name,
        limit: Duration::from_secs(limit_s),
        elapsed: start.elapsed(),
        outcome,
    };
    line.print();
    line
}

fn sweep_results(cfg: &ExperimentConfig, alg: Algorithm, dir: &Path) -> std::result::Result<Vec<AggregateRow>, String> {
    run_sweep(cfg, alg, dir, workers())
        .map(|o| o.aggregate)
        .map_err(|e| e.to_string())
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn regularized_cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut base = cfg.clone();
    base.sweep.k = vec![64];
    base.sweep.mu = vec![0.0];
    base.sweep.nu = vec![0.0];
    let template = cells(&base, Algorithm::Ud);
    let mut out = Vec::new();
    for v in [1e-3, 1e-2] {
        for c in &template {
            out.push(Cell { mu: v, ..c.clone() });
            out.push(Cell { nu: v, ..c.clone() });
        }
    }
    out
}

fn main() -> ExitCode {
    let scratch = tempfile::tempdir().expect("temporary directory");
    let cfg = ExperimentConfig::defaults(Task::Reweighting, Profile::Desk);
    let first = scratch.path().join("first");
    let mut ud = Vec::new();
    let lines = vec![
        timed(1, "hypergradient closed form", 1, hypergradient_closed_form),
        timed(
            2,
            "hypergradient finite differences",
            30,
            hypergradient_finite_differences,
        ),
        timed(3, "bound values", 1, bound_values),
        timed(4, "bound monotonicity", 5, bound_monotonicity),
        timed(5, "T/K trade-off", 600, || {
            ud = sweep_results(&cfg, Algorithm::Ud, &first)?;
            tradeoff(&ud)
        }),
        timed(6, "CV does not overfit", 600, || {
            let mut cv_cfg = cfg.clone();
            cv_cfg.sweep.k = vec![64];
            cv_stability(&sweep_results(&cv_cfg, Algorithm::Cv, &first)?)
        }),
        timed(7, "regularization relief", 900, || {
            let problem = cfg.problem().map_err(|e| e.to_string())?;
            let results: Vec<CellResult> =
                run_cells(&problem, &cfg, &regularized_cells(&cfg), workers()).map_err(|e| e.to_string())?;
            regularization(&ud, &aggregate(&results))
        }),
        timed(8, "curse of dimensionality", 60, curse_of_dimensionality),
        timed(9, "determinism", 600, || {
            determinism(&cfg, &first, &scratch.path().join("again"))
        }),
        timed(10, "Lipschitz growth in K", 10, lipschitz_growth),
    ];

    let failed = lines.iter().filter(|l| !l.passed()).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
