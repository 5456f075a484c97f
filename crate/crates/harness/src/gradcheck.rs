//! Hypergradient check against central finite differences.

use std::fmt;

use bilevel_core::bilevel::{
    hypergradient, sample_candidate, unrolled_outer_loss, BilevelProblem, InnerLoop, Mode, RunStreams, Sampler,
};
use bilevel_core::data::{inject_label_noise, split, synth_blobs, SplitSpec};
use bilevel_core::tensor::Tensor;

use crate::config::{ExperimentConfig, Profile, Task};
use crate::error::{HarnessError, Result};

/// Largest λ the checker accepts; each coordinate costs two unrolls.
pub const MAX_LAMBDA_ENTRIES: usize = 200;

/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSpec {
    pub task: Task,
    pub n_train: usize,
    pub n_val: usize,
    pub hidden_dim: usize,
    pub k: usize,
    pub seed: u64,
}

impl GradcheckSpec {
    /// Small default sizes for `task`.
    pub fn small(task: Task) -> Self {
        Self {
            task,
            n_train: 8,
            n_val: 4,
            hidden_dim: 8,
            k: if task == Task::ScalarQuadratic { 3 } else { 4 },
            seed: 0,
        }
    }

    /// Tolerance on the maximum relative error: quadratics are exact under
    /// central differences, networks are not.
    pub fn tolerance(&self) -> f64 {
        match self.task {
            Task::ScalarQuadratic => 1e-10,
            _ => 1e-4,
        }
    }

    fn step(&self) -> f64 {
        match self.task {
            Task::ScalarQuadratic => 1e-3,
            _ => 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub task: Task,
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub tol: f64,
    pub tape: Vec<f64>,
    pub finite_diff: Vec<f64>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "task: {:?}", self.task)?;
        writeln!(f, "lambda coordinates: {}", self.coords)?;
        writeln!(
            f,
            "max relative error: {:e} (coordinate {}; tape {:e}, finite difference {:e})",
            self.max_rel_err,
            self.worst_coord,
            self.tape.get(self.worst_coord).copied().unwrap_or(0.0),
            self.finite_diff.get(self.worst_coord).copied().unwrap_or(0.0)
        )?;
        writeln!(f, "tolerance: {:e}", self.tol)?;
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

fn build(spec: &GradcheckSpec) -> Result<(BilevelProblem, Vec<Tensor>, InnerLoop)> {
    let mut cfg = ExperimentConfig::defaults(spec.task, Profile::Desk);
    cfg.model.hidden_dim = spec.hidden_dim;
    let mut rng = RunStreams::new(spec.seed).sampler;
    match spec.task {
        Task::ScalarQuadratic => {
            let problem = cfg.problem()?;
            let lambda = problem.losses.init_lambda(&mut rng);
            let inner = InnerLoop {
                steps: spec.k,
                mode: Mode::Gd,
                eta: 0.5,
                nu: 0.0,
                batch: 1,
            };
            Ok((problem, lambda, inner))
        }
        Task::Reweighting | Task::FeatureLearning => {
            cfg.model.feature_dim = 3;
            let per_class = spec.n_train + spec.n_val + 4;
            let full = synth_blobs(3, 4, per_class, 1.5, spec.seed)?;
            let (train, val, test) = split(
                &full,
                &SplitSpec {
                    n_train: spec.n_train,
                    n_val: spec.n_val,
                    n_test: 4,
                    seed: spec.seed,
                },
            )?;
            let train = inject_label_noise(&train, 0.3, spec.seed)?;
            let losses = cfg.losses(train.input_dim, train.num_classes, train.len())?;
            let problem = BilevelProblem::new(train.examples, val.examples, test.examples, losses)?;
            let lambda = match spec.task {
                Task::Reweighting => {
                    sample_candidate(&Sampler::Gaussian { std: Some(1.0) }, problem.losses.as_ref(), &mut rng)?
                }
                _ => problem.losses.init_lambda(&mut rng),
            };
            let inner = InnerLoop {
                steps: spec.k,
                mode: Mode::Gd,
                eta: 0.3,
                nu: 0.0,
                batch: 1,
            };
            Ok((problem, lambda, inner))
        }
    }
}

/// Compare the tape hypergradient of the full-validation outer loss with
/// central differences, coordinate by coordinate.
pub fn check_problem(
    problem: &BilevelProblem,
    lambda: &[Tensor],
    inner: &InnerLoop,
    seed: u64,
    h: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let coords: usize = lambda.iter().map(Tensor::len).sum();
    if coords > MAX_LAMBDA_ENTRIES {
        return Err(HarnessError::Config(format!(
            "gradcheck supports at most {MAX_LAMBDA_ENTRIES} lambda entries, got {coords}"
        )));
    }
    let mut streams = RunStreams::new(seed);
    let theta0 = problem.losses.init_theta(&mut streams.init);
    let plan = inner.plan(problem.train.len(), &mut streams.inner);
    let batch = problem.val_batch();
    let hg = hypergradient(problem, lambda, &theta0, inner, &plan, batch)?;
    let tape: Vec<f64> = hg.grad.iter().flat_map(|g| g.data().to_vec()).collect();
    let mut fd = Vec::with_capacity(coords);
    for (p, part) in lambda.iter().enumerate() {
        for i in 0..part.len() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut l = lambda.to_vec();
                l[p].data_mut()[i] += delta;
                Ok(unrolled_outer_loss(problem, &l, &theta0, inner, &plan, batch)?)
            };
            fd.push((shifted(h)? - shifted(-h)?) / (2.0 * h));
        }
    }
    Ok((tape, fd))
}

pub fn gradcheck(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    let (problem, lambda, inner) = build(spec)?;
    let (tape, fd) = check_problem(&problem, &lambda, &inner, spec.seed, spec.step())?;
    let (worst_coord, max_rel_err) = tape
        .iter()
        .zip(&fd)
        .map(|(&a, &b)| rel_err(a, b))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradcheckReport {
        task: spec.task,
        coords: tape.len(),
        max_rel_err,
        worst_coord,
        tol: spec.tolerance(),
        tape,
        finite_diff: fd,
    })
}
