//! Unrolled differentiation (UD) and cross-validation (CV) approximations of
//! the bilevel problem
//!
//! ```text
//! min_λ R̂_val(λ, θ_K(λ))   where   θ_K(λ) ≈ argmin_θ R̂_tr(λ, θ)
//! ```
//!
//! Both algorithms share the same inner loop: `K` steps of (S)GD from a fixed
//! `θ₀`, with update `θ_{k+1} = (1 − ην) θ_k − η ∇_θ φ(λ, θ_k; batch_k)`.
//! UD records that loop on a [`Tape`] and takes gradient steps on λ through
//! it; CV samples candidate λs and keeps the one with the lowest validation
//! loss.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{Batch, Example, LossPair};
use crate::tensor::Tensor;

/// Gradient estimator used at one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full-set gradients.
    Gd,
    /// Mini-batches sampled with replacement.
    Sgd,
}

/// Outer learning-rate schedule, indexed from `t = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant(f64),
    /// `α_t = c / t`.
    Inverse(f64),
}

impl LrSchedule {
    pub fn rate(&self, t: usize) -> f64 {
        match *self {
            LrSchedule::Constant(a) => a,
            LrSchedule::Inverse(c) => c / t.max(1) as f64,
        }
    }

    fn scale(&self) -> f64 {
        match *self {
            LrSchedule::Constant(a) | LrSchedule::Inverse(a) => a,
        }
    }
}

/// Inner optimization shared by UD and CV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerLoop {
    pub steps: usize,
    pub mode: Mode,
    pub eta: f64,
    pub nu: f64,
    pub batch: usize,
}

/// Per-step training mini-batches; `None` means the full training set.
pub type InnerPlan = Vec<Option<Vec<usize>>>;

impl InnerLoop {
    fn validate(&self, n_train: usize) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::contract(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.nu >= 0.0) {
            return Err(Error::contract(format!("nu must be nonnegative, got {}", self.nu)));
        }
        if self.mode == Mode::Sgd && (self.batch == 0 || self.batch > n_train) {
            return Err(Error::contract(format!(
                "inner_batch must be in 1..={n_train}, got {}",
                self.batch
            )));
        }
        Ok(())
    }

    /// Draw the mini-batch indices for all `steps` inner steps.
    pub fn plan(&self, n_train: usize, rng: &mut ChaCha8Rng) -> InnerPlan {
        (0..self.steps)
            .map(|_| match self.mode {
                Mode::Gd => None,
                Mode::Sgd => Some(sample_with_replacement(rng, n_train, self.batch)),
            })
            .collect()
    }
}

fn sample_with_replacement(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.random_range(0..n)).collect()
}

/// Configuration of Algorithm UD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UdConfig {
    /// Outer steps `T`.
    #[serde(alias = "T")]
    pub outer_steps: usize,
    /// Inner steps `K`.
    #[serde(alias = "K")]
    pub inner_steps: usize,
    pub outer_mode: Mode,
    pub inner_mode: Mode,
    pub alpha: LrSchedule,
    pub eta: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub nu: f64,
    pub outer_batch: usize,
    pub inner_batch: usize,
    #[serde(default)]
    pub seed: u64,
}

impl UdConfig {
    pub fn inner(&self) -> InnerLoop {
        InnerLoop {
            steps: self.inner_steps,
            mode: self.inner_mode,
            eta: self.eta,
            nu: self.nu,
            batch: self.inner_batch,
        }
    }

    pub fn validate(&self, problem: &BilevelProblem) -> Result<()> {
        self.inner().validate(problem.train.len())?;
        let a = self.alpha.scale();
        if !(a >= 0.0) || !a.is_finite() {
            return Err(Error::contract(format!("alpha must be nonnegative, got {a}")));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::contract(format!("mu must be nonnegative, got {}", self.mu)));
        }
        let m = problem.val.len();
        if self.outer_mode == Mode::Sgd && (self.outer_batch == 0 || self.outer_batch > m) {
            return Err(Error::contract(format!(
                "outer_batch must be in 1..={m}, got {}",
                self.outer_batch
            )));
        }
        Ok(())
    }
}

/// Distribution of CV candidate hyperparameters (every coordinate i.i.d.).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    UniformBox {
        lo: f64,
        hi: f64,
    },
    /// Zero-mean; `std = None` uses the task's λ initialization scale.
    Gaussian {
        std: Option<f64>,
    },
}

impl Default for Sampler {
    fn default() -> Self {
        Sampler::Gaussian { std: None }
    }
}

/// Configuration of Algorithm CV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvConfig {
    /// Number of sampled hyperparameters `T`.
    #[serde(alias = "T")]
    pub candidates: usize,
    #[serde(alias = "K")]
    pub inner_steps: usize,
    pub inner_mode: Mode,
    pub eta: f64,
    #[serde(default)]
    pub nu: f64,
    pub inner_batch: usize,
    #[serde(default)]
    pub sampler: Sampler,
    #[serde(default)]
    pub seed: u64,
}

impl CvConfig {
    pub fn inner(&self) -> InnerLoop {
        InnerLoop {
            steps: self.inner_steps,
            mode: self.inner_mode,
            eta: self.eta,
            nu: self.nu,
            batch: self.inner_batch,
        }
    }

    pub fn validate(&self, problem: &BilevelProblem) -> Result<()> {
        if self.candidates == 0 {
            return Err(Error::contract("CV needs at least one candidate"));
        }
        self.inner().validate(problem.train.len())?;
        match self.sampler {
            Sampler::UniformBox { lo, hi } if !(lo < hi) => {
                Err(Error::contract(format!("sampler box needs lo < hi, got [{lo}, {hi}]")))
            }
            Sampler::Gaussian { std: Some(s) } if !(s > 0.0) => {
                Err(Error::contract(format!("sampler std must be positive, got {s}")))
            }
            _ => Ok(()),
        }
    }
}

/// Training, validation and test sets plus the task losses.
///
/// The test set stands in for the validation distribution when measuring
/// expected risk.
#[derive(Clone)]
pub struct BilevelProblem {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub losses: Arc<dyn LossPair>,
    train_full: Batch,
    val_full: Batch,
    test_full: Batch,
}

impl std::fmt::Debug for BilevelProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BilevelProblem")
            .field("task", &self.losses.name())
            .field("n_train", &self.train.len())
            .field("n_val", &self.val.len())
            .field("n_test", &self.test.len())
            .finish()
    }
}

impl BilevelProblem {
    pub fn new(train: Vec<Example>, val: Vec<Example>, test: Vec<Example>, losses: Arc<dyn LossPair>) -> Result<Self> {
        for (name, set) in [("train", &train), ("val", &val), ("test", &test)] {
            if set.is_empty() {
                return Err(Error::contract(format!("{name} set is empty")));
            }
        }
        Ok(Self {
            train_full: Batch::full(&train)?,
            val_full: Batch::full(&val)?,
            test_full: Batch::full(&test)?,
            train,
            val,
            test,
            losses,
        })
    }

    /// A problem whose losses ignore the data (e.g. [`crate::models::Quadratic`]).
    pub fn data_free(losses: Arc<dyn LossPair>) -> Result<Self> {
        let dummy = vec![Example { x: Vec::new(), y: 0 }];
        Self::new(dummy.clone(), dummy.clone(), dummy, losses)
    }

    pub fn val_batch(&self) -> &Batch {
        &self.val_full
    }

    fn train_batch(&self, indices: &Option<Vec<usize>>) -> Result<std::borrow::Cow<'_, Batch>> {
        Ok(match indices {
            None => std::borrow::Cow::Borrowed(&self.train_full),
            Some(idx) => std::borrow::Cow::Owned(Batch::gather(&self.train, idx)?),
        })
    }

    /// Full-set validation and test loss of `(λ, θ)`.
    pub fn evaluate(&self, lambda: &[Tensor], theta: &[Tensor]) -> Result<(f64, f64)> {
        Ok((
            self.loss_on(lambda, theta, &self.val_full)?,
            self.loss_on(lambda, theta, &self.test_full)?,
        ))
    }

    /// Outer loss of `(λ, θ)` on an arbitrary batch.
    pub fn loss_on(&self, lambda: &[Tensor], theta: &[Tensor], batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let l = leaves(&mut tape, lambda);
        let t = leaves(&mut tape, theta);
        let loss = self.losses.outer_loss(&mut tape, &l, &t, batch)?;
        Ok(tape.scalar(loss).expect("scalar loss"))
    }

    pub fn lambda_len(&self) -> usize {
        self.losses
            .lambda_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

fn leaves(tape: &mut Tape, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| tape.leaf(t.clone())).collect()
}

/// Independent RNG streams of one run, all derived from its seed.
#[derive(Debug, Clone)]
pub struct RunStreams {
    pub init: ChaCha8Rng,
    pub inner: ChaCha8Rng,
    pub outer: ChaCha8Rng,
    pub sampler: ChaCha8Rng,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        Self {
            init: stream(0),
            inner: stream(1),
            outer: stream(2),
            sampler: stream(3),
        }
    }

    /// Inner-loop stream private to CV candidate `t`, so candidate `t` trains
    /// identically however many candidates follow it.
    pub fn candidate(seed: u64, t: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream((1u64 << 32) | t as u64);
        r
    }
}

/// Record `K` inner steps on `tape`, starting from `θ₀`, and return `θ_K` as
/// tape variables that depend on `lambda`.
pub fn inner_unroll(
    problem: &BilevelProblem,
    tape: &mut Tape,
    lambda: &[Var],
    theta0: &[Tensor],
    inner: &InnerLoop,
    plan: &InnerPlan,
) -> Result<Vec<Var>> {
    let mut theta = leaves(tape, theta0);
    for (k, indices) in plan.iter().enumerate().take(inner.steps) {
        let step = |tape: &mut Tape, theta: &[Var]| -> Result<Vec<Var>> {
            let batch = problem.train_batch(indices)?;
            let loss = problem.losses.inner_loss(tape, lambda, theta, &batch)?;
            let grads = tape.gradient_graph(loss, theta)?;
            theta
                .iter()
                .zip(grads)
                .map(|(&p, g)| {
                    let kept = if inner.nu == 0.0 {
                        p
                    } else {
                        tape.scale(p, 1.0 - inner.eta * inner.nu)?
                    };
                    let delta = tape.scale(g, inner.eta)?;
                    tape.sub(kept, delta)
                })
                .collect()
        };
        theta = step(tape, &theta).map_err(|e| e.in_inner_step(k))?;
    }
    Ok(theta)
}

/// The same inner loop as [`inner_unroll`] evaluated without keeping a
/// differentiable record; bit-identical results, bounded memory.
pub fn unroll_values(
    problem: &BilevelProblem,
    lambda: &[Tensor],
    theta0: &[Tensor],
    inner: &InnerLoop,
    plan: &InnerPlan,
) -> Result<Vec<Tensor>> {
    let mut theta = theta0.to_vec();
    for (k, indices) in plan.iter().enumerate().take(inner.steps) {
        let step = |theta: &[Tensor]| -> Result<Vec<Tensor>> {
            let batch = problem.train_batch(indices)?;
            let mut tape = Tape::new();
            let l = leaves(&mut tape, lambda);
            let t = leaves(&mut tape, theta);
            let loss = problem.losses.inner_loss(&mut tape, &l, &t, &batch)?;
            let grads = tape.gradient(loss, &t)?;
            theta
                .iter()
                .zip(grads)
                .map(|(p, g)| {
                    let kept = if inner.nu == 0.0 {
                        p.clone()
                    } else {
                        let decay = 1.0 - inner.eta * inner.nu;
                        p.map(|v| v * decay)
                    };
                    let eta = inner.eta;
                    let next = kept.zip_broadcast(&g, "inner update", |a, b| a - b * eta)?;
                    if !next.is_finite() {
                        return Err(Error::NonFinite {
                            op: "inner update",
                            node: 0,
                        });
                    }
                    Ok(next)
                })
                .collect()
        };
        theta = step(&theta).map_err(|e| e.in_inner_step(k))?;
    }
    Ok(theta)
}

/// Value and λ-gradient of the outer loss through the unrolled inner loop.
#[derive(Debug, Clone)]
pub struct Hypergradient {
    pub outer_loss: f64,
    pub grad: Vec<Tensor>,
    pub theta_k: Vec<Tensor>,
}

pub fn hypergradient(
    problem: &BilevelProblem,
    lambda: &[Tensor],
    theta0: &[Tensor],
    inner: &InnerLoop,
    plan: &InnerPlan,
    outer_batch: &Batch,
) -> Result<Hypergradient> {
    let mut tape = Tape::new();
    let l = leaves(&mut tape, lambda);
    let theta = inner_unroll(problem, &mut tape, &l, theta0, inner, plan)?;
    let loss = problem.losses.outer_loss(&mut tape, &l, &theta, outer_batch)?;
    let grad = tape.gradient(loss, &l)?;
    if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            op: "hypergradient",
            node: l[bad].id(),
        });
    }
    Ok(Hypergradient {
        outer_loss: tape.scalar(loss).expect("scalar loss"),
        grad,
        theta_k: theta.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// `R̂(λ, θ_K(λ))` on `batch` for a fixed inner plan; the map whose gradient
/// [`hypergradient`] computes.
pub fn unrolled_outer_loss(
    problem: &BilevelProblem,
    lambda: &[Tensor],
    theta0: &[Tensor],
    inner: &InnerLoop,
    plan: &InnerPlan,
    batch: &Batch,
) -> Result<f64> {
    let theta = unroll_values(problem, lambda, theta0, inner, plan)?;
    problem.loss_on(lambda, &theta, batch)
}

/// Result of one outer update.
#[derive(Debug, Clone)]
pub struct OuterStep {
    pub next_lambda: Vec<Tensor>,
    pub hypergradient: Hypergradient,
}

/// `λ_{t+1} = (1 − α_{t+1} μ) λ_t − α_{t+1} ∇_λ R̂_val(λ_t, θ_K(λ_t); batch)`.
///
/// The inner loop is re-recorded from `θ₀` on a fresh tape. Outer SGD draws
/// `outer_batch` validation indices with replacement from `streams.outer`.
pub fn outer_step(
    problem: &BilevelProblem,
    lambda: &[Tensor],
    theta0: &[Tensor],
    cfg: &UdConfig,
    t: usize,
    streams: &mut RunStreams,
) -> Result<OuterStep> {
    let inner = cfg.inner();
    let plan = inner.plan(problem.train.len(), &mut streams.inner);
    let sampled;
    let batch = match cfg.outer_mode {
        Mode::Gd => problem.val_batch(),
        Mode::Sgd => {
            let idx = sample_with_replacement(&mut streams.outer, problem.val.len(), cfg.outer_batch);
            sampled = Batch::gather(&problem.val, &idx)?;
            &sampled
        }
    };
    let hg = hypergradient(problem, lambda, theta0, &inner, &plan, batch).map_err(|e| e.in_outer_step(t))?;
    let alpha = cfg.alpha.rate(t + 1);
    let decay = 1.0 - alpha * cfg.mu;
    let next_lambda = lambda
        .iter()
        .zip(&hg.grad)
        .map(|(l, g)| l.zip_broadcast(g, "outer update", |a, b| decay * a - alpha * b))
        .collect::<Result<Vec<_>>>()?;
    if next_lambda.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite {
            op: "outer update",
            node: 0,
        }
        .in_outer_step(t));
    }
    Ok(OuterStep {
        next_lambda,
        hypergradient: hg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub val_loss: f64,
    pub test_loss: f64,
}

/// Per-step losses of a run.
///
/// UD rows are `t = 0..=T` (row 0 is the initial λ); CV rows are the raw
/// losses of candidates `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
}

impl RunTrace {
    /// Prefix-argmin view: row `t` reports the candidate with the lowest
    /// validation loss among the first `t` (earliest wins ties).
    pub fn best_so_far(&self) -> RunTrace {
        let mut best: Option<TraceRow> = None;
        let rows = self
            .rows
            .iter()
            .map(|r| {
                if best.is_none_or(|b| r.val_loss < b.val_loss) {
                    best = Some(*r);
                }
                let b = best.expect("set above");
                TraceRow {
                    t: r.t,
                    val_loss: b.val_loss,
                    test_loss: b.test_loss,
                }
            })
            .collect();
        RunTrace { rows }
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

/// Output of [`ud_run`]: the trace and the final pair `(λ_T, θ_K(λ_T))`.
#[derive(Debug, Clone)]
pub struct UdOutcome {
    pub trace: RunTrace,
    pub lambda: Vec<Tensor>,
    pub theta: Vec<Tensor>,
}

pub fn ud_run(problem: &BilevelProblem, cfg: &UdConfig) -> Result<UdOutcome> {
    cfg.validate(problem)?;
    let mut streams = RunStreams::new(cfg.seed);
    let theta0 = problem.losses.init_theta(&mut streams.init);
    let mut lambda = problem.losses.init_lambda(&mut streams.init);
    let mut trace = RunTrace::default();
    for t in 0..cfg.outer_steps {
        let step = outer_step(problem, &lambda, &theta0, cfg, t, &mut streams)?;
        let (val_loss, test_loss) = problem
            .evaluate(&lambda, &step.hypergradient.theta_k)
            .map_err(|e| e.in_outer_step(t))?;
        trace.rows.push(TraceRow { t, val_loss, test_loss });
        lambda = step.next_lambda;
    }
    let t = cfg.outer_steps;
    let inner = cfg.inner();
    let plan = inner.plan(problem.train.len(), &mut streams.inner);
    let theta = unroll_values(problem, &lambda, &theta0, &inner, &plan).map_err(|e| e.in_outer_step(t))?;
    let (val_loss, test_loss) = problem.evaluate(&lambda, &theta).map_err(|e| e.in_outer_step(t))?;
    trace.rows.push(TraceRow { t, val_loss, test_loss });
    Ok(UdOutcome { trace, lambda, theta })
}

/// Output of [`cv_run`]: raw per-candidate trace and the selected pair.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub trace: RunTrace,
    /// 1-based index `t*` of the selected candidate.
    pub selected: usize,
    pub lambda: Vec<Tensor>,
    pub theta: Vec<Tensor>,
}

/// Draw one candidate λ with the task's shapes.
pub fn sample_candidate(sampler: &Sampler, losses: &dyn LossPair, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    losses
        .lambda_shapes()
        .iter()
        .map(|shape| {
            let n = shape.iter().product();
            let data: Vec<f64> = match *sampler {
                Sampler::UniformBox { lo, hi } => (0..n).map(|_| rng.random_range(lo..hi)).collect(),
                Sampler::Gaussian { std } => {
                    let std = std.unwrap_or_else(|| losses.lambda_init_scale());
                    let dist = Normal::new(0.0, std).map_err(|e| Error::contract(format!("gaussian sampler: {e}")))?;
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            };
            Tensor::new(shape.clone(), data)
        })
        .collect()
}

/// Index of the smallest value; the earliest wins ties.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v < values[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn cv_run(problem: &BilevelProblem, cfg: &CvConfig) -> Result<CvOutcome> {
    cfg.validate(problem)?;
    let mut streams = RunStreams::new(cfg.seed);
    let candidates = (0..cfg.candidates)
        .map(|_| sample_candidate(&cfg.sampler, problem.losses.as_ref(), &mut streams.sampler))
        .collect::<Result<Vec<_>>>()?;
    cv_run_candidates(problem, cfg, candidates)
}

/// CV over an explicit candidate list (the sampler is bypassed).
pub fn cv_run_candidates(problem: &BilevelProblem, cfg: &CvConfig, candidates: Vec<Vec<Tensor>>) -> Result<CvOutcome> {
    if candidates.is_empty() {
        return Err(Error::contract("CV needs at least one candidate"));
    }
    cfg.inner().validate(problem.train.len())?;
    let mut streams = RunStreams::new(cfg.seed);
    let theta0 = problem.losses.init_theta(&mut streams.init);
    let inner = cfg.inner();
    let mut trace = RunTrace::default();
    let mut best: Option<(usize, Vec<Tensor>, Vec<Tensor>, f64)> = None;
    for (i, lambda) in candidates.into_iter().enumerate() {
        let t = i + 1;
        let mut rng = RunStreams::candidate(cfg.seed, t);
        let plan = inner.plan(problem.train.len(), &mut rng);
        let theta = unroll_values(problem, &lambda, &theta0, &inner, &plan).map_err(|e| e.in_outer_step(t))?;
        let (val_loss, test_loss) = problem.evaluate(&lambda, &theta).map_err(|e| e.in_outer_step(t))?;
        trace.rows.push(TraceRow { t, val_loss, test_loss });
        if best.as_ref().is_none_or(|b| val_loss < b.3) {
            best = Some((t, lambda, theta, val_loss));
        }
    }
    let (selected, lambda, theta, _) = best.expect("at least one candidate");
    Ok(CvOutcome {
        trace,
        selected,
        lambda,
        theta,
    })
}
