//! Closed-form stability and generalization bounds for UD and CV, plus two
//! empirical probes: a Lipschitz lower-bound estimator for the unrolled outer
//! loss and a Monte-Carlo check of random search's excess risk.
//!
//! Every evaluator is a pure function of its inputs. Precondition breaches do
//! not abort; they are listed in [`BoundReport::violated_preconditions`] next
//! to the value computed anyway.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bilevel::{BilevelProblem, InnerLoop, LrSchedule, RunStreams};
use crate::error::{Error, Result};
use crate::models::Batch;
use crate::tensor::Tensor;

/// Every symbol the bounds refer to. Missing keys take [`Default`] values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundInputs {
    /// Outer steps (UD) or number of candidates (CV).
    #[serde(rename = "T")]
    pub t: u64,
    /// Inner steps.
    #[serde(rename = "K")]
    pub k: u64,
    /// Validation set size.
    pub m: u64,
    /// Training set size.
    pub n: u64,
    /// Scale of the outer SGD schedule `α_t ≤ c/t`.
    pub c: f64,
    /// Outer GD learning rate.
    pub alpha: f64,
    /// Inner learning rate.
    pub eta: f64,
    /// Lipschitz constant of the outer loss in λ.
    #[serde(rename = "L")]
    pub l: f64,
    /// Smoothness of the outer loss in λ.
    pub gamma: f64,
    /// Smoothness of the inner loss in θ.
    pub gamma_phi: f64,
    pub mu: f64,
    pub nu: f64,
    /// Range of the bounded loss; defaults to 2.3 (about ln 10, the cross-entropy
    /// of a uniform 10-class prediction).
    pub s_ell: f64,
    /// Hyperparameter dimension.
    pub d: u64,
    /// Failure probability of high-probability bounds.
    pub delta: f64,
    /// Stability constant fed to [`gd_hp_bound`]; `None` uses [`ud_gd_beta`].
    pub beta: Option<f64>,
    /// Outer schedule actually used, if known.
    pub alpha_schedule: Option<LrSchedule>,
}

impl Default for BoundInputs {
    fn default() -> Self {
        Self {
            t: 1,
            k: 1,
            m: 1,
            n: 1,
            c: 0.0,
            alpha: 0.0,
            eta: 0.0,
            l: 0.0,
            gamma: 0.0,
            gamma_phi: 0.0,
            mu: 0.0,
            nu: 0.0,
            s_ell: 2.3,
            d: 1,
            delta: 0.05,
            beta: None,
            alpha_schedule: None,
        }
    }
}

impl BoundInputs {
    fn type_violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, x) in [
            ("c", self.c),
            ("alpha", self.alpha),
            ("eta", self.eta),
            ("L", self.l),
            ("gamma", self.gamma),
            ("gamma_phi", self.gamma_phi),
            ("mu", self.mu),
            ("nu", self.nu),
            ("s_ell", self.s_ell),
        ] {
            if !(x >= 0.0) {
                v.push(format!("{name} = {x} must be nonnegative"));
            }
        }
        for (name, x) in [("m", self.m), ("n", self.n), ("d", self.d)] {
            if x == 0 {
                v.push(format!("{name} must be at least 1"));
            }
        }
        v
    }
}

/// One evaluated bound with its audit trail.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub value: f64,
    pub formula_id: &'static str,
    pub inputs: BoundInputs,
    pub violated_preconditions: Vec<String>,
    pub notes: Vec<String>,
}

impl BoundReport {
    fn new(formula_id: &'static str, inputs: &BoundInputs, value: f64) -> Self {
        Self {
            value,
            formula_id,
            inputs: *inputs,
            violated_preconditions: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.violated_preconditions.is_empty()
    }

    fn require(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.violated_preconditions.push(msg());
        }
    }
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}]", self.formula_id)?;
        writeln!(f, "value = {}", self.value)?;
        if self.violated_preconditions.is_empty() {
            writeln!(f, "preconditions: ok")?;
        } else {
            for v in &self.violated_preconditions {
                writeln!(f, "VIOLATED: {v}")?;
            }
        }
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}

/// `γ' = (1 − 1/m)γ − μ`.
fn gamma_prime(inputs: &BoundInputs) -> f64 {
    (1.0 - 1.0 / inputs.m as f64) * inputs.gamma - inputs.mu
}

/// `κ = cγ'/(cγ' + 1)`.
pub fn kappa_value(inputs: &BoundInputs) -> f64 {
    let cg = inputs.c * gamma_prime(inputs);
    cg / (cg + 1.0)
}

pub fn kappa(inputs: &BoundInputs) -> Result<BoundReport> {
    if inputs.m == 0 {
        return Err(Error::contract("m must be at least 1"));
    }
    let mut r = BoundReport::new("kappa", inputs, kappa_value(inputs));
    r.violated_preconditions = inputs.type_violations();
    let gp = gamma_prime(inputs);
    r.require(gp >= 0.0, || {
        format!("mu = {} exceeds (1-1/m)gamma = {}", inputs.mu, gp + inputs.mu)
    });
    Ok(r)
}

/// `(x^κ − 1)/κ`, continuous at κ = 0 where it equals `ln x`.
fn power_growth(x: f64, kappa: f64) -> f64 {
    let lx = x.ln();
    if kappa == 0.0 {
        lx
    } else {
        (kappa * lx).exp_m1() / kappa
    }
}

/// `β = (2cL²/m)((x^κ − 1)/κ + 1)` with `x = T s(ℓ) / (2cL²)`, taking `κ` as
/// a free parameter rather than deriving it from `m`.
pub fn sgd_beta_with_kappa(two_c_l2: f64, m: f64, t_s: f64, kappa: f64) -> f64 {
    if two_c_l2 == 0.0 {
        return 0.0;
    }
    two_c_l2 / m * (power_growth(t_s / two_c_l2, kappa) + 1.0)
}

/// Stability of UD with T outer SGD steps at `α_t ≤ c/t` and weight decay μ.
pub fn ud_sgd_beta(inputs: &BoundInputs) -> Result<BoundReport> {
    let mut r = kappa(inputs)?;
    r.formula_id = "ud_sgd_beta";
    let k = r.value;
    let two_c_l2 = 2.0 * inputs.c * inputs.l * inputs.l;
    r.value = sgd_beta_with_kappa(two_c_l2, inputs.m as f64, inputs.t as f64 * inputs.s_ell, k);
    r.notes.push(format!("kappa = {k}"));
    r.require(inputs.t >= 1, || "T must be at least 1".into());
    r.require(inputs.c > 0.0, || "c must be positive".into());
    r.require(two_c_l2 <= inputs.s_ell, || {
        format!(
            "c = {} exceeds s_ell/(2L^2) = {}",
            inputs.c,
            inputs.s_ell / (2.0 * inputs.l * inputs.l)
        )
    });
    r.require(inputs.c == 0.0 || inputs.mu <= 1.0 / inputs.c, || {
        format!("mu = {} exceeds 1/c = {}", inputs.mu, 1.0 / inputs.c)
    });
    if let Some(LrSchedule::Constant(a)) = inputs.alpha_schedule {
        r.violated_preconditions.push(format!(
            "the bound assumes alpha_t = c/t but a constant schedule alpha = {a} was used"
        ));
    }
    Ok(r)
}

/// Stability of UD with T outer GD steps at learning rate α.
pub fn ud_gd_beta(inputs: &BoundInputs) -> Result<BoundReport> {
    if inputs.m == 0 {
        return Err(Error::contract("m must be at least 1"));
    }
    let g = inputs.gamma - inputs.mu;
    let a = inputs.alpha;
    let t = inputs.t as f64;
    let m = inputs.m as f64;
    let l2 = inputs.l * inputs.l;
    // ((1 + αg)^T − 1)/g, which tends to αT as g → 0.
    let growth = if g == 0.0 {
        a * t
    } else {
        (t * (a * g).ln_1p()).exp_m1() / g
    };
    let mut r = BoundReport::new("ud_gd_beta", inputs, 2.0 * l2 / m * growth);
    r.violated_preconditions = inputs.type_violations();
    r.require(inputs.mu <= inputs.gamma, || {
        format!("mu = {} exceeds gamma = {}", inputs.mu, inputs.gamma)
    });
    r.require(inputs.mu * a <= 1.0, || {
        format!("mu = {} exceeds 1/alpha = {}", inputs.mu, 1.0 / a)
    });
    if let Some(LrSchedule::Inverse(_)) = inputs.alpha_schedule {
        r.violated_preconditions
            .push("the bound assumes a constant alpha but an inverse schedule was used".into());
    }
    Ok(r)
}

/// High-probability gap for a β-uniformly stable deterministic algorithm.
pub fn gd_hp_bound(inputs: &BoundInputs, beta: f64) -> Result<BoundReport> {
    if !(inputs.delta > 0.0 && inputs.delta < 1.0) {
        return Err(Error::contract(format!(
            "delta must lie in (0, 1), got {}",
            inputs.delta
        )));
    }
    if inputs.m == 0 {
        return Err(Error::contract("m must be at least 1"));
    }
    let m = inputs.m as f64;
    let spread = 2.0 * beta * m + inputs.s_ell;
    let value = beta + (spread * spread * (1.0 / inputs.delta).ln() / (2.0 * m)).sqrt();
    let mut r = BoundReport::new("gd_hp_bound", inputs, value);
    r.violated_preconditions = inputs.type_violations();
    r.require(beta >= 0.0, || format!("beta = {beta} must be nonnegative"));
    r.notes.push(format!("beta = {beta}"));
    Ok(r)
}

/// Expected generalization gap of CV with T candidates.
pub fn cv_gap_bound(inputs: &BoundInputs) -> Result<BoundReport> {
    if inputs.m == 0 || inputs.t == 0 {
        return Err(Error::contract("cv_gap_bound needs T >= 1 and m >= 1"));
    }
    let value = inputs.s_ell * ((inputs.t as f64).ln() / (2.0 * inputs.m as f64)).sqrt();
    let mut r = BoundReport::new("cv_gap_bound", inputs, value);
    r.violated_preconditions = inputs.type_violations();
    Ok(r)
}

/// Order-form growth of the unrolled loss's Lipschitz and smoothness
/// constants in K: `L = O(l_base^K)`, `γ = O(gamma_base^K)`. No hidden
/// constants are supplied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthOrder {
    pub l_base: f64,
    pub gamma_base: f64,
    pub exponent: u64,
}

impl GrowthOrder {
    pub fn l_growth(&self) -> f64 {
        self.l_base.powf(self.exponent as f64)
    }

    pub fn gamma_growth(&self) -> f64 {
        self.gamma_base.powf(self.exponent as f64)
    }
}

impl fmt::Display for GrowthOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[lipschitz_growth_order]")?;
        writeln!(f, "L = O({}^{}) ~ {}", self.l_base, self.exponent, self.l_growth())?;
        writeln!(
            f,
            "gamma = O({}^{}) ~ {}",
            self.gamma_base,
            self.exponent,
            self.gamma_growth()
        )
    }
}

pub fn lipschitz_growth_order(inputs: &BoundInputs) -> GrowthOrder {
    let base = 1.0 + inputs.eta * (inputs.gamma_phi - inputs.nu);
    GrowthOrder {
        l_base: base,
        gamma_base: base * base,
        exponent: inputs.k,
    }
}

/// Excess validation risk of random search: `L√d / T^{1/d}`.
pub fn cod_bound(l: f64, d: u64, t: u64) -> f64 {
    let d = d as f64;
    l * d.sqrt() / (t as f64).powf(1.0 / d)
}

/// Outcome of [`cod_montecarlo`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CodCheck {
    pub d: u64,
    pub t: u64,
    pub trials: usize,
    pub mean_min: f64,
    pub stderr: f64,
    pub inf_f: f64,
    pub bound: f64,
    pub passed: bool,
}

impl fmt::Display for CodCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "d={} T={} trials={} mean_min={:.6} stderr={:.6} inf_f+bound={:.6} {}",
            self.d,
            self.t,
            self.trials,
            self.mean_min,
            self.stderr,
            self.inf_f + self.bound,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Average over `trials` of the minimum of `f` at `t` i.i.d. uniform points
/// of `[0,1]^d`, compared against `inf_f + cod_bound(l, d, t)` with a
/// three-standard-error allowance.
pub fn cod_montecarlo(
    f: &dyn Fn(&[f64]) -> f64,
    inf_f: f64,
    l: f64,
    d: u64,
    t: u64,
    trials: usize,
    seed: u64,
) -> Result<CodCheck> {
    if d == 0 || t == 0 || trials == 0 {
        return Err(Error::contract("cod_montecarlo needs d, T and trials >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut point = vec![0.0; d as usize];
    let mins: Vec<f64> = (0..trials)
        .map(|_| {
            (0..t)
                .map(|_| {
                    point.iter_mut().for_each(|p| *p = rng.random::<f64>());
                    f(&point)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let n = trials as f64;
    let mean = mins.iter().sum::<f64>() / n;
    let var = if trials > 1 {
        mins.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let stderr = (var / n).sqrt();
    let bound = cod_bound(l, d, t);
    Ok(CodCheck {
        d,
        t,
        trials,
        mean_min: mean,
        stderr,
        inf_f,
        bound,
        passed: mean <= inf_f + bound + 3.0 * stderr,
    })
}

/// Probe settings for [`estimate_lipschitz_empirical`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzProbe {
    pub num_probes: usize,
    pub radius: f64,
    /// Box from which base points λ are drawn (every coordinate).
    pub lo: f64,
    pub hi: f64,
    pub seed: u64,
}

/// Empirical LOWER bound on the Lipschitz constant of
/// `λ ↦ ℓ(λ, θ_K(λ), z)` over the probe box.
///
/// Probe `i` draws λ uniformly in the box and a random unit direction δ, then
/// sets `λ' = λ + rδ` (or `λ − rδ` when that leaves the box). Both points
/// share θ₀ and the inner mini-batch plan. The result is the largest
/// per-validation-example difference quotient seen. Probes are drawn
/// sequentially from one stream, so more probes never lower the estimate.
pub fn estimate_lipschitz_empirical(
    problem: &BilevelProblem,
    inner: &InnerLoop,
    probe: &LipschitzProbe,
) -> Result<f64> {
    if !(probe.radius > 0.0) {
        return Err(Error::contract(format!(
            "radius must be positive, got {}",
            probe.radius
        )));
    }
    if probe.num_probes < 2 {
        return Err(Error::contract("num_probes must be at least 2"));
    }
    if !(probe.lo <= probe.hi) {
        return Err(Error::contract("probe box needs lo <= hi"));
    }
    let mut streams = RunStreams::new(probe.seed);
    let theta0 = problem.losses.init_theta(&mut streams.init);
    let shapes = problem.losses.lambda_shapes();
    let singles = (0..problem.val.len())
        .map(|i| Batch::gather(&problem.val, &[i]))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0.0f64;
    for _ in 0..probe.num_probes {
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let base: Vec<f64> = (0..total)
            .map(|_| probe.lo + (probe.hi - probe.lo) * streams.sampler.random::<f64>())
            .collect();
        let mut dir: Vec<f64> = (0..total)
            .map(|_| StandardNormal.sample(&mut streams.sampler))
            .collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let inside = |x: f64| x >= probe.lo && x <= probe.hi;
        let sign = if base.iter().zip(&dir).all(|(b, u)| inside(b + probe.radius * u)) {
            1.0
        } else {
            -1.0
        };
        let moved: Vec<f64> = base
            .iter()
            .zip(&dir)
            .map(|(b, u)| b + sign * probe.radius * u)
            .collect();
        let dist = base
            .iter()
            .zip(&moved)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let plan = inner.plan(problem.train.len(), &mut streams.inner);
        let lam_a = unflatten(&shapes, &base)?;
        let lam_b = unflatten(&shapes, &moved)?;
        let th_a = crate::bilevel::unroll_values(problem, &lam_a, &theta0, inner, &plan)?;
        let th_b = crate::bilevel::unroll_values(problem, &lam_b, &theta0, inner, &plan)?;
        for z in &singles {
            let la = problem.loss_on(&lam_a, &th_a, z)?;
            let lb = problem.loss_on(&lam_b, &th_b, z)?;
            best = best.max((la - lb).abs() / dist);
        }
    }
    Ok(best)
}

fn unflatten(shapes: &[Vec<usize>], flat: &[f64]) -> Result<Vec<Tensor>> {
    let mut at = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), flat[at..at + n].to_vec());
            at += n;
            t
        })
        .collect()
}
