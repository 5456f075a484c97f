//! Task formulations as differentiable inner/outer losses over (λ, θ, z).
//!
//! * [`FeatureLearning`]: λ is an affine feature extractor, θ a tanh MLP head;
//!   both levels minimize mean cross-entropy.
//! * [`Reweighting`]: λ holds one logit per training example; the inner loss
//!   weights each example's cross-entropy by `σ(λ_i)`, the outer loss is the
//!   plain cross-entropy and never reads λ.
//! * [`Quadratic`]: `½(θ−λ)ᵀA(θ−λ)` inside, `½‖θ−b‖²` outside. Closed forms
//!   exist for every quantity, which makes it the reference problem for
//!   hypergradient checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labelled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: usize,
}

/// A set of examples stacked into a matrix, with their positions in the
/// source set (used to gather per-example hyperparameters).
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn gather(examples: &[Example], indices: &[usize]) -> Result<Batch> {
        let dim = examples.first().map_or(0, |e| e.x.len());
        let mut data = Vec::with_capacity(indices.len() * dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = examples
                .get(i)
                .ok_or_else(|| Error::contract(format!("example index {i} out of range ({})", examples.len())))?;
            if e.x.len() != dim {
                return Err(Error::contract(format!(
                    "example {i} has {} features, expected {dim}",
                    e.x.len()
                )));
            }
            data.extend_from_slice(&e.x);
            labels.push(e.y);
        }
        Ok(Batch {
            x: Tensor::matrix(indices.len(), dim, data)?,
            labels,
            indices: indices.to_vec(),
        })
    }

    pub fn full(examples: &[Example]) -> Result<Batch> {
        let idx: Vec<usize> = (0..examples.len()).collect();
        Batch::gather(examples, &idx)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// The inner loss φ and outer loss ℓ of a bilevel problem, together with the
/// parameter layouts they expect.
pub trait LossPair: Send + Sync {
    fn name(&self) -> &'static str;

    fn lambda_shapes(&self) -> Vec<Vec<usize>>;

    fn theta_shapes(&self) -> Vec<Vec<usize>>;

    fn init_lambda(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor>;

    fn init_theta(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor>;

    /// Spread of the hyperparameter initialization; default std of the CV
    /// Gaussian sampler.
    fn lambda_init_scale(&self) -> f64;

    /// Mean training objective over `batch`.
    fn inner_loss(&self, tape: &mut Tape, lambda: &[Var], theta: &[Var], batch: &Batch) -> Result<Var>;

    /// Mean validation objective over `batch`.
    fn outer_loss(&self, tape: &mut Tape, lambda: &[Var], theta: &[Var], batch: &Batch) -> Result<Var>;
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `x W + 1 b` with `b` stored as a `[1, out]` row.
fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let rows = tape.shape(x)[0];
    let xw = tape.matmul(x, w)?;
    let ones = tape.leaf(Tensor::ones(&[rows, 1]));
    let bias = tape.matmul(ones, b)?;
    tape.add(xw, bias)
}

/// Per-example cross-entropy of row logits, shape `[B, 1]`.
fn cross_entropy_rows(tape: &mut Tape, logits: Var, labels: &[usize], classes: usize) -> Result<Var> {
    let rows = labels.len();
    let mut onehot = Tensor::zeros(&[rows, classes]);
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::contract(format!("label {y} out of range for {classes} classes")));
        }
        onehot.data_mut()[r * classes + y] = 1.0;
    }
    let logp = tape.log_softmax(logits)?;
    let mask = tape.leaf(onehot);
    let picked = tape.mul(logp, mask)?;
    let ones = tape.leaf(Tensor::ones(&[classes, 1]));
    let ll = tape.matmul(picked, ones)?;
    tape.scale(ll, -1.0)
}

/// tanh MLP head: affine → tanh → affine, returning logits.
fn mlp_logits(tape: &mut Tape, x: Var, theta: &[Var]) -> Result<Var> {
    let [w1, b1, w2, b2] = theta else {
        return Err(Error::contract(format!(
            "MLP expects 4 parameter tensors, got {}",
            theta.len()
        )));
    };
    let h = affine(tape, x, *w1, *b1)?;
    let a = tape.tanh(h)?;
    affine(tape, a, *w2, *b2)
}

fn mlp_shapes(input: usize, hidden: usize, classes: usize) -> Vec<Vec<usize>> {
    vec![
        vec![input, hidden],
        vec![1, hidden],
        vec![hidden, classes],
        vec![1, classes],
    ]
}

fn mlp_init(rng: &mut ChaCha8Rng, input: usize, hidden: usize, classes: usize) -> Vec<Tensor> {
    vec![
        uniform_init(rng, &[input, hidden], input),
        uniform_init(rng, &[1, hidden], input),
        uniform_init(rng, &[hidden, classes], hidden),
        uniform_init(rng, &[1, classes], hidden),
    ]
}

fn check_dims(dims: &[(&str, usize)]) -> Result<()> {
    for (name, v) in dims {
        if *v == 0 {
            return Err(Error::contract(format!("{name} must be at least 1")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureLearningSpec {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

/// λ = extractor `(W_h, b_h)`, θ = MLP head `(W_1, b_1, W_2, b_2)`.
#[derive(Debug, Clone)]
pub struct FeatureLearning {
    spec: FeatureLearningSpec,
}

pub fn feature_learning_losses(spec: FeatureLearningSpec) -> Result<FeatureLearning> {
    check_dims(&[
        ("input_dim", spec.input_dim),
        ("feature_dim", spec.feature_dim),
        ("hidden_dim", spec.hidden_dim),
        ("num_classes", spec.num_classes),
    ])?;
    Ok(FeatureLearning { spec })
}

impl FeatureLearning {
    fn loss(&self, tape: &mut Tape, lambda: &[Var], theta: &[Var], batch: &Batch) -> Result<Var> {
        let [wh, bh] = lambda else {
            return Err(Error::contract("feature extractor expects 2 tensors"));
        };
        let x = tape.leaf(batch.x.clone());
        let feats = affine(tape, x, *wh, *bh)?;
        let logits = mlp_logits(tape, feats, theta)?;
        let ce = cross_entropy_rows(tape, logits, &batch.labels, self.spec.num_classes)?;
        tape.mean(ce)
    }
}

impl LossPair for FeatureLearning {
    fn name(&self) -> &'static str {
        "feature_learning"
    }

    fn lambda_shapes(&self) -> Vec<Vec<usize>> {
        vec![
            vec![self.spec.input_dim, self.spec.feature_dim],
            vec![1, self.spec.feature_dim],
        ]
    }

    fn theta_shapes(&self) -> Vec<Vec<usize>> {
        mlp_shapes(self.spec.feature_dim, self.spec.hidden_dim, self.spec.num_classes)
    }

    fn init_lambda(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        let s = &self.spec;
        vec![
            uniform_init(rng, &[s.input_dim, s.feature_dim], s.input_dim),
            uniform_init(rng, &[1, s.feature_dim], s.input_dim),
        ]
    }

    fn init_theta(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        mlp_init(rng, self.spec.feature_dim, self.spec.hidden_dim, self.spec.num_classes)
    }

    fn lambda_init_scale(&self) -> f64 {
        1.0 / (self.spec.input_dim as f64).sqrt()
    }

    fn inner_loss(&self, tape: &mut Tape, lambda: &[Var], theta: &[Var], batch: &Batch) -> Result<Var> {
        self.loss(tape, lambda, theta, batch)
    }

    fn outer_loss(&self, tape: &mut Tape, lambda: &[Var], theta: &[Var], batch: &Batch) -> Result<Var> {
        self.loss(tape, lambda, theta, batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ReweightingSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub n_train: usize,
}

/// λ = `[n_train, 1]` weight logits, θ = MLP classifier.
#[derive(Debug, Clone)]
pub struct Reweighting {
    spec: ReweightingSpec,
}

pub fn reweighting_losses(spec: ReweightingSpec) -> Result<Reweighting> {
    check_dims(&[
        ("input_dim", spec.input_dim),
        ("hidden_dim", spec.hidden_dim),
        ("num_classes", spec.num_classes),
        ("n_train", spec.n_train),
    ])?;
    Ok(Reweighting { spec })
}

impl Reweighting {
    fn ce_rows(&self, tape: &mut Tape, theta: &[Var], batch: &Batch) -> Result<Var> {
        let x = tape.leaf(batch.x.clone());
        let logits = mlp_logits(tape, x, theta)?;
        cross_entropy_rows(tape, logits, &batch.labels, self.spec.num_classes)
    }
}

impl LossPair for Reweighting {
    fn name(&self) -> &'static str {
        "reweighting"
    }

    fn lambda_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.spec.n_train, 1]]
    }

    fn theta_shapes(&self) -> Vec<Vec<usize>> {
        mlp_shapes(self.spec.input_dim, self.spec.hidden_dim, self.spec.num_classes)
    }

    /// All-zero logits: every example starts at weight ½.
    fn init_lambda(&self, _rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![Tensor::zeros(&[self.spec.n_train, 1])]
    }

    fn init_theta(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        mlp_init(rng, self.spec.input_dim, self.spec.hidden_dim, self.spec.num_classes)
    }

    fn lambda_init_scale(&self) -> f64 {
        1.0
    }

    fn inner_loss(&self, tape: &mut Tape, lambda: &[Var], theta: &[Var], batch: &Batch) -> Result<Var> {
        let [logits] = lambda else {
            return Err(Error::contract("reweighting expects 1 hyperparameter tensor"));
        };
        if let Some(&bad) = batch.indices.iter().find(|&&i| i >= self.spec.n_train) {
            return Err(Error::contract(format!(
                "training index {bad} out of range ({})",
                self.spec.n_train
            )));
        }
        let ce = self.ce_rows(tape, theta, batch)?;
        let picked = tape.index_select(*logits, &batch.indices)?;
        let w = tape.sigmoid(picked)?;
        let weighted = tape.mul(w, ce)?;
        tape.mean(weighted)
    }

    fn outer_loss(&self, tape: &mut Tape, _lambda: &[Var], theta: &[Var], batch: &Batch) -> Result<Var> {
        let ce = self.ce_rows(tape, theta, batch)?;
        tape.mean(ce)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSpec {
    /// Symmetric `d × d` curvature `A`.
    pub curvature: Tensor,
    /// Outer target `b`.
    pub target: Vec<f64>,
    pub theta0: Vec<f64>,
    pub lambda0: Vec<f64>,
}

impl QuadraticSpec {
    /// Inner `(θ−λ)²/2`, outer `θ²/2`, θ₀ = 0.
    pub fn scalar(lambda0: f64) -> Self {
        Self {
            curvature: Tensor::matrix(1, 1, vec![1.0]).expect("1x1"),
            target: vec![0.0],
            theta0: vec![0.0],
            lambda0: vec![lambda0],
        }
    }
}

/// Inner `½(θ−λ)ᵀA(θ−λ)`, outer `½‖θ−b‖²`; batches are ignored.
#[derive(Debug, Clone)]
pub struct Quadratic {
    spec: QuadraticSpec,
    dim: usize,
}

pub fn quadratic_losses(spec: QuadraticSpec) -> Result<Quadratic> {
    let dim = spec.target.len();
    if dim == 0 || spec.curvature.shape() != [dim, dim] {
        return Err(Error::contract(format!(
            "curvature shape {:?} does not match dimension {dim}",
            spec.curvature.shape()
        )));
    }
    if spec.theta0.len() != dim || spec.lambda0.len() != dim {
        return Err(Error::contract("theta0/lambda0 length must equal dimension"));
    }
    Ok(Quadratic { spec, dim })
}

impl LossPair for Quadratic {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn lambda_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.dim, 1]]
    }

    fn theta_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![self.dim, 1]]
    }

    fn init_lambda(&self, _rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![Tensor::new(vec![self.dim, 1], self.spec.lambda0.clone()).expect("dim")]
    }

    fn init_theta(&self, _rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![Tensor::new(vec![self.dim, 1], self.spec.theta0.clone()).expect("dim")]
    }

    fn lambda_init_scale(&self) -> f64 {
        1.0
    }

    fn inner_loss(&self, tape: &mut Tape, lambda: &[Var], theta: &[Var], _batch: &Batch) -> Result<Var> {
        let diff = tape.sub(theta[0], lambda[0])?;
        let a = tape.leaf(self.spec.curvature.clone());
        let ad = tape.matmul(a, diff)?;
        let q = tape.mul(diff, ad)?;
        let s = tape.sum(q)?;
        tape.scale(s, 0.5)
    }

    fn outer_loss(&self, tape: &mut Tape, _lambda: &[Var], theta: &[Var], _batch: &Batch) -> Result<Var> {
        let b = tape.leaf(Tensor::new(vec![self.dim, 1], self.spec.target.clone())?);
        let diff = tape.sub(theta[0], b)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq)?;
        tape.scale(s, 0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn leaves(tape: &mut Tape, ts: Vec<Tensor>) -> Vec<Var> {
        ts.into_iter().map(|t| tape.leaf(t)).collect()
    }

    fn zeros(shapes: Vec<Vec<usize>>) -> Vec<Tensor> {
        shapes.iter().map(|s| Tensor::zeros(s)).collect()
    }

    #[test]
    fn zero_parameters_give_log_num_classes() {
        let fl = feature_learning_losses(FeatureLearningSpec {
            input_dim: 3,
            feature_dim: 2,
            hidden_dim: 2,
            num_classes: 4,
        })
        .unwrap();
        let ex = [Example {
            x: vec![0.3, -1.0, 2.0],
            y: 1,
        }];
        let batch = Batch::full(&ex).unwrap();
        let mut tape = Tape::new();
        let l = leaves(&mut tape, zeros(fl.lambda_shapes()));
        let t = leaves(&mut tape, zeros(fl.theta_shapes()));
        let loss = fl.outer_loss(&mut tape, &l, &t, &batch).unwrap();
        assert!((tape.scalar(loss).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_example_batch_matches_single() {
        let fl = feature_learning_losses(FeatureLearningSpec {
            input_dim: 3,
            feature_dim: 2,
            hidden_dim: 3,
            num_classes: 3,
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lam = fl.init_lambda(&mut rng);
        let th = fl.init_theta(&mut rng);
        let e = Example {
            x: vec![0.5, 0.1, -0.7],
            y: 2,
        };
        let one = Batch::full(std::slice::from_ref(&e)).unwrap();
        let two = Batch::full(&[e.clone(), e]).unwrap();
        let mut tape = Tape::new();
        let l = leaves(&mut tape, lam);
        let t = leaves(&mut tape, th);
        let a = fl.inner_loss(&mut tape, &l, &t, &one).unwrap();
        let b = fl.inner_loss(&mut tape, &l, &t, &two).unwrap();
        assert!((tape.scalar(a).unwrap() - tape.scalar(b).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let rw = reweighting_losses(ReweightingSpec {
            input_dim: 2,
            hidden_dim: 2,
            num_classes: 2,
            n_train: 1,
        })
        .unwrap();
        let batch = Batch::full(&[Example {
            x: vec![0.0, 0.0],
            y: 5,
        }])
        .unwrap();
        let mut tape = Tape::new();
        let l = leaves(&mut tape, zeros(rw.lambda_shapes()));
        let t = leaves(&mut tape, zeros(rw.theta_shapes()));
        assert!(matches!(
            rw.outer_loss(&mut tape, &l, &t, &batch),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn reweighting_index_out_of_range_is_rejected() {
        let rw = reweighting_losses(ReweightingSpec {
            input_dim: 1,
            hidden_dim: 2,
            num_classes: 2,
            n_train: 2,
        })
        .unwrap();
        let ex: Vec<Example> = (0..3)
            .map(|i| Example {
                x: vec![i as f64],
                y: i % 2,
            })
            .collect();
        let batch = Batch::gather(&ex, &[2]).unwrap();
        let mut tape = Tape::new();
        let l = leaves(&mut tape, zeros(rw.lambda_shapes()));
        let t = leaves(&mut tape, zeros(rw.theta_shapes()));
        assert!(rw.inner_loss(&mut tape, &l, &t, &batch).is_err());
    }

    #[test]
    fn zero_dims_are_rejected() {
        assert!(reweighting_losses(ReweightingSpec {
            input_dim: 1,
            hidden_dim: 0,
            num_classes: 2,
            n_train: 2
        })
        .is_err());
    }
}
