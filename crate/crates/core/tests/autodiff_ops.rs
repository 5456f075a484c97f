use bilevel_core::autodiff::{Tape, Var};
use bilevel_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = fn(&mut Tape, &[Var]) -> Var;

/// Name, builder, input shapes and the sampling range of the inputs.
type Case = (&'static str, Build, Vec<Vec<usize>>, f64, f64);

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `sum(w ⊙ op(inputs))` with a fixed random `w`, so every output element
/// contributes with a distinct weight.
fn weighted_root(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = tape.leaf(random(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0));
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

fn value(build: Build, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let root = weighted_root(&mut tape, out, 99);
    tape.scalar(root).unwrap()
}

fn tape_grad(build: Build, inputs: &[Tensor]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let root = weighted_root(&mut tape, out, 99);
    tape.gradient(root, &vars)
        .unwrap()
        .into_iter()
        .map(|g| g.into_data())
        .collect()
}

fn fd_grad(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    inputs
        .iter()
        .enumerate()
        .map(|(p, t)| {
            (0..t.len())
                .map(|i| {
                    let eval = |d: f64| {
                        let mut x = inputs.to_vec();
                        x[p].data_mut()[i] += d;
                        f(&x)
                    };
                    (eval(h) - eval(-h)) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞)`.
fn rel_inf(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        diff = diff.max((x - y).abs());
        scale = scale.max(x.abs()).max(y.abs());
    }
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn check_fd(name: &str, build: Build, inputs: Vec<Tensor>) {
    let tape = tape_grad(build, &inputs);
    let fd = fd_grad(&|x| value(build, x), &inputs, 1e-5);
    let err = rel_inf(&tape, &fd);
    assert!(err <= 1e-6, "{name}: relative error {err:e}");
}

/// Gradient of `sum(w2 ⊙ ∇f)` through the recorded backward pass, against
/// central differences of the numeric gradient.
fn check_second_order(name: &str, build: Build, inputs: Vec<Tensor>) {
    let second = |x: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = x.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let root = weighted_root(&mut tape, out, 99);
        let grads = tape.gradient_graph(root, &vars).unwrap();
        let mut total = None;
        for (i, g) in grads.into_iter().enumerate() {
            let r = weighted_root(&mut tape, g, 7 + i as u64);
            total = Some(match total {
                None => r,
                Some(t) => tape.add(t, r).unwrap(),
            });
        }
        let total = total.unwrap();
        let v = tape.scalar(total).unwrap();
        let g = tape
            .gradient(total, &vars)
            .unwrap()
            .into_iter()
            .map(Tensor::into_data)
            .collect();
        (v, g)
    };
    let (_, analytic) = second(&inputs);
    let fd = fd_grad(&|x| second(x).0, &inputs, 1e-5);
    let err = rel_inf(&analytic, &fd);
    assert!(err <= 1e-6, "{name} (second order): relative error {err:e}");
}

fn cases() -> Vec<Case> {
    vec![
        (
            "add",
            |t, v| t.add(v[0], v[1]).unwrap(),
            vec![vec![2, 3], vec![2, 3]],
            -2.0,
            2.0,
        ),
        (
            "add_broadcast",
            |t, v| t.add(v[0], v[1]).unwrap(),
            vec![vec![2, 3], vec![]],
            -2.0,
            2.0,
        ),
        (
            "sub",
            |t, v| t.sub(v[0], v[1]).unwrap(),
            vec![vec![3], vec![3]],
            -2.0,
            2.0,
        ),
        (
            "sub_broadcast",
            |t, v| t.sub(v[0], v[1]).unwrap(),
            vec![vec![1], vec![4]],
            -2.0,
            2.0,
        ),
        (
            "mul",
            |t, v| t.mul(v[0], v[1]).unwrap(),
            vec![vec![2, 2], vec![2, 2]],
            -2.0,
            2.0,
        ),
        (
            "mul_broadcast",
            |t, v| t.mul(v[0], v[1]).unwrap(),
            vec![vec![3, 2], vec![1, 1]],
            -2.0,
            2.0,
        ),
        ("scale", |t, v| t.scale(v[0], -1.7).unwrap(), vec![vec![4]], -2.0, 2.0),
        ("shift", |t, v| t.shift(v[0], 0.3).unwrap(), vec![vec![4]], -2.0, 2.0),
        (
            "matmul",
            |t, v| t.matmul(v[0], v[1]).unwrap(),
            vec![vec![3, 4], vec![4, 2]],
            -1.0,
            1.0,
        ),
        (
            "transpose",
            |t, v| t.transpose(v[0]).unwrap(),
            vec![vec![2, 3]],
            -1.0,
            1.0,
        ),
        ("relu", |t, v| t.relu(v[0]).unwrap(), vec![vec![6]], 0.1, 1.0),
        ("relu_negative", |t, v| t.relu(v[0]).unwrap(), vec![vec![6]], -1.0, -0.1),
        ("tanh", |t, v| t.tanh(v[0]).unwrap(), vec![vec![5]], -2.0, 2.0),
        ("sigmoid", |t, v| t.sigmoid(v[0]).unwrap(), vec![vec![5]], -3.0, 3.0),
        ("exp", |t, v| t.exp(v[0]).unwrap(), vec![vec![5]], -1.0, 1.0),
        (
            "log_softmax",
            |t, v| t.log_softmax(v[0]).unwrap(),
            vec![vec![3, 4]],
            -2.0,
            2.0,
        ),
        ("sum", |t, v| t.sum(v[0]).unwrap(), vec![vec![2, 3]], -1.0, 1.0),
        ("mean", |t, v| t.mean(v[0]).unwrap(), vec![vec![2, 3]], -1.0, 1.0),
        (
            "reshape",
            |t, v| t.reshape(v[0], &[3, 2]).unwrap(),
            vec![vec![2, 3]],
            -1.0,
            1.0,
        ),
        (
            "index_select",
            |t, v| t.index_select(v[0], &[2, 0, 2, 1]).unwrap(),
            vec![vec![3, 2]],
            -1.0,
            1.0,
        ),
        (
            "scatter_add",
            |t, v| t.scatter_add(v[0], &[1, 1, 0], 3).unwrap(),
            vec![vec![3, 2]],
            -1.0,
            1.0,
        ),
        (
            "concat",
            |t, v| t.concat(&[v[0], v[1]]).unwrap(),
            vec![vec![1, 3], vec![2, 3]],
            -1.0,
            1.0,
        ),
        (
            "affine",
            |t, v| t.affine(v[0], 2.0, -1.0).unwrap(),
            vec![vec![3]],
            -1.0,
            1.0,
        ),
    ]
}

fn inputs_for(shapes: &[Vec<usize>], lo: f64, hi: f64, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| random(&mut rng, s, lo, hi)).collect()
}

#[test]
fn every_op_matches_finite_differences() {
    for (name, build, shapes, lo, hi) in cases() {
        check_fd(name, build, inputs_for(&shapes, lo, hi, 1));
    }
}

#[test]
fn recorded_backward_pass_is_differentiable() {
    for (name, build, shapes, lo, hi) in cases() {
        check_second_order(name, build, inputs_for(&shapes, lo, hi, 2));
    }
}

#[test]
fn graph_and_numeric_sweeps_agree_bitwise() {
    for (name, build, shapes, lo, hi) in cases() {
        let inputs = inputs_for(&shapes, lo, hi, 3);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let root = weighted_root(&mut tape, out, 5);
        let numeric = tape.gradient(root, &vars).unwrap();
        let graph = tape.gradient_graph(root, &vars).unwrap();
        for (n, g) in numeric.iter().zip(graph) {
            assert_eq!(n, tape.value(g), "{name}");
        }
    }
}

fn mlp(t: &mut Tape, v: &[Var]) -> Var {
    let h = t.matmul(v[0], v[1]).unwrap();
    let h = t.tanh(h).unwrap();
    let o = t.matmul(h, v[2]).unwrap();
    let o = t.sigmoid(o).unwrap();
    t.log_softmax(o).unwrap()
}

fn mlp_inputs(seed: u64) -> Vec<Tensor> {
    inputs_for(&[vec![4, 3], vec![3, 5], vec![5, 3]], -1.0, 1.0, seed)
}

#[test]
fn gradients_are_deterministic() {
    let a = tape_grad(mlp, &mlp_inputs(4));
    let b = tape_grad(mlp, &mlp_inputs(4));
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_matches_finite_differences(seed in any::<u64>()) {
        let inputs = mlp_inputs(seed);
        let tape = tape_grad(mlp, &inputs);
        let fd = fd_grad(&|x| value(mlp, x), &inputs, 1e-5);
        prop_assert!(rel_inf(&tape, &fd) <= 1e-6);
    }

    #[test]
    fn gradient_is_linear_in_the_root(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let inputs = mlp_inputs(seed);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = mlp(&mut tape, &vars);
        let f = weighted_root(&mut tape, out, 1);
        let g = weighted_root(&mut tape, out, 2);
        let fa = tape.scale(f, a).unwrap();
        let gb = tape.scale(g, b).unwrap();
        let combo = tape.add(fa, gb).unwrap();
        let gf = tape.gradient(f, &vars).unwrap();
        let gg = tape.gradient(g, &vars).unwrap();
        let gc = tape.gradient(combo, &vars).unwrap();
        let expected: Vec<Vec<f64>> = gf.iter().zip(&gg)
            .map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect())
            .collect();
        let got: Vec<Vec<f64>> = gc.into_iter().map(Tensor::into_data).collect();
        prop_assert!(rel_inf(&got, &expected) <= 1e-12);
    }
}
