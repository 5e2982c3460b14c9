//! Central finite-difference oracle, independent of the tape's backward code.

use cappa_core::{Tape64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;

/// Builds a scalar on a fresh tape from leaf inputs.
pub type BuildFn = dyn Fn(&mut Tape64, &[Var]) -> Var;
pub type Build<'a> = &'a BuildFn;

fn eval(build: Build, inputs: &[Tensor64]) -> f64 {
    let mut tape = Tape64::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).item()
}

/// Worst relative error between analytic and numeric gradients over all
/// input entries. Relative error uses `|a - n| / max(1, |a|, |n|)` so tiny
/// gradients are compared absolutely.
pub fn max_rel_error(build: Build, inputs: &[Tensor64]) -> f64 {
    let mut tape = Tape64::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).expect("backward");
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor64::zeros(input.shape().to_vec()));
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * STEP);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor64 {
    Tensor64::from_fn(shape.to_vec(), |_| rng.gen_range(-1.5..1.5))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fixed random projection so non-scalar ops reduce to a scalar with a
/// nontrivial upstream gradient.
pub fn project(tape: &mut Tape64, x: Var, seed: u64) -> Var {
    let shape = tape.shape(x).to_vec();
    let mut r = rng(seed ^ 0x5eed);
    let w = random_tensor(&mut r, &shape);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

pub struct Case {
    pub inputs: Vec<Tensor64>,
    pub build: Box<BuildFn>,
}

fn case(inputs: Vec<Tensor64>, build: impl Fn(&mut Tape64, &[Var]) -> Var + 'static) -> Case {
    Case { inputs, build: Box::new(build) }
}

/// One random instance of each differentiable op, keyed by name.
pub fn op_cases(seed: u64) -> Vec<(&'static str, Case)> {
    let mut r = rng(seed);
    let mut t = |shape: &[usize]| random_tensor(&mut r, shape);
    let ids: Vec<usize> = (0..6).map(|i| ((seed as usize) * 7 + i * 3) % 5).collect();
    let targets: Vec<usize> = (0..4).map(|i| ((seed as usize) + i * 5) % 6).collect();
    let mut cases = vec![
        (
            "add",
            case(vec![t(&[3, 4]), t(&[3, 4])], move |tp, v| {
                let y = tp.add(v[0], v[1]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "add_broadcast",
            case(vec![t(&[2, 3, 4]), t(&[4])], move |tp, v| {
                let y = tp.add(v[0], v[1]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "mul",
            case(vec![t(&[3, 4]), t(&[3, 4])], move |tp, v| {
                let y = tp.mul(v[0], v[1]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "mul_broadcast",
            case(vec![t(&[2, 3, 4]), t(&[3, 4])], move |tp, v| {
                let y = tp.mul(v[0], v[1]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "scale",
            case(vec![t(&[5])], move |tp, v| {
                let y = tp.scale(v[0], -0.7);
                project(tp, y, seed)
            }),
        ),
        (
            "matmul",
            case(vec![t(&[3, 4]), t(&[4, 2])], move |tp, v| {
                let y = tp.matmul(v[0], v[1]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "matmul_batched",
            case(vec![t(&[2, 3, 4]), t(&[2, 4, 2])], move |tp, v| {
                let y = tp.matmul(v[0], v[1]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "matmul_shared_rhs",
            case(vec![t(&[2, 3, 4]), t(&[4, 5])], move |tp, v| {
                let y = tp.matmul(v[0], v[1]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "matmul_shared_lhs",
            case(vec![t(&[3, 4]), t(&[2, 4, 2])], move |tp, v| {
                let y = tp.matmul(v[0], v[1]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "permute",
            case(vec![t(&[2, 3, 4])], move |tp, v| {
                let y = tp.permute(v[0], &[2, 0, 1]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "transpose",
            case(vec![t(&[3, 5])], move |tp, v| {
                let y = tp.transpose(v[0]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "reshape",
            case(vec![t(&[2, 6])], move |tp, v| {
                let y = tp.reshape(v[0], &[3, 4]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "layer_norm",
            case(vec![t(&[3, 5]), t(&[5])], move |tp, v| {
                let y = tp.layer_norm(v[0], v[1]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "gelu",
            case(vec![t(&[8])], move |tp, v| {
                let y = tp.gelu(v[0]);
                project(tp, y, seed)
            }),
        ),
        (
            "exp",
            case(vec![t(&[6])], move |tp, v| {
                let y = tp.exp(v[0]);
                project(tp, y, seed)
            }),
        ),
        (
            "softmax",
            case(vec![t(&[3, 5])], move |tp, v| {
                let y = tp.softmax(v[0]);
                project(tp, y, seed)
            }),
        ),
        (
            "cross_entropy",
            case(vec![t(&[4, 6])], move |tp, v| tp.cross_entropy(v[0], &targets, &[1.0, 0.0, 1.0, 1.0]).unwrap()),
        ),
        (
            "embedding",
            case(vec![t(&[5, 3])], move |tp, v| {
                let y = tp.embedding(v[0], &ids, &[2, 3]).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "mean_axis",
            case(vec![t(&[2, 3, 4])], move |tp, v| {
                let y = tp.mean_axis(v[0], 1).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "sum",
            case(vec![t(&[2, 3])], move |tp, v| {
                let y = tp.mul(v[0], v[0]).unwrap();
                tp.sum(y)
            }),
        ),
        (
            "mean",
            case(vec![t(&[2, 3])], move |tp, v| {
                let y = tp.mul(v[0], v[0]).unwrap();
                tp.mean(y)
            }),
        ),
        (
            "dropout",
            case(vec![t(&[10])], move |tp, v| {
                let y = tp.dropout(v[0], 0.3, seed).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "concat",
            case(vec![t(&[2, 3]), t(&[2, 2])], move |tp, v| {
                let y = tp.concat(&[v[0], v[1]], 1).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "slice",
            case(vec![t(&[3, 5])], move |tp, v| {
                let y = tp.slice(v[0], 1, 1, 3).unwrap();
                project(tp, y, seed)
            }),
        ),
        (
            "l2_normalize",
            case(vec![t(&[3, 4])], move |tp, v| {
                let y = tp.l2_normalize(v[0]);
                project(tp, y, seed)
            }),
        ),
    ];
    let mask = cappa_core::tensor::causal_mask::<f64>(3);
    cases.push((
        "attention",
        case(vec![t(&[2, 3, 4]), t(&[2, 3, 4]), t(&[2, 3, 4])], move |tp, v| {
            let m = tp.constant(mask.clone());
            let y = cappa_core::tensor::attention(tp, v[0], v[1], v[2], Some(m)).unwrap();
            project(tp, y, seed)
        }),
    ));
    cases
}

/// Worst relative error per op over `instances` random draws.
pub fn gradient_suite(instances: u64) -> Vec<(&'static str, f64)> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..instances {
        for (i, (name, c)) in op_cases(seed).into_iter().enumerate() {
            let err = max_rel_error(&*c.build, &c.inputs);
            if seed == 0 {
                worst.push((name, err));
            } else {
                worst[i].1 = worst[i].1.max(err);
            }
        }
    }
    worst
}
