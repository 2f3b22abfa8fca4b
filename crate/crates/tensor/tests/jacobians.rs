//! Every primitive's reverse-mode product against central finite differences
//! (64-bit, h = 1e-5) on randomized shapes.

use dvgt_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

type Build = dyn Fn(&mut Tape<f64>, &[Var<f64>]) -> Var<f64>;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn rand_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

/// Weighted sum of the op output so the scalar probes every output element.
fn scalar_of(build: &Build, inputs: &[Tensor<f64>], weights: &Tensor<f64>, grad: bool) -> (f64, Vec<Tensor<f64>>) {
    let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(&out, &w).unwrap();
    let loss = tape.sum_all(&prod).unwrap();
    let value = loss.value().item();
    if !grad {
        return (value, vec![]);
    }
    let g = tape.backward(&loss).unwrap();
    let grads = vars.iter().map(|v| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))).collect();
    (value, grads)
}

fn check(name: &str, build: &Build, inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng) {
    let out_shape = {
        let mut tape = Tape::no_grad();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        build(&mut tape, &vars).shape().to_vec()
    };
    let weights = rand_tensor(rng, &out_shape, -1.0, 1.0);
    let (_, analytic) = scalar_of(build, &inputs, &weights, true);
    for (k, input) in inputs.iter().enumerate() {
        let mut diff2 = 0.0;
        let mut norm2: f64 = 0.0;
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let fd =
                (scalar_of(build, &plus, &weights, false).0 - scalar_of(build, &minus, &weights, false).0) / (2.0 * H);
            let a = analytic[k].data()[i];
            diff2 += (a - fd).powi(2);
            norm2 = norm2.max(a * a).max(fd * fd);
        }
        let scale = norm2.sqrt().max(1e-3) * (input.numel() as f64).sqrt();
        let rel = diff2.sqrt() / scale;
        assert!(rel < TOL, "{name} input {k} shape {:?}: relative error {rel:e}", input.shape());
    }
}

fn run(name: &str, seed: u64, mut gen: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build>)) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..TRIALS {
        let (inputs, build) = gen(&mut rng);
        check(name, build.as_ref(), inputs, &mut rng);
    }
}

fn unary(name: &str, seed: u64, lo: f64, hi: f64, f: fn(&mut Tape<f64>, &Var<f64>) -> Var<f64>) {
    run(name, seed, |rng| {
        let rank = rng.gen_range(1..=3);
        let shape = rand_shape(rng, rank);
        (vec![rand_tensor(rng, &shape, lo, hi)], Box::new(move |t: &mut Tape<f64>, v: &[Var<f64>]| f(t, &v[0])))
    });
}

#[test]
fn elementwise_unary() {
    unary("exp", 1, -2.0, 2.0, |t, x| t.exp(x).unwrap());
    unary("log", 2, 0.2, 3.0, |t, x| t.log(x).unwrap());
    unary("sqrt", 3, 0.2, 3.0, |t, x| t.sqrt(x).unwrap());
    unary("tanh", 4, -2.0, 2.0, |t, x| t.tanh(x).unwrap());
    unary("gelu", 5, -3.0, 3.0, |t, x| t.gelu(x).unwrap());
    unary("abs", 6, 0.1, 2.0, |t, x| t.abs(x).unwrap());
    unary("neg", 7, -2.0, 2.0, |t, x| t.neg(x).unwrap());
    unary("mul_scalar", 8, -2.0, 2.0, |t, x| t.mul_scalar(x, -1.7).unwrap());
    unary("add_scalar", 9, -2.0, 2.0, |t, x| t.add_scalar(x, 0.3).unwrap());
    unary("clamp_interior", 10, -0.9, 0.9, |t, x| t.clamp(x, -1.0, 1.0).unwrap());
}

#[test]
fn broadcasting_binary() {
    type BinOp = fn(&mut Tape<f64>, &Var<f64>, &Var<f64>) -> Var<f64>;
    let ops: [(&str, BinOp); 4] = [
        ("add", |t, a, b| t.add(a, b).unwrap()),
        ("sub", |t, a, b| t.sub(a, b).unwrap()),
        ("mul", |t, a, b| t.mul(a, b).unwrap()),
        ("div", |t, a, b| t.div(a, b).unwrap()),
    ];
    for (seed, (name, f)) in ops.into_iter().enumerate() {
        run(name, 100 + seed as u64, move |rng| {
            let rank = rng.gen_range(1..=3);
            let a_shape = rand_shape(rng, rank);
            // b: random subset of a's trailing axes collapsed to 1, random leading drop
            let drop = rng.gen_range(0..rank);
            let b_shape: Vec<usize> = a_shape[drop..].iter().map(|&d| if rng.gen_bool(0.4) { 1 } else { d }).collect();
            let (a, b) = if rng.gen_bool(0.5) { (a_shape, b_shape) } else { (b_shape, a_shape) };
            let ta = rand_tensor(rng, &a, -2.0, 2.0);
            let tb = if name == "div" { rand_tensor(rng, &b, 0.5, 2.0) } else { rand_tensor(rng, &b, -2.0, 2.0) };
            (vec![ta, tb], Box::new(move |t: &mut Tape<f64>, v: &[Var<f64>]| f(t, &v[0], &v[1])))
        });
    }
}

#[test]
fn matmul_batched_and_shared() {
    run("matmul", 200, |rng| {
        let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let batch_rank = rng.gen_range(0..=2);
        let batch: Vec<usize> = rand_shape(rng, batch_rank);
        let mut a = batch.clone();
        a.extend([m, k]);
        let b = if rng.gen_bool(0.5) {
            vec![k, n]
        } else {
            let mut b = batch.clone();
            b.extend([k, n]);
            b
        };
        let ta = rand_tensor(rng, &a, -1.0, 1.0);
        let tb = rand_tensor(rng, &b, -1.0, 1.0);
        (vec![ta, tb], Box::new(|t: &mut Tape<f64>, v: &[Var<f64>]| t.matmul(&v[0], &v[1]).unwrap()))
    });
}

#[test]
fn layout_ops() {
    run("permute", 300, |rng| {
        let rank = rng.gen_range(1..=4);
        let shape = rand_shape(rng, rank);
        let mut axes: Vec<usize> = (0..rank).collect();
        for i in (1..rank).rev() {
            axes.swap(i, rng.gen_range(0..=i));
        }
        (
            vec![rand_tensor(rng, &shape, -1.0, 1.0)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var<f64>]| t.permute(&v[0], &axes).unwrap()),
        )
    });
    run("reshape", 301, |rng| {
        let shape = rand_shape(rng, 3);
        let flat = vec![shape[0] * shape[1], shape[2]];
        (
            vec![rand_tensor(rng, &shape, -1.0, 1.0)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var<f64>]| t.reshape(&v[0], &flat).unwrap()),
        )
    });
    run("concat", 302, |rng| {
        let rank = rng.gen_range(1..=3);
        let axis = rng.gen_range(0..rank);
        let base = rand_shape(rng, rank);
        let parts = rng.gen_range(1..=3);
        let inputs = (0..parts)
            .map(|_| {
                let mut s = base.clone();
                s[axis] = rng.gen_range(1..=3);
                rand_tensor(rng, &s, -1.0, 1.0)
            })
            .collect();
        (inputs, Box::new(move |t: &mut Tape<f64>, v: &[Var<f64>]| t.concat(v, axis).unwrap()))
    });
    run("slice", 303, |rng| {
        let rank = rng.gen_range(1..=3);
        let axis = rng.gen_range(0..rank);
        let mut shape = rand_shape(rng, rank);
        shape[axis] += 1;
        let start = rng.gen_range(0..shape[axis]);
        let end = rng.gen_range(start + 1..=shape[axis]);
        (
            vec![rand_tensor(rng, &shape, -1.0, 1.0)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var<f64>]| t.slice(&v[0], axis, start, end).unwrap()),
        )
    });
    run("broadcast_to", 304, |rng| {
        let rank = rng.gen_range(1..=3);
        let target = rand_shape(rng, rank + 1);
        let src: Vec<usize> = target[1..].iter().map(|&d| if rng.gen_bool(0.5) { 1 } else { d }).collect();
        (
            vec![rand_tensor(rng, &src, -1.0, 1.0)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var<f64>]| t.broadcast_to(&v[0], &target).unwrap()),
        )
    });
}

#[test]
fn reductions_and_normalizations() {
    fn axis_case(rng: &mut ChaCha8Rng) -> (Vec<usize>, usize) {
        let rank = rng.gen_range(1..=3);
        let mut shape = rand_shape(rng, rank);
        let axis = rng.gen_range(0..rank);
        shape[axis] = rng.gen_range(2..=5);
        (shape, axis)
    }
    run("sum", 400, |rng| {
        let (shape, axis) = axis_case(rng);
        let keep = rng.gen_bool(0.5);
        (
            vec![rand_tensor(rng, &shape, -1.0, 1.0)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var<f64>]| t.sum(&v[0], &[axis], keep).unwrap()),
        )
    });
    run("mean", 401, |rng| {
        let (shape, axis) = axis_case(rng);
        (
            vec![rand_tensor(rng, &shape, -1.0, 1.0)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var<f64>]| t.mean(&v[0], &[axis], true).unwrap()),
        )
    });
    run("softmax", 402, |rng| {
        let (shape, axis) = axis_case(rng);
        (
            vec![rand_tensor(rng, &shape, -2.0, 2.0)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var<f64>]| t.softmax(&v[0], axis).unwrap()),
        )
    });
    run("layer_norm", 403, |rng| {
        let (shape, axis) = axis_case(rng);
        (
            vec![rand_tensor(rng, &shape, -2.0, 2.0)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var<f64>]| t.layer_norm(&v[0], axis).unwrap()),
        )
    });
    run("l2_norm", 404, |rng| {
        let (shape, axis) = axis_case(rng);
        (
            vec![rand_tensor(rng, &shape, 0.1, 2.0)],
            Box::new(move |t: &mut Tape<f64>, v: &[Var<f64>]| t.l2_norm(&v[0], axis).unwrap()),
        )
    });
}

#[test]
fn fused_attention() {
    run("attention", 500, |rng| {
        let (b, lq, lk, d, dv) =
            (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..4));
        let mask: Option<Vec<bool>> =
            rng.gen_bool(0.3).then(|| (0..b * lk).map(|i| i % lk == 0 || rng.gen_bool(0.6)).collect());
        let scale = rng.gen_range(0.2..1.0);
        let inputs = vec![
            rand_tensor(rng, &[b, lq, d], -1.0, 1.0),
            rand_tensor(rng, &[b, lk, d], -1.0, 1.0),
            rand_tensor(rng, &[b, lk, dv], -1.0, 1.0),
        ];
        (
            inputs,
            Box::new(move |t: &mut Tape<f64>, v: &[Var<f64>]| {
                t.attention(&v[0], &v[1], &v[2], scale, mask.as_deref()).unwrap()
            }),
        )
    });
}
