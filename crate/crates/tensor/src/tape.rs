//! Reverse-mode differentiation by operation recording.
//!
//! Every primitive applied through a [`Tape`] produces a [`Var`]. When the
//! tape has gradients enabled and any input requires grad, the application is
//! appended to the tape; [`Tape::backward`] replays the records in reverse and
//! then clears them. With gradients disabled nothing is recorded and
//! intermediates are released as soon as their handles drop.

use std::collections::HashMap;
use std::rc::Rc;

use crate::array::Tensor;
use crate::error::{Result, TensorError};
use crate::kernels;
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

struct Node<F> {
    id: usize,
    value: Tensor<F>,
    requires_grad: bool,
}

/// Handle to a value produced on a tape.
pub struct Var<F>(Rc<Node<F>>);

impl<F> Clone for Var<F> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<F: Scalar> Var<F> {
    pub fn value(&self) -> &Tensor<F> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }
}

impl<F: Scalar> std::fmt::Debug for Var<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

enum Op<F> {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    MulScalar(F),
    AddScalar,
    MatMul,
    Permute(Vec<usize>),
    Reshape,
    Concat(usize),
    Slice { axis: usize, start: usize },
    Sum { axes: Vec<usize> },
    Mean { axes: Vec<usize>, count: usize },
    Exp,
    Log,
    Sqrt,
    Tanh,
    Gelu,
    Abs,
    Clamp(F, F),
    Softmax(usize),
    LayerNorm { axis: usize, rstd: Vec<F> },
    L2Norm(usize),
    BroadcastTo,
    Attention { scale: F, mask: Option<Vec<bool>> },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::MulScalar(_) => "mul_scalar",
            Op::AddScalar => "add_scalar",
            Op::MatMul => "matmul",
            Op::Permute(_) => "permute",
            Op::Reshape => "reshape",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Tanh => "tanh",
            Op::Gelu => "gelu",
            Op::Abs => "abs",
            Op::Clamp(..) => "clamp",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Norm(_) => "l2_norm",
            Op::BroadcastTo => "broadcast_to",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Record<F> {
    op: Op<F>,
    inputs: Vec<Var<F>>,
    output: Var<F>,
}

/// Gradients of a scalar loss with respect to every grad-requiring leaf.
pub struct Gradients<F> {
    grads: HashMap<usize, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: &Var<F>) -> Option<&Tensor<F>> {
        self.grads.get(&var.id())
    }

    pub fn take(&mut self, var: &Var<F>) -> Option<Tensor<F>> {
        self.grads.remove(&var.id())
    }
}

/// Ordered record of primitive applications for one forward pass.
pub struct Tape<F> {
    records: Vec<Record<F>>,
    next_id: usize,
    grad_enabled: bool,
    consumed: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { records: Vec::new(), next_id: 0, grad_enabled: true, consumed: false }
    }

    /// A tape that never records; used for inference.
    pub fn no_grad() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn make(&mut self, value: Tensor<F>, requires_grad: bool) -> Var<F> {
        let id = self.next_id;
        self.next_id += 1;
        Var(Rc::new(Node { id, value, requires_grad }))
    }

    /// Leaf whose gradient is wanted (when the tape records).
    pub fn param(&mut self, value: Tensor<F>) -> Var<F> {
        let rg = self.grad_enabled;
        self.make(value, rg)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var<F> {
        self.make(value, false)
    }

    fn record(&mut self, op: Op<F>, inputs: Vec<Var<F>>, value: Tensor<F>) -> Result<Var<F>> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires = self.grad_enabled && inputs.iter().any(|v| v.requires_grad());
        let out = self.make(value, requires);
        if requires {
            self.consumed = false;
            self.records.push(Record { op, inputs, output: out.clone() });
        }
        Ok(out)
    }

    // ── elementwise binary (broadcasting) ────────────────────────────

    pub fn add(&mut self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let v = kernels::zip_broadcast("add", a.value(), b.value(), |x, y| x + y)?;
        self.record(Op::Add, vec![a.clone(), b.clone()], v)
    }

    pub fn sub(&mut self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let v = kernels::zip_broadcast("sub", a.value(), b.value(), |x, y| x - y)?;
        self.record(Op::Sub, vec![a.clone(), b.clone()], v)
    }

    pub fn mul(&mut self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let v = kernels::zip_broadcast("mul", a.value(), b.value(), |x, y| x * y)?;
        self.record(Op::Mul, vec![a.clone(), b.clone()], v)
    }

    pub fn div(&mut self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let v = kernels::zip_broadcast("div", a.value(), b.value(), |x, y| x / y)?;
        self.record(Op::Div, vec![a.clone(), b.clone()], v)
    }

    pub fn neg(&mut self, a: &Var<F>) -> Result<Var<F>> {
        let v = a.value().map(|x| -x);
        self.record(Op::Neg, vec![a.clone()], v)
    }

    pub fn mul_scalar(&mut self, a: &Var<F>, c: F) -> Result<Var<F>> {
        let v = a.value().map(|x| x * c);
        self.record(Op::MulScalar(c), vec![a.clone()], v)
    }

    pub fn add_scalar(&mut self, a: &Var<F>, c: F) -> Result<Var<F>> {
        let v = a.value().map(|x| x + c);
        self.record(Op::AddScalar, vec![a.clone()], v)
    }

    // ── linear algebra and layout ────────────────────────────────────

    pub fn matmul(&mut self, a: &Var<F>, b: &Var<F>) -> Result<Var<F>> {
        let v = kernels::matmul(a.value(), b.value())?;
        self.record(Op::MatMul, vec![a.clone(), b.clone()], v)
    }

    pub fn permute(&mut self, a: &Var<F>, axes: &[usize]) -> Result<Var<F>> {
        let v = kernels::permute(a.value(), axes)?;
        self.record(Op::Permute(axes.to_vec()), vec![a.clone()], v)
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: &Var<F>, d0: usize, d1: usize) -> Result<Var<F>> {
        let rank = a.value().rank();
        kernels::check_axis("transpose", a.shape(), d0.max(d1))?;
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(d0, d1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: &Var<F>, shape: &[usize]) -> Result<Var<F>> {
        let v = a.value().reshaped(shape).map_err(|_| TensorError::ShapeMismatch {
            op: "reshape",
            lhs: a.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        self.record(Op::Reshape, vec![a.clone()], v)
    }

    pub fn concat(&mut self, parts: &[Var<F>], axis: usize) -> Result<Var<F>> {
        let first = parts.first().ok_or(TensorError::InvalidArgument { op: "concat", msg: "no inputs".into() })?;
        kernels::check_axis("concat", first.shape(), axis)?;
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = 0;
        for p in parts {
            let s = p.shape();
            let compatible =
                s.len() == out_shape.len() && s.iter().enumerate().all(|(i, &d)| i == axis || d == first.shape()[i]);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first.shape().to_vec(), rhs: s.to_vec() });
            }
            out_shape[axis] += s[axis];
        }
        let (outer, total, inner) = kernels::split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape()[axis] * inner;
                out.extend_from_slice(&p.value().data()[o * len..(o + 1) * len]);
            }
        }
        let v = Tensor::from_parts(out_shape, out);
        self.record(Op::Concat(axis), parts.to_vec(), v)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: &Var<F>, axis: usize, start: usize, end: usize) -> Result<Var<F>> {
        kernels::check_axis("slice", a.shape(), axis)?;
        if start >= end || end > a.shape()[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} invalid for extent {}", a.shape()[axis]),
            });
        }
        let v = slice_axis(a.value(), axis, start, end);
        self.record(Op::Slice { axis, start }, vec![a.clone()], v)
    }

    pub fn broadcast_to(&mut self, a: &Var<F>, shape: &[usize]) -> Result<Var<F>> {
        let v = kernels::broadcast_to(a.value(), shape)?;
        self.record(Op::BroadcastTo, vec![a.clone()], v)
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, a: &Var<F>, axes: &[usize], keepdim: bool) -> Result<Var<F>> {
        let v = kernels::sum_axes(a.value(), axes, keepdim)?;
        self.record(Op::Sum { axes: axes.to_vec() }, vec![a.clone()], v)
    }

    pub fn sum_all(&mut self, a: &Var<F>) -> Result<Var<F>> {
        let axes: Vec<usize> = (0..a.value().rank()).collect();
        self.sum(a, &axes, false)
    }

    pub fn mean(&mut self, a: &Var<F>, axes: &[usize], keepdim: bool) -> Result<Var<F>> {
        let summed = kernels::sum_axes(a.value(), axes, keepdim)?;
        let count: usize = axes.iter().map(|&i| a.shape()[i]).product();
        let inv = F::one() / F::from_usize(count).unwrap();
        let v = summed.map(|x| x * inv);
        self.record(Op::Mean { axes: axes.to_vec(), count }, vec![a.clone()], v)
    }

    // ── elementwise unary ────────────────────────────────────────────

    pub fn exp(&mut self, a: &Var<F>) -> Result<Var<F>> {
        let v = a.value().map(|x| x.exp());
        self.record(Op::Exp, vec![a.clone()], v)
    }

    pub fn log(&mut self, a: &Var<F>) -> Result<Var<F>> {
        if a.value().data().iter().any(|&x| x <= F::zero()) {
            return Err(TensorError::Domain { op: "log" });
        }
        let v = a.value().map(|x| x.ln());
        self.record(Op::Log, vec![a.clone()], v)
    }

    pub fn sqrt(&mut self, a: &Var<F>) -> Result<Var<F>> {
        if a.value().data().iter().any(|&x| x < F::zero()) {
            return Err(TensorError::Domain { op: "sqrt" });
        }
        let v = a.value().map(|x| x.sqrt());
        self.record(Op::Sqrt, vec![a.clone()], v)
    }

    pub fn tanh(&mut self, a: &Var<F>) -> Result<Var<F>> {
        let v = a.value().map(|x| x.tanh());
        self.record(Op::Tanh, vec![a.clone()], v)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: &Var<F>) -> Result<Var<F>> {
        let v = a.value().map(kernels::gelu_tanh);
        self.record(Op::Gelu, vec![a.clone()], v)
    }

    pub fn abs(&mut self, a: &Var<F>) -> Result<Var<F>> {
        let v = a.value().map(|x| x.abs());
        self.record(Op::Abs, vec![a.clone()], v)
    }

    /// Gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: &Var<F>, lo: F, hi: F) -> Result<Var<F>> {
        let v = a.value().map(|x| x.max(lo).min(hi));
        self.record(Op::Clamp(lo, hi), vec![a.clone()], v)
    }

    // ── normalizations ───────────────────────────────────────────────

    pub fn softmax(&mut self, a: &Var<F>, axis: usize) -> Result<Var<F>> {
        kernels::check_axis("softmax", a.shape(), axis)?;
        let v = kernels::softmax(a.value(), axis);
        self.record(Op::Softmax(axis), vec![a.clone()], v)
    }

    /// Zero-mean unit-variance normalization along `axis` (ε = 1e-5, no affine).
    pub fn layer_norm(&mut self, a: &Var<F>, axis: usize) -> Result<Var<F>> {
        kernels::check_axis("layer_norm", a.shape(), axis)?;
        let (v, rstd) = kernels::layer_norm(a.value(), axis, F::lit(LAYER_NORM_EPS));
        self.record(Op::LayerNorm { axis, rstd }, vec![a.clone()], v)
    }

    /// Euclidean norm along `axis`, which is removed. The gradient at a zero
    /// vector is taken to be zero.
    pub fn l2_norm(&mut self, a: &Var<F>, axis: usize) -> Result<Var<F>> {
        let sq = a.value().map(|x| x * x);
        let v = kernels::sum_axes(&sq, &[axis], false)?.map(|x| x.sqrt());
        self.record(Op::L2Norm(axis), vec![a.clone()], v)
    }

    /// Scaled dot-product attention over `[batch, len, dim]` operands, with an
    /// optional `[batch · keys]` mask (false = key excluded).
    pub fn attention(
        &mut self,
        q: &Var<F>,
        k: &Var<F>,
        v: &Var<F>,
        scale: F,
        key_mask: Option<&[bool]>,
    ) -> Result<Var<F>> {
        let out = kernels::attention(q.value(), k.value(), v.value(), scale, key_mask)?;
        self.record(
            Op::Attention { scale, mask: key_mask.map(<[bool]>::to_vec) },
            vec![q.clone(), k.clone(), v.clone()],
            out,
        )
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Gradients of scalar `loss` for every leaf that requires grad. Clears
    /// the tape; a second call without a new forward pass is an error.
    pub fn backward(&mut self, loss: &Var<F>) -> Result<Gradients<F>> {
        if loss.value().numel() != 1 {
            return Err(TensorError::NotScalar(loss.shape().to_vec()));
        }
        if self.records.is_empty() {
            return Err(if self.consumed { TensorError::TapeConsumed } else { TensorError::NoGradPath });
        }
        if !loss.requires_grad() {
            return Err(TensorError::NoGradPath);
        }
        let records = std::mem::take(&mut self.records);
        self.consumed = true;
        let mut grads: HashMap<usize, Tensor<F>> = HashMap::new();
        grads.insert(loss.id(), Tensor::ones(loss.shape()));
        for rec in records.iter().rev() {
            let Some(g) = grads.remove(&rec.output.id()) else {
                continue;
            };
            let input_grads = vjp(rec, &g)?;
            for (input, gi) in rec.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !input.requires_grad() {
                    continue;
                }
                if !gi.is_finite() {
                    return Err(TensorError::NonFinite { op: rec.op.name() });
                }
                match grads.get_mut(&input.id()) {
                    Some(acc) => {
                        for (x, &y) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *x = *x + y;
                        }
                    }
                    None => {
                        grads.insert(input.id(), gi);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn slice_axis<F: Scalar>(x: &Tensor<F>, axis: usize, start: usize, end: usize) -> Tensor<F> {
    let (outer, len, inner) = kernels::split_axis(x.shape(), axis);
    let width = (end - start) * inner;
    let mut out = Vec::with_capacity(outer * width);
    for o in 0..outer {
        let base = o * len * inner + start * inner;
        out.extend_from_slice(&x.data()[base..base + width]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = end - start;
    Tensor::from_parts(shape, out)
}

fn pad_axis<F: Scalar>(g: &Tensor<F>, full: &[usize], axis: usize, start: usize) -> Tensor<F> {
    let (outer, len, inner) = kernels::split_axis(full, axis);
    let width = g.shape()[axis] * inner;
    let mut out = vec![F::zero(); outer * len * inner];
    for o in 0..outer {
        let base = o * len * inner + start * inner;
        out[base..base + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
    }
    Tensor::from_parts(full.to_vec(), out)
}

fn zip_same<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn kept_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape.iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect()
}

fn matmul_vjp<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, g: &Tensor<F>) -> (Tensor<F>, Tensor<F>) {
    let ar = a.rank();
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let n = b.shape()[b.rank() - 1];
    let mut ga = vec![F::zero(); a.numel()];
    let mut gb = vec![F::zero(); b.numel()];
    if b.rank() == 2 {
        let rows: usize = a.shape()[..ar - 1].iter().product();
        // dA = dC Bᵀ ; dB = Aᵀ dC
        F::gemm(
            rows,
            n,
            k,
            F::one(),
            g.data(),
            n as isize,
            1,
            b.data(),
            1,
            n as isize,
            F::zero(),
            &mut ga,
            k as isize,
            1,
        );
        F::gemm(
            k,
            rows,
            n,
            F::one(),
            a.data(),
            1,
            k as isize,
            g.data(),
            n as isize,
            1,
            F::zero(),
            &mut gb,
            n as isize,
            1,
        );
    } else {
        let batch: usize = a.shape()[..ar - 2].iter().product();
        for bi in 0..batch {
            let gs = &g.data()[bi * m * n..];
            F::gemm(
                m,
                n,
                k,
                F::one(),
                gs,
                n as isize,
                1,
                &b.data()[bi * k * n..],
                1,
                n as isize,
                F::zero(),
                &mut ga[bi * m * k..],
                k as isize,
                1,
            );
            F::gemm(
                k,
                m,
                n,
                F::one(),
                &a.data()[bi * m * k..],
                1,
                k as isize,
                gs,
                n as isize,
                1,
                F::zero(),
                &mut gb[bi * k * n..],
                n as isize,
                1,
            );
        }
    }
    (Tensor::from_parts(a.shape().to_vec(), ga), Tensor::from_parts(b.shape().to_vec(), gb))
}

fn vjp<F: Scalar>(rec: &Record<F>, g: &Tensor<F>) -> Result<Vec<Option<Tensor<F>>>> {
    let x = |i: usize| rec.inputs[i].value();
    let y = rec.output.value();
    let needs = |i: usize| rec.inputs[i].requires_grad();
    let out = match &rec.op {
        Op::Add => vec![Some(kernels::reduce_to(g, x(0).shape())), Some(kernels::reduce_to(g, x(1).shape()))],
        Op::Sub => {
            vec![Some(kernels::reduce_to(g, x(0).shape())), Some(kernels::reduce_to(&g.map(|v| -v), x(1).shape()))]
        }
        Op::Mul => {
            let ga = needs(0)
                .then(|| {
                    kernels::zip_broadcast("mul", g, x(1), |a, b| a * b).map(|t| kernels::reduce_to(&t, x(0).shape()))
                })
                .transpose()?;
            let gb = needs(1)
                .then(|| {
                    kernels::zip_broadcast("mul", g, x(0), |a, b| a * b).map(|t| kernels::reduce_to(&t, x(1).shape()))
                })
                .transpose()?;
            vec![ga, gb]
        }
        Op::Div => {
            let ga = needs(0)
                .then(|| {
                    kernels::zip_broadcast("div", g, x(1), |a, b| a / b).map(|t| kernels::reduce_to(&t, x(0).shape()))
                })
                .transpose()?;
            let gb = if needs(1) {
                let gy = zip_same(g, y, |a, b| a * b);
                let t = kernels::zip_broadcast("div", &gy, x(1), |a, b| -a / b)?;
                Some(kernels::reduce_to(&t, x(1).shape()))
            } else {
                None
            };
            vec![ga, gb]
        }
        Op::Neg => vec![Some(g.map(|v| -v))],
        Op::MulScalar(c) => {
            let c = *c;
            vec![Some(g.map(|v| v * c))]
        }
        Op::AddScalar | Op::Reshape => vec![Some(Tensor::from_parts(x(0).shape().to_vec(), g.data().to_vec()))],
        Op::MatMul => {
            let (ga, gb) = matmul_vjp(x(0), x(1), g);
            vec![Some(ga), Some(gb)]
        }
        Op::Permute(axes) => vec![Some(kernels::permute(g, &kernels::inverse_permutation(axes))?)],
        Op::Concat(axis) => {
            let mut start = 0;
            rec.inputs
                .iter()
                .map(|inp| {
                    let len = inp.shape()[*axis];
                    let part = slice_axis(g, *axis, start, start + len);
                    start += len;
                    Some(part)
                })
                .collect()
        }
        Op::Slice { axis, start } => vec![Some(pad_axis(g, x(0).shape(), *axis, *start))],
        Op::Sum { axes } => {
            let kept = Tensor::from_parts(kept_shape(x(0).shape(), axes), g.data().to_vec());
            vec![Some(kernels::broadcast_to(&kept, x(0).shape())?)]
        }
        Op::Mean { axes, count } => {
            let inv = F::one() / F::from_usize(*count).unwrap();
            let kept = Tensor::from_parts(kept_shape(x(0).shape(), axes), g.data().iter().map(|&v| v * inv).collect());
            vec![Some(kernels::broadcast_to(&kept, x(0).shape())?)]
        }
        Op::Exp => vec![Some(zip_same(g, y, |a, b| a * b))],
        Op::Log => vec![Some(zip_same(g, x(0), |a, b| a / b))],
        Op::Sqrt => {
            let half = F::lit(0.5);
            vec![Some(zip_same(g, y, |a, b| a * half / b))]
        }
        Op::Tanh => vec![Some(zip_same(g, y, |a, b| a * (F::one() - b * b)))],
        Op::Gelu => vec![Some(zip_same(g, x(0), |a, b| a * kernels::gelu_tanh_grad(b)))],
        Op::Abs => vec![Some(zip_same(g, x(0), |a, b| {
            if b > F::zero() {
                a
            } else if b < F::zero() {
                -a
            } else {
                F::zero()
            }
        }))],
        Op::Clamp(lo, hi) => {
            let (lo, hi) = (*lo, *hi);
            vec![Some(zip_same(g, x(0), |a, b| if b >= lo && b <= hi { a } else { F::zero() }))]
        }
        Op::Softmax(axis) => {
            let (outer, len, inner) = kernels::split_axis(y.shape(), *axis);
            let (yd, gd) = (y.data(), g.data());
            let mut out = vec![F::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = F::zero();
                    for j in 0..len {
                        dot = dot + gd[base + j * inner] * yd[base + j * inner];
                    }
                    for j in 0..len {
                        let p = base + j * inner;
                        out[p] = yd[p] * (gd[p] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), out))]
        }
        Op::LayerNorm { axis, rstd } => {
            let (outer, len, inner) = kernels::split_axis(y.shape(), *axis);
            let n = F::from_usize(len).unwrap();
            let (yd, gd) = (y.data(), g.data());
            let mut out = vec![F::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let (mut mg, mut mgy) = (F::zero(), F::zero());
                    for j in 0..len {
                        let p = base + j * inner;
                        mg = mg + gd[p];
                        mgy = mgy + gd[p] * yd[p];
                    }
                    mg = mg / n;
                    mgy = mgy / n;
                    let r = rstd[o * inner + i];
                    for j in 0..len {
                        let p = base + j * inner;
                        out[p] = r * (gd[p] - mg - yd[p] * mgy);
                    }
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), out))]
        }
        Op::L2Norm(axis) => {
            let (outer, len, inner) = kernels::split_axis(x(0).shape(), *axis);
            let (xd, yd, gd) = (x(0).data(), y.data(), g.data());
            let mut out = vec![F::zero(); xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let r = o * inner + i;
                    if yd[r] == F::zero() {
                        continue;
                    }
                    let s = gd[r] / yd[r];
                    for j in 0..len {
                        let p = o * len * inner + j * inner + i;
                        out[p] = xd[p] * s;
                    }
                }
            }
            vec![Some(Tensor::from_parts(x(0).shape().to_vec(), out))]
        }
        Op::BroadcastTo => vec![Some(kernels::reduce_to(g, x(0).shape()))],
        Op::Attention { scale, mask } => {
            let (dq, dk, dv) = kernels::attention_backward(x(0), x(1), x(2), *scale, mask.as_deref(), g);
            vec![Some(dq), Some(dk), Some(dv)]
        }
    };
    Ok(out)
}
