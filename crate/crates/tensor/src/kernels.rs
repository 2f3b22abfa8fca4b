//! Raw array routines shared by the forward and backward passes. All
//! reductions accumulate sequentially in row-major order so results are
//! bit-reproducible for identical inputs.

use crate::array::Tensor;
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, aligned on trailing dimensions.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` after broadcasting (0 on expanded axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len()).map(|i| if i < lead || shape[i - lead] == 1 { 0 } else { own[i - lead] }).collect()
}

/// Visits every multi-index of `shape` in row-major order, passing the linear
/// offsets into each of the strided operands.
fn for_each_offset<const K: usize>(shape: &[usize], operand_strides: [&[usize]; K], mut f: impl FnMut([usize; K])) {
    let n: usize = shape.iter().product();
    if n == 0 {
        return;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut offs = [0usize; K];
    for _ in 0..n {
        f(offs);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            for (k, s) in operand_strides.iter().enumerate() {
                offs[k] += s[ax];
            }
            if idx[ax] < shape[ax] {
                break;
            }
            for (k, s) in operand_strides.iter().enumerate() {
                offs[k] -= s[ax] * shape[ax];
            }
            idx[ax] = 0;
        }
    }
}

/// `trailing` is a suffix of `full` once leading unit extents are stripped.
fn is_suffix(trailing: &[usize], full: &[usize]) -> bool {
    let t: Vec<usize> = trailing.iter().copied().skip_while(|&d| d == 1).collect();
    t.len() <= full.len() && full[full.len() - t.len()..] == t[..]
}

/// `leading` has the rank of `full`, matches it on a leading block of axes
/// and is 1 on the rest.
fn is_prefix(leading: &[usize], full: &[usize]) -> bool {
    if leading.len() != full.len() {
        return false;
    }
    let k = leading.iter().rposition(|&d| d != 1).map_or(0, |i| i + 1);
    leading[..k] == full[..k]
}

pub fn zip_broadcast<F: Scalar>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let (ad, bd) = (a.data(), b.data());
    let n: usize = out_shape.iter().product();
    let data: Vec<F> = if a.shape() == b.shape() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if a.shape() == out_shape.as_slice() && is_suffix(b.shape(), &out_shape) {
        let mut out = Vec::with_capacity(n);
        for row in ad.chunks_exact(bd.len().max(1)) {
            out.extend(row.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        out
    } else if b.shape() == out_shape.as_slice() && is_suffix(a.shape(), &out_shape) {
        let mut out = Vec::with_capacity(n);
        for row in bd.chunks_exact(ad.len().max(1)) {
            out.extend(ad.iter().zip(row).map(|(&x, &y)| f(x, y)));
        }
        out
    } else if a.shape() == out_shape.as_slice() && is_prefix(b.shape(), &out_shape) && !bd.is_empty() {
        let mut out = Vec::with_capacity(n);
        for (block, &y) in ad.chunks_exact(n / bd.len()).zip(bd) {
            out.extend(block.iter().map(|&x| f(x, y)));
        }
        out
    } else if b.shape() == out_shape.as_slice() && is_prefix(a.shape(), &out_shape) && !ad.is_empty() {
        let mut out = Vec::with_capacity(n);
        for (block, &x) in bd.chunks_exact(n / ad.len()).zip(ad) {
            out.extend(block.iter().map(|&y| f(x, y)));
        }
        out
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut out = Vec::with_capacity(n);
        for_each_offset(&out_shape, [&sa, &sb], |[ia, ib]| out.push(f(ad[ia], bd[ib])));
        out
    };
    Ok(Tensor::from_parts(out_shape, data))
}

pub fn broadcast_to<F: Scalar>(x: &Tensor<F>, shape: &[usize]) -> Result<Tensor<F>> {
    match broadcast_shape(x.shape(), shape) {
        Some(s) if s == shape => {}
        _ => {
            return Err(TensorError::ShapeMismatch { op: "broadcast_to", lhs: x.shape().to_vec(), rhs: shape.to_vec() })
        }
    }
    let src = x.data();
    let n: usize = shape.iter().product();
    let data = if is_suffix(x.shape(), shape) {
        let m = src.len();
        (0..n).map(|i| src[i % m]).collect()
    } else {
        let sx = broadcast_strides(x.shape(), shape);
        let mut out = Vec::with_capacity(n);
        for_each_offset(shape, [&sx], |[i]| out.push(src[i]));
        out
    };
    Ok(Tensor::from_parts(shape.to_vec(), data))
}

/// Sums `x` (of a broadcast shape) back down to `shape`.
pub fn reduce_to<F: Scalar>(x: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    if x.shape() == shape {
        return x.clone();
    }
    let m: usize = shape.iter().product();
    let mut out = vec![F::zero(); m];
    let src = x.data();
    if is_suffix(shape, x.shape()) {
        for (i, &v) in src.iter().enumerate() {
            out[i % m] = out[i % m] + v;
        }
    } else {
        let so = broadcast_strides(shape, x.shape());
        let mut i = 0;
        for_each_offset(x.shape(), [&so], |[o]| {
            out[o] = out[o] + src[i];
            i += 1;
        });
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub fn permute<F: Scalar>(x: &Tensor<F>, axes: &[usize]) -> Result<Tensor<F>> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(TensorError::InvalidArgument {
            op: "permute",
            msg: format!("axes {axes:?} are not a permutation of rank {rank}"),
        });
    }
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for_each_offset(&out_shape, [&mapped], |[i]| out.push(src[i]));
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// (outer, len, inner) decomposition around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidArgument { op, msg: format!("axis {axis} out of range for shape {shape:?}") });
    }
    Ok(())
}

pub fn sum_axes<F: Scalar>(x: &Tensor<F>, axes: &[usize], keepdim: bool) -> Result<Tensor<F>> {
    for &a in axes {
        check_axis("sum", x.shape(), a)?;
    }
    let kept: Vec<usize> = x.shape().iter().enumerate().map(|(i, &d)| if axes.contains(&i) { 1 } else { d }).collect();
    let reduced = reduce_to(x, &kept);
    if keepdim {
        return Ok(reduced);
    }
    let squeezed: Vec<usize> =
        x.shape().iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
    Ok(Tensor::from_parts(squeezed, reduced.into_data()))
}

pub fn softmax<F: Scalar>(x: &Tensor<F>, axis: usize) -> Tensor<F> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![F::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = F::neg_infinity();
            for j in 0..len {
                max = max.max(src[base + j * inner]);
            }
            let mut total = F::zero();
            for j in 0..len {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total = total + e;
            }
            for j in 0..len {
                out[base + j * inner] = out[base + j * inner] / total;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Normalizes along `axis` to zero mean and unit (biased) variance; returns
/// the output and the per-slice reciprocal standard deviations.
pub fn layer_norm<F: Scalar>(x: &Tensor<F>, axis: usize, eps: F) -> (Tensor<F>, Vec<F>) {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let n = F::from_usize(len).unwrap();
    let mut out = vec![F::zero(); src.len()];
    let mut rstd = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mean = F::zero();
            for j in 0..len {
                mean = mean + src[base + j * inner];
            }
            mean = mean / n;
            let mut var = F::zero();
            for j in 0..len {
                let d = src[base + j * inner] - mean;
                var = var + d * d;
            }
            let r = F::one() / (var / n + eps).sqrt();
            for j in 0..len {
                out[base + j * inner] = (src[base + j * inner] - mean) * r;
            }
            rstd.push(r);
        }
    }
    (Tensor::from_parts(x.shape().to_vec(), out), rstd)
}

/// Batched product over matching leading dimensions. `b` may also be a bare
/// matrix shared across the batch of `a`.
pub fn matmul_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let err = || TensorError::ShapeMismatch { op: "matmul", lhs: a.to_vec(), rhs: b.to_vec() };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    if b.len() != 2 && a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(err());
    }
    let mut out = a[..a.len() - 2].to_vec();
    out.extend([m, n]);
    Ok(out)
}

pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let out_shape = matmul_shape(a.shape(), b.shape())?;
    let ar = a.rank();
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let n = b.shape()[b.rank() - 1];
    let mut out = vec![F::zero(); out_shape.iter().product()];
    if b.rank() == 2 {
        let rows: usize = a.shape()[..ar - 1].iter().product();
        F::gemm(
            rows,
            k,
            n,
            F::one(),
            a.data(),
            k as isize,
            1,
            b.data(),
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
    } else {
        let batch: usize = a.shape()[..ar - 2].iter().product();
        for bi in 0..batch {
            F::gemm(
                m,
                k,
                n,
                F::one(),
                &a.data()[bi * m * k..],
                k as isize,
                1,
                &b.data()[bi * k * n..],
                n as isize,
                1,
                F::zero(),
                &mut out[bi * m * n..],
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Query rows processed together by the fused attention kernels.
const ATTN_CHUNK: usize = 64;

fn check_attention_shapes(q: &[usize], k: &[usize], v: &[usize], mask: Option<&[bool]>) -> Result<()> {
    let bad = || TensorError::ShapeMismatch { op: "attention", lhs: q.to_vec(), rhs: k.to_vec() };
    if q.len() != 3 || k.len() != 3 || v.len() != 3 {
        return Err(bad());
    }
    if q[0] != k[0] || k[0] != v[0] || q[2] != k[2] || k[1] != v[1] {
        return Err(bad());
    }
    if let Some(m) = mask {
        if m.len() != k[0] * k[1] {
            return Err(TensorError::InvalidArgument {
                op: "attention",
                msg: format!("key mask has {} entries, expected {}", m.len(), k[0] * k[1]),
            });
        }
    }
    Ok(())
}

/// Fills `p` (rows × lk) with softmax(scale · q_chunk · kᵀ), excluding masked keys.
fn attention_probs<F: Scalar>(
    qc: &[F],
    rows: usize,
    kb: &[F],
    lk: usize,
    dh: usize,
    scale: F,
    mask: Option<&[bool]>,
    p: &mut [F],
) {
    F::gemm(rows, dh, lk, scale, qc, dh as isize, 1, kb, 1, dh as isize, F::zero(), p, lk as isize, 1);
    for r in 0..rows {
        let row = &mut p[r * lk..(r + 1) * lk];
        let mut max = F::neg_infinity();
        for (j, &s) in row.iter().enumerate() {
            if mask.is_none_or(|m| m[j]) {
                max = max.max(s);
            }
        }
        let mut total = F::zero();
        for (j, s) in row.iter_mut().enumerate() {
            if mask.is_none_or(|m| m[j]) {
                *s = (*s - max).exp();
                total = total + *s;
            } else {
                *s = F::zero();
            }
        }
        if total > F::zero() {
            for s in row.iter_mut() {
                *s = *s / total;
            }
        }
    }
}

/// Fused scaled dot-product attention over `[batch, len, dim]` operands.
/// Scores are produced in row chunks and never stored whole.
pub fn attention<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    scale: F,
    key_mask: Option<&[bool]>,
) -> Result<Tensor<F>> {
    check_attention_shapes(q.shape(), k.shape(), v.shape(), key_mask)?;
    let (batch, lq, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (lk, dv) = (k.shape()[1], v.shape()[2]);
    let mut out = vec![F::zero(); batch * lq * dv];
    let mut p = vec![F::zero(); ATTN_CHUNK * lk];
    for b in 0..batch {
        let kb = &k.data()[b * lk * dh..(b + 1) * lk * dh];
        let vb = &v.data()[b * lk * dv..(b + 1) * lk * dv];
        let mb = key_mask.map(|m| &m[b * lk..(b + 1) * lk]);
        for r0 in (0..lq).step_by(ATTN_CHUNK) {
            let rows = ATTN_CHUNK.min(lq - r0);
            let qc = &q.data()[(b * lq + r0) * dh..];
            attention_probs(qc, rows, kb, lk, dh, scale, mb, &mut p);
            let oc = &mut out[(b * lq + r0) * dv..];
            F::gemm(rows, lk, dv, F::one(), &p, lk as isize, 1, vb, dv as isize, 1, F::zero(), oc, dv as isize, 1);
        }
    }
    Ok(Tensor::from_parts(vec![batch, lq, dv], out))
}

/// Explicit attention probabilities `[batch, lq, lk]`, for inspection.
pub fn attention_weights<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    scale: F,
    key_mask: Option<&[bool]>,
) -> Result<Tensor<F>> {
    check_attention_shapes(q.shape(), k.shape(), k.shape(), key_mask)?;
    let (batch, lq, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let lk = k.shape()[1];
    let mut out = vec![F::zero(); batch * lq * lk];
    for b in 0..batch {
        let kb = &k.data()[b * lk * dh..(b + 1) * lk * dh];
        let mb = key_mask.map(|m| &m[b * lk..(b + 1) * lk]);
        let qb = &q.data()[b * lq * dh..];
        attention_probs(qb, lq, kb, lk, dh, scale, mb, &mut out[b * lq * lk..(b + 1) * lq * lk]);
    }
    Ok(Tensor::from_parts(vec![batch, lq, lk], out))
}

/// Vector-Jacobian product of [`attention`]; recomputes probabilities chunk by chunk.
#[allow(clippy::type_complexity)]
pub fn attention_backward<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    scale: F,
    key_mask: Option<&[bool]>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (batch, lq, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (lk, dv) = (k.shape()[1], v.shape()[2]);
    let mut dq = vec![F::zero(); q.numel()];
    let mut dk = vec![F::zero(); k.numel()];
    let mut dvv = vec![F::zero(); v.numel()];
    let mut p = vec![F::zero(); ATTN_CHUNK * lk];
    let mut dp = vec![F::zero(); ATTN_CHUNK * lk];
    for b in 0..batch {
        let kb = &k.data()[b * lk * dh..(b + 1) * lk * dh];
        let vb = &v.data()[b * lk * dv..(b + 1) * lk * dv];
        let mb = key_mask.map(|m| &m[b * lk..(b + 1) * lk]);
        for r0 in (0..lq).step_by(ATTN_CHUNK) {
            let rows = ATTN_CHUNK.min(lq - r0);
            let qc = &q.data()[(b * lq + r0) * dh..];
            let goc = &grad_out.data()[(b * lq + r0) * dv..];
            attention_probs(qc, rows, kb, lk, dh, scale, mb, &mut p);
            // dV += Pᵀ dO
            F::gemm(
                lk,
                rows,
                dv,
                F::one(),
                &p,
                1,
                lk as isize,
                goc,
                dv as isize,
                1,
                F::one(),
                &mut dvv[b * lk * dv..],
                dv as isize,
                1,
            );
            // dP = dO Vᵀ
            F::gemm(
                rows,
                dv,
                lk,
                F::one(),
                goc,
                dv as isize,
                1,
                vb,
                1,
                dv as isize,
                F::zero(),
                &mut dp,
                lk as isize,
                1,
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)) · scale
            for r in 0..rows {
                let pr = &p[r * lk..(r + 1) * lk];
                let dr = &mut dp[r * lk..(r + 1) * lk];
                let mut dot = F::zero();
                for j in 0..lk {
                    dot = dot + pr[j] * dr[j];
                }
                for j in 0..lk {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            // dQ = dS K ; dK += dSᵀ Q
            F::gemm(
                rows,
                lk,
                dh,
                F::one(),
                &dp,
                lk as isize,
                1,
                kb,
                dh as isize,
                1,
                F::zero(),
                &mut dq[(b * lq + r0) * dh..],
                dh as isize,
                1,
            );
            F::gemm(
                lk,
                rows,
                dh,
                F::one(),
                &dp,
                1,
                lk as isize,
                qc,
                dh as isize,
                1,
                F::one(),
                &mut dk[b * lk * dh..],
                dh as isize,
                1,
            );
        }
    }
    (
        Tensor::from_parts(q.shape().to_vec(), dq),
        Tensor::from_parts(k.shape().to_vec(), dk),
        Tensor::from_parts(v.shape().to_vec(), dvv),
    )
}

pub fn gelu_tanh<F: Scalar>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    // 0.5 (1 + tanh u) = 1 / (1 + exp(-2u))
    let u = c * (x + F::lit(0.044715) * x * x * x);
    x / (F::one() + (-(u + u)).exp())
}

pub fn gelu_tanh_grad<F: Scalar>(x: F) -> F {
    let c = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = F::lit(0.044715);
    let inner = c * (x + a * x * x * x);
    let s = F::one() / (F::one() + (-(inner + inner)).exp());
    s + F::lit(2.0) * x * s * (F::one() - s) * c * (F::one() + F::lit(3.0) * a * x * x)
}
