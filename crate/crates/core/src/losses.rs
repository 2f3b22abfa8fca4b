//! Training objective and target coordinate scaling.
//!
//! The network predicts point maps and pose translations in a scaled space;
//! ground truth is mapped into that space with [`Scaling::forward`] before
//! the loss is formed, and predictions come back out through
//! [`Scaling::inverse`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo3d::{EgoPose, Vec3};
use crate::scene::SceneSample;
use dvgt_tensor::{Scalar, Tape, Tensor, Var};

/// Weight of the pose term against the point-map term.
pub const POSE_WEIGHT: f64 = 5.0;
/// Weight of the `-log Σ` confidence regularizer.
pub const CONFIDENCE_ALPHA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scaling {
    #[serde(rename = "linear1")]
    Linear1,
    #[serde(rename = "linear10")]
    Linear10,
    #[serde(rename = "linear100")]
    Linear100,
    #[serde(rename = "arcsinh")]
    Arcsinh,
}

impl Scaling {
    pub const ALL: [Scaling; 4] = [Scaling::Linear1, Scaling::Linear10, Scaling::Linear100, Scaling::Arcsinh];

    fn divisor(self) -> Option<f64> {
        match self {
            Scaling::Linear1 => Some(1.0),
            Scaling::Linear10 => Some(10.0),
            Scaling::Linear100 => Some(100.0),
            Scaling::Arcsinh => None,
        }
    }

    pub fn forward(self, x: f64) -> f64 {
        match self.divisor() {
            Some(k) => x / k,
            None => x.asinh(),
        }
    }

    pub fn inverse(self, y: f64) -> f64 {
        match self.divisor() {
            Some(k) => y * k,
            None => y.sinh(),
        }
    }

    pub fn forward3(self, p: Vec3) -> Vec3 {
        p.map(|x| self.forward(x))
    }

    pub fn inverse3(self, p: Vec3) -> Vec3 {
        p.map(|y| self.inverse(y))
    }

    pub fn forward_tensor<F: Scalar>(self, t: &Tensor<f64>) -> Tensor<F> {
        t.map(|x| self.forward(x)).cast()
    }

    pub fn inverse_tensor<F: Scalar>(self, t: &Tensor<F>) -> Tensor<f64> {
        t.cast::<f64>().map(|y| self.inverse(y))
    }

    pub fn name(self) -> &'static str {
        match self {
            Scaling::Linear1 => "linear1",
            Scaling::Linear10 => "linear10",
            Scaling::Linear100 => "linear100",
            Scaling::Arcsinh => "arcsinh",
        }
    }
}

impl fmt::Display for Scaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scaling::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scaling {s:?} (linear1, linear10, linear100, arcsinh)")))
    }
}

/// Per-term loss values for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub pose_term: f64,
    pub pmap_error_term: f64,
    pub pmap_grad_term: f64,
    pub pmap_reg_term: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl LossReport {
    pub fn pmap_term(&self) -> f64 {
        self.pmap_error_term + self.pmap_grad_term + self.pmap_reg_term
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numeric struct")
    }
}

/// Network outputs consumed by the loss. `points` is `[T,N,H,W,3]` in scaled
/// space, `sigma` is `[T,N,H,W]`, `pose` is `[T,7]` with scaled translations.
pub struct Prediction<F: Scalar> {
    pub points: Var<F>,
    pub sigma: Var<F>,
    pub pose: Var<F>,
}

/// Ground-truth poses as `[T,7]` rows with scaled translation.
pub fn pose_targets(poses: &[EgoPose], scaling: Scaling) -> Tensor<f64> {
    let mut rows = Vec::with_capacity(poses.len() * 7);
    for p in poses {
        let mut r = p.to_array7();
        for x in &mut r[..3] {
            *x = scaling.forward(*x);
        }
        rows.extend(r);
    }
    Tensor::new(vec![poses.len(), 7], rows).expect("seven values per pose")
}

/// Mean over frames of the L1 distance between 7-vectors.
pub fn pose_loss<F: Scalar>(tape: &mut Tape<F>, pred: &Var<F>, gt: &Tensor<f64>) -> Result<Var<F>> {
    let t = gt.shape().first().copied().unwrap_or(0);
    if t == 0 {
        return Err(Error::Invalid("pose loss over zero frames".into()));
    }
    if pred.shape() != gt.shape() {
        return Err(Error::Invalid(format!("pose prediction {:?} vs target {:?}", pred.shape(), gt.shape())));
    }
    let gt = tape.constant(gt.cast());
    let d = tape.sub(pred, &gt)?;
    let a = tape.abs(&d)?;
    let s = tape.sum_all(&a)?;
    Ok(tape.mul_scalar(&s, F::lit(1.0 / t as f64))?)
}

/// The three point-map terms, each already averaged.
pub struct PointmapTerms<F: Scalar> {
    pub error: Var<F>,
    pub grad: Var<F>,
    pub reg: Var<F>,
}

/// Pixel weights: 1/(valid count) on valid pixels of each image, divided by
/// the number of images that have any valid pixel.
fn pixel_weights(mask: &[bool], images: usize, pixels: usize) -> Result<Vec<f64>> {
    let counts: Vec<usize> = mask.chunks(pixels).map(|c| c.iter().filter(|&&v| v).count()).collect();
    let used = counts.iter().filter(|&&c| c > 0).count();
    if used == 0 {
        return Err(Error::Invalid("no valid pixels in any image".into()));
    }
    let mut w = vec![0.0; images * pixels];
    for (b, &c) in counts.iter().enumerate() {
        for p in 0..pixels {
            if mask[b * pixels + p] {
                w[b * pixels + p] = 1.0 / (c as f64 * used as f64);
            }
        }
    }
    Ok(w)
}

/// Forward differences of `x` (`[B,H,W,3]`) along `axis` (1 = rows, 2 = columns),
/// zero-padded at the far edge.
fn forward_diff<F: Scalar>(tape: &mut Tape<F>, x: &Var<F>, axis: usize) -> Result<Var<F>> {
    let len = x.shape()[axis];
    let mut pad_shape = x.shape().to_vec();
    pad_shape[axis] = 1;
    let pad = tape.constant(Tensor::zeros(&pad_shape));
    if len < 2 {
        return Ok(tape.broadcast_to(&pad, x.shape())?);
    }
    let hi = tape.slice(x, axis, 1, len)?;
    let lo = tape.slice(x, axis, 0, len - 1)?;
    let d = tape.sub(&hi, &lo)?;
    Ok(tape.concat(&[d, pad], axis)?)
}

fn pair_mask<F: Scalar>(mask: &[bool], b: usize, h: usize, w: usize, axis: usize) -> Tensor<F> {
    Tensor::from_fn(&[b, h, w, 1], |k| {
        let (j, i) = (k % w, (k / w) % h);
        let ok = match axis {
            1 => i + 1 < h && mask[k] && mask[k + w],
            _ => j + 1 < w && mask[k] && mask[k + 1],
        };
        if ok {
            F::one()
        } else {
            F::zero()
        }
    })
}

/// Confidence-weighted point-map loss in scaled coordinates.
pub fn pointmap_loss<F: Scalar>(
    tape: &mut Tape<F>,
    pred: &Var<F>,
    sigma: &Var<F>,
    gt_scaled: &Tensor<f64>,
    mask: &[bool],
    alpha: f64,
) -> Result<PointmapTerms<F>> {
    let shape = pred.shape().to_vec();
    if shape.len() != 5 || shape[4] != 3 || gt_scaled.shape() != shape.as_slice() {
        return Err(Error::Invalid(format!("point maps {:?} vs targets {:?}", shape, gt_scaled.shape())));
    }
    if sigma.shape() != &shape[..4] {
        return Err(Error::Invalid(format!("sigma {:?} for point maps {:?}", sigma.shape(), shape)));
    }
    let (b, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    if mask.len() != b * h * w {
        return Err(Error::Invalid(format!("mask has {} entries for {} pixels", mask.len(), b * h * w)));
    }
    if sigma.value().data().iter().any(|&s| !(s > F::zero())) {
        return Err(Error::Invalid("sigma must be positive".into()));
    }
    let weights = tape.constant(Tensor::new(vec![b, h, w], pixel_weights(mask, b, h * w)?)?.cast());

    let p = tape.reshape(pred, &[b, h, w, 3])?;
    let g = tape.constant(gt_scaled.reshaped(&[b, h, w, 3])?.cast());
    let s = tape.reshape(sigma, &[b, h, w])?;

    let diff = tape.sub(&p, &g)?;
    let dist = tape.l2_norm(&diff, 3)?;
    let e = tape.mul(&s, &dist)?;
    let e = tape.mul(&e, &weights)?;
    let error = tape.sum_all(&e)?;

    let mut parts = Vec::with_capacity(2);
    for axis in [2, 1] {
        let dp = forward_diff(tape, &diff, axis)?;
        let m = tape.constant(pair_mask(mask, b, h, w, axis));
        parts.push(tape.mul(&dp, &m)?);
    }
    let stacked = tape.concat(&parts, 3)?;
    let gn = tape.l2_norm(&stacked, 3)?;
    let gn = tape.mul(&gn, &weights)?;
    let grad = tape.sum_all(&gn)?;

    let ls = tape.log(&s)?;
    let ls = tape.mul(&ls, &weights)?;
    let ls = tape.sum_all(&ls)?;
    let reg = tape.mul_scalar(&ls, F::lit(-alpha))?;
    Ok(PointmapTerms { error, grad, reg })
}

/// `λ·pose + (error + grad + reg)` against a clip's ground truth.
pub fn total_loss<F: Scalar>(
    tape: &mut Tape<F>,
    pred: &Prediction<F>,
    target: &SceneSample,
    scaling: Scaling,
    lambda: f64,
    alpha: f64,
) -> Result<(Var<F>, LossReport)> {
    let gt_scaled = target.pointmaps.map(|x| scaling.forward(x));
    let terms = pointmap_loss(tape, &pred.points, &pred.sigma, &gt_scaled, &target.valid_mask, alpha)?;
    let pose = pose_loss(tape, &pred.pose, &pose_targets(&target.poses, scaling))?;
    let weighted = tape.mul_scalar(&pose, F::lit(lambda))?;
    let pm = tape.add(&terms.error, &terms.grad)?;
    let pm = tape.add(&pm, &terms.reg)?;
    let total = tape.add(&weighted, &pm)?;
    let v = |x: &Var<F>| x.value().item().f64();
    let report = LossReport {
        total: v(&total),
        pose_term: v(&pose),
        pmap_error_term: v(&terms.error),
        pmap_grad_term: v(&terms.grad),
        pmap_reg_term: v(&terms.reg),
        lambda,
        alpha,
    };
    Ok((total, report))
}
