//! Pseudo ground truth: align an affine-invariant depth raster to sparse
//! metric range returns, score the alignment and reject unreliable images.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo3d::{CameraModel, EgoPose, Vec3};
use crate::scene::{self, SceneSample, SceneSpec};

/// One projected range return: continuous pixel coordinates and optical-axis depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseDepth {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl SparseDepth {
    fn pixel(&self) -> (usize, usize) {
        (self.v.floor() as usize, self.u.floor() as usize)
    }
}

/// Per-image input: a relative depth raster with the depth model's own
/// validity mask, and the sparse metric depths seen by the same camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentInput {
    pub width: usize,
    pub height: usize,
    pub rel_depth: Vec<f64>,
    pub valid: Vec<bool>,
    pub sparse: Vec<SparseDepth>,
}

impl AlignmentInput {
    pub fn validate(&self) -> Result<()> {
        let n = self.width * self.height;
        if n == 0 || self.rel_depth.len() != n || self.valid.len() != n {
            return Err(Error::Invalid(format!(
                "{}x{} raster with {} depths and {} flags",
                self.width,
                self.height,
                self.rel_depth.len(),
                self.valid.len()
            )));
        }
        if self
            .sparse
            .iter()
            .any(|p| !(p.u >= 0.0 && p.v >= 0.0 && p.u < self.width as f64 && p.v < self.height as f64))
        {
            return Err(Error::Invalid("sparse point outside the raster".into()));
        }
        Ok(())
    }

    fn at(&self, p: &SparseDepth) -> usize {
        let (i, j) = p.pixel();
        i * self.width + j
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Rejection {
    Overlap,
    AbsRel,
    Delta,
    MinPoints,
    SpatialVar,
    ScaleRange,
    ShiftRange,
    Degenerate,
}

impl Rejection {
    pub const ALL: [Rejection; 8] = [
        Rejection::Overlap,
        Rejection::AbsRel,
        Rejection::Delta,
        Rejection::MinPoints,
        Rejection::SpatialVar,
        Rejection::ScaleRange,
        Rejection::ShiftRange,
        Rejection::Degenerate,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Rejection::Overlap => "OVERLAP",
            Rejection::AbsRel => "ABS_REL",
            Rejection::Delta => "DELTA",
            Rejection::MinPoints => "MIN_POINTS",
            Rejection::SpatialVar => "SPATIAL_VAR",
            Rejection::ScaleRange => "SCALE_RANGE",
            Rejection::ShiftRange => "SHIFT_RANGE",
            Rejection::Degenerate => "DEGENERATE",
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterThresholds {
    pub overlap: f64,
    pub abs_rel: f64,
    pub delta: f64,
    pub min_points: usize,
    /// Minimum std of normalized pixel coordinates, per axis.
    pub min_spatial_std: f64,
    pub scale_range: [f64; 2],
    pub max_abs_shift: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            overlap: 0.7,
            abs_rel: 0.20,
            delta: 0.80,
            min_points: 200,
            min_spatial_std: 0.15,
            scale_range: [0.2, 5.0],
            max_abs_shift: 20.0,
        }
    }
}

impl FilterThresholds {
    /// Defaults with the point-count floor lowered for small images.
    pub fn desk() -> Self {
        Self { min_points: 50, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive =
            [self.overlap, self.abs_rel, self.delta, self.min_spatial_std, self.max_abs_shift, self.scale_range[0]];
        if positive.iter().any(|&x| !(x > 0.0)) || self.min_points == 0 {
            return Err(Error::Config(format!("filter thresholds must be positive: {self:?}")));
        }
        if self.overlap > 1.0 || self.delta > 1.0 {
            return Err(Error::Config(format!(
                "overlap {} and delta {} are fractions in (0, 1]",
                self.overlap, self.delta
            )));
        }
        if !(self.scale_range[0] < self.scale_range[1]) {
            return Err(Error::Config(format!("scale range {:?} is not increasing", self.scale_range)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub s: f64,
    pub b: f64,
    pub inlier_count: usize,
    pub residual_abs_rel: f64,
    pub residual_delta_125: f64,
    pub overlap_ratio: f64,
    pub spatial_std_u: f64,
    pub spatial_std_v: f64,
    pub accepted: bool,
    pub rejection_reasons: Vec<Rejection>,
}

/// Range returns in reference coordinates seen by `cam` on a vehicle at
/// `pose`. Points outside the image or behind the camera are dropped; when
/// several land in one pixel the nearest is kept.
pub fn project_sparse(points: &[Vec3], cam: &CameraModel, pose: &EgoPose) -> Vec<SparseDepth> {
    let to_cam = pose.compose(&cam.extrinsic).inverse();
    let mut best: BTreeMap<(usize, usize), SparseDepth> = BTreeMap::new();
    for &p in points {
        let pc = to_cam.transform_point(p);
        let Ok((u, v)) = cam.project(pc) else { continue };
        if !cam.in_image(u, v) {
            continue;
        }
        let hit = SparseDepth { u, v, z: pc[2] };
        best.entry(hit.pixel())
            .and_modify(|e| {
                if hit.z < e.z {
                    *e = hit
                }
            })
            .or_insert(hit);
    }
    best.into_values().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleShift {
    pub s: f64,
    pub b: f64,
    /// Indices of the points used by the final fit.
    pub inliers: Vec<usize>,
}

fn least_squares(d: &[f64], z: &[f64], idx: &[usize]) -> Result<(f64, f64)> {
    if idx.len() < 2 {
        return Err(Error::Degenerate(format!("scale/shift fit needs 2 points, got {}", idx.len())));
    }
    let first = d[idx[0]];
    if idx.iter().all(|&i| d[i] == first) {
        return Err(Error::Degenerate("all relative depths are equal".into()));
    }
    let n = idx.len() as f64;
    let md = idx.iter().map(|&i| d[i]).sum::<f64>() / n;
    let mz = idx.iter().map(|&i| z[i]).sum::<f64>() / n;
    let (mut sdd, mut sdz) = (0.0, 0.0);
    for &i in idx {
        sdd += (d[i] - md) * (d[i] - md);
        sdz += (d[i] - md) * (z[i] - mz);
    }
    if !(sdd > 0.0) {
        return Err(Error::Degenerate("relative depths have no spread".into()));
    }
    let s = sdz / sdd;
    Ok((s, mz - s * md))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub const TRIM_MADS: f64 = 2.5;
pub const MAX_TRIM_ROUNDS: usize = 10;

/// Fits `z ≈ s·d + b`. The robust variant starts from least squares and then
/// repeatedly refits on points whose residual lies within 2.5 MAD of the
/// median residual.
pub fn solve_scale_shift(d: &[f64], z: &[f64], robust: bool) -> Result<ScaleShift> {
    if d.len() != z.len() {
        return Err(Error::Invalid(format!("{} relative depths for {} targets", d.len(), z.len())));
    }
    let all: Vec<usize> = (0..d.len()).collect();
    let (mut s, mut b) = least_squares(d, z, &all)?;
    let mut inliers = all;
    if robust {
        let zscale = 1.0 + z.iter().map(|v| v.abs()).sum::<f64>() / z.len() as f64;
        for _ in 0..MAX_TRIM_ROUNDS {
            let r: Vec<f64> = d.iter().zip(z).map(|(&di, &zi)| s * di + b - zi).collect();
            let med = median(&mut r.clone());
            let mut dev: Vec<f64> = r.iter().map(|x| (x - med).abs()).collect();
            let mad = median(&mut dev);
            let cut = (TRIM_MADS * mad).max(1e-12 * zscale);
            let keep: Vec<usize> = (0..r.len()).filter(|&i| (r[i] - med).abs() <= cut).collect();
            let Ok((s2, b2)) = least_squares(d, z, &keep) else { break };
            let converged = ((s2 - s) / s).abs() < 1e-6;
            (s, b, inliers) = (s2, b2, keep);
            if converged {
                break;
            }
        }
    }
    Ok(ScaleShift { s, b, inliers })
}

fn std_dev(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
}

/// Aligns on the sparse points the depth model marks valid, then applies
/// every quality gate. Rejections are reported, not raised.
pub fn score_and_filter(input: &AlignmentInput, th: &FilterThresholds) -> Result<AlignmentResult> {
    input.validate()?;
    th.validate()?;
    let overlap: Vec<&SparseDepth> = input.sparse.iter().filter(|p| input.valid[input.at(p)]).collect();
    let overlap_ratio = if input.sparse.is_empty() { 0.0 } else { overlap.len() as f64 / input.sparse.len() as f64 };
    let d: Vec<f64> = overlap.iter().map(|p| input.rel_depth[input.at(p)]).collect();
    let z: Vec<f64> = overlap.iter().map(|p| p.z).collect();
    let us: Vec<f64> = overlap.iter().map(|p| p.u / input.width as f64).collect();
    let vs: Vec<f64> = overlap.iter().map(|p| p.v / input.height as f64).collect();
    let (spatial_std_u, spatial_std_v) = (std_dev(&us), std_dev(&vs));

    let mut reasons = Vec::new();
    if overlap_ratio < th.overlap {
        reasons.push(Rejection::Overlap);
    }
    let (s, b, inlier_count, abs_rel, delta) = match solve_scale_shift(&d, &z, true) {
        Ok(fit) => {
            let (mut ar, mut good) = (0.0, 0usize);
            for (&di, &zi) in d.iter().zip(&z) {
                let pred = fit.s * di + fit.b;
                ar += (pred - zi).abs() / zi;
                if pred > 0.0 && (pred / zi).max(zi / pred) < 1.25 {
                    good += 1;
                }
            }
            let n = d.len() as f64;
            (fit.s, fit.b, fit.inliers.len(), ar / n, good as f64 / n)
        }
        Err(Error::Degenerate(_)) => {
            reasons.push(Rejection::Degenerate);
            (0.0, 0.0, 0, 1.0, 0.0)
        }
        Err(e) => return Err(e),
    };
    if !reasons.contains(&Rejection::Degenerate) {
        if abs_rel > th.abs_rel {
            reasons.push(Rejection::AbsRel);
        }
        if delta < th.delta {
            reasons.push(Rejection::Delta);
        }
        if !(s >= th.scale_range[0] && s <= th.scale_range[1]) {
            reasons.push(Rejection::ScaleRange);
        }
        if !(b.abs() <= th.max_abs_shift) {
            reasons.push(Rejection::ShiftRange);
        }
    }
    if overlap.len() < th.min_points {
        reasons.push(Rejection::MinPoints);
    }
    if spatial_std_u < th.min_spatial_std || spatial_std_v < th.min_spatial_std {
        reasons.push(Rejection::SpatialVar);
    }
    reasons.sort();
    Ok(AlignmentResult {
        s,
        b,
        inlier_count,
        residual_abs_rel: abs_rel,
        residual_delta_125: delta,
        overlap_ratio,
        spatial_std_u,
        spatial_std_v,
        accepted: reasons.is_empty(),
        rejection_reasons: reasons,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailurePattern {
    /// A large surface reported as invalid (sky-like) by the depth model.
    A,
    /// Heavy multiplicative per-pixel noise.
    B,
    /// Spurious relief painted onto a planar region.
    C,
    /// Horizontal motion smear of the depth raster.
    D,
    /// Range returns squeezed into one small cluster.
    E,
}

impl FailurePattern {
    pub const ALL: [FailurePattern; 5] =
        [FailurePattern::A, FailurePattern::B, FailurePattern::C, FailurePattern::D, FailurePattern::E];
}

impl FromStr for FailurePattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            "d" => Ok(Self::D),
            "e" => Ok(Self::E),
            _ => Err(Error::Config(format!("unknown failure pattern {s:?} (expected a-e)"))),
        }
    }
}

impl fmt::Display for FailurePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
            Self::E => "e",
        };
        f.write_str(c)
    }
}

/// Deterministically corrupts `input`. `magnitude` in [0, 1] scales the
/// corruption; 0 returns the input unchanged.
pub fn inject_failure(
    input: &AlignmentInput,
    pattern: FailurePattern,
    seed: u64,
    magnitude: f64,
) -> Result<AlignmentInput> {
    input.validate()?;
    if !(0.0..=1.0).contains(&magnitude) {
        return Err(Error::Config(format!("corruption magnitude {magnitude} outside [0, 1]")));
    }
    let mut out = input.clone();
    if magnitude == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa11);
    let (w, h) = (input.width, input.height);
    match pattern {
        FailurePattern::A => {
            // A wide block reaching the bottom edge, where range returns are densest.
            let bw = ((rng.gen_range(0.6..0.9) * magnitude * w as f64).round() as usize).clamp(1, w);
            let top = h - ((rng.gen_range(0.55..0.75) * magnitude * h as f64).round() as usize).clamp(1, h);
            let left = rng.gen_range(0..=w - bw);
            for i in top..h {
                for j in left..left + bw {
                    out.valid[i * w + j] = false;
                }
            }
        }
        FailurePattern::B => {
            let sigma = 0.6 * magnitude;
            for x in out.rel_depth.iter_mut() {
                let g: f64 = rng.sample(StandardNormal);
                *x *= (sigma * g).exp();
            }
        }
        FailurePattern::C => {
            // The lower two thirds are mostly road surface; paint a
            // sinusoidal relief proportional to the local depth onto it.
            let amp = 0.8 * magnitude;
            let (fu, fv) = (rng.gen_range(2.0..4.0), rng.gen_range(2.0..4.0));
            let (pu, pv) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
            let top = h / 3;
            for i in top..h {
                for j in 0..w {
                    let a = (fu * std::f64::consts::TAU * j as f64 / w as f64 + pu).sin();
                    let b = (fv * std::f64::consts::TAU * (i - top) as f64 / (h - top) as f64 + pv).sin();
                    out.rel_depth[i * w + j] *= 1.0 + amp * a * b;
                }
            }
        }
        FailurePattern::D => {
            let len = ((magnitude * w as f64 * rng.gen_range(0.35..0.5)).round() as usize).max(1);
            let jitter = (magnitude * h as f64 * 0.1).round() as usize;
            let far = input
                .rel_depth
                .iter()
                .zip(&input.valid)
                .filter(|(_, &ok)| ok)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let src: Vec<f64> = (0..w * h).map(|k| if input.valid[k] { input.rel_depth[k] } else { far }).collect();
            for i in 0..h {
                let di = if jitter > 0 { rng.gen_range(0..=jitter) } else { 0 };
                let row = (i + di).min(h - 1);
                for j in 0..w {
                    let lo = j.saturating_sub(len / 2);
                    let hi = (j + len - len / 2).min(w);
                    let mean = (lo..hi).map(|c| src[row * w + c]).sum::<f64>() / (hi - lo) as f64;
                    out.rel_depth[i * w + j] = mean;
                }
            }
        }
        FailurePattern::E => {
            if input.sparse.is_empty() {
                return Ok(out);
            }
            let c = input.sparse[rng.gen_range(0..input.sparse.len())];
            let radius = (1.0 - magnitude) * 2.0 + magnitude * rng.gen_range(0.06..0.12);
            out.sparse.retain(|p| ((p.u - c.u) / w as f64).hypot((p.v - c.v) / h as f64) <= radius);
        }
    }
    Ok(out)
}

/// Stand-in for a monocular depth network: the image's true optical-axis
/// depth under a hidden affine map with mild multiplicative noise, valid
/// exactly where the scene has geometry.
pub fn stand_in_input(sample: &SceneSample, t: usize, n: usize, seed: u64, noise: f64) -> Result<AlignmentInput> {
    if t >= sample.frames || n >= sample.views {
        return Err(Error::Invalid(format!("image ({t}, {n}) outside a {}x{} clip", sample.frames, sample.views)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xde97);
    let s = rng.gen_range(0.5..3.0);
    let b = rng.gen_range(-5.0..1.0);
    let depth = sample.camera_depth(t, n);
    let (h, w) = (sample.height, sample.width);
    let valid: Vec<bool> = (0..h * w).map(|k| sample.is_valid(t, n, k / w, k % w)).collect();
    let rel_depth = depth
        .iter()
        .zip(&valid)
        .map(|(&z, &ok)| {
            let g: f64 = rng.sample(StandardNormal);
            if ok {
                (z * (noise * g).exp() - b) / s
            } else {
                0.0
            }
        })
        .collect();
    let sparse = project_sparse(&sample.sparse_points[sample.image_index(t, n)], &sample.rig[n], &sample.poses[t]);
    Ok(AlignmentInput { width: w, height: h, rel_depth, valid, sparse })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub index: usize,
    pub pattern: Option<FailurePattern>,
    pub result: AlignmentResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub items: Vec<CorpusItem>,
    /// Rejection is the positive class.
    pub reject_precision: f64,
    pub reject_recall: f64,
    pub accept_precision: f64,
    pub accept_recall: f64,
}

pub const CORPUS_WIDTH: usize = 64;
pub const CORPUS_HEIGHT: usize = 48;
pub const CORPUS_LIDAR_FRACTION: f64 = 0.08;
pub const CORPUS_NOISE: f64 = 0.02;

/// One clean image of the evaluation corpus: a random street scene seen by
/// the forward camera with a denser range sweep than the default.
pub fn corpus_input(seed: u64) -> Result<AlignmentInput> {
    let mut spec = SceneSpec::random_street(seed, 1, 1, CORPUS_HEIGHT, CORPUS_WIDTH);
    spec.lidar.fraction = CORPUS_LIDAR_FRACTION;
    let sample = scene::synthesize(&spec)?;
    stand_in_input(&sample, 0, 0, seed, CORPUS_NOISE)
}

/// `clean` unmodified images followed by `corrupted` ones cycling through
/// the patterns a..e at full magnitude.
pub fn evaluate_corpus(clean: usize, corrupted: usize, seed: u64, th: &FilterThresholds) -> Result<CorpusReport> {
    let items: Vec<CorpusItem> = (0..clean + corrupted)
        .into_par_iter()
        .map(|k| -> Result<CorpusItem> {
            let item_seed = seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
            let input = corpus_input(item_seed)?;
            let pattern = (k >= clean).then(|| FailurePattern::ALL[(k - clean) % 5]);
            let input = match pattern {
                Some(p) => inject_failure(&input, p, item_seed, 1.0)?,
                None => input,
            };
            Ok(CorpusItem { index: k, pattern, result: score_and_filter(&input, th)? })
        })
        .collect::<Result<_>>()?;
    let count = |f: &dyn Fn(&CorpusItem) -> bool| items.iter().filter(|i| f(i)).count() as f64;
    let tp = count(&|i| i.pattern.is_some() && !i.result.accepted);
    let fp = count(&|i| i.pattern.is_none() && !i.result.accepted);
    let fneg = count(&|i| i.pattern.is_some() && i.result.accepted);
    let tn = count(&|i| i.pattern.is_none() && i.result.accepted);
    let ratio = |a: f64, b: f64| if a + b > 0.0 { a / (a + b) } else { 0.0 };
    Ok(CorpusReport {
        reject_precision: ratio(tp, fp),
        reject_recall: ratio(tp, fneg),
        accept_precision: ratio(tn, fneg),
        accept_recall: ratio(tn, fp),
        items,
    })
}

/// Accept rate and rejection histogram over a batch of results.
pub fn summarize(results: &[AlignmentResult]) -> serde_json::Value {
    let mut hist: BTreeMap<&str, usize> = Rejection::ALL.iter().map(|r| (r.code(), 0)).collect();
    for r in results {
        for reason in &r.rejection_reasons {
            *hist.get_mut(reason.code()).expect("all codes present") += 1;
        }
    }
    let accepted = results.iter().filter(|r| r.accepted).count();
    serde_json::json!({
        "images": results.len(),
        "accepted": accepted,
        "accept_rate": if results.is_empty() { 0.0 } else { accepted as f64 / results.len() as f64 },
        "reasons": hist,
    })
}
