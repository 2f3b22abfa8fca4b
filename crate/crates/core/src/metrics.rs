//! Evaluation metrics: chamfer accuracy/completeness, ray-depth errors and
//! relative-pose AUC.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo3d::{self, quat_geodesic_deg, EgoPose, Vec3};
use crate::scene::SceneSample;
use dvgt_tensor::Tensor;

pub const DEFAULT_CHAMFER_CAP: usize = 20_000;
pub const AUC_MAX_DEG: usize = 30;
/// Relative translations shorter than this have no usable direction.
pub const MIN_TRANSLATION: f64 = 1e-6;

/// Static 3-d tree over a point set, stored implicitly: the median of each
/// range is the split node, its children are the two halves.
pub struct KdTree {
    pts: Vec<Vec3>,
    axes: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut pts = points.to_vec();
        let mut axes = vec![0u8; pts.len()];
        Self::build(&mut pts, &mut axes, 0);
        Self { pts, axes }
    }

    fn build(pts: &mut [Vec3], axes: &mut [u8], depth: usize) {
        if pts.len() <= 1 {
            return;
        }
        let axis = Self::widest_axis(pts).unwrap_or(depth % 3);
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        axes[mid] = axis as u8;
        let (lp, rp) = pts.split_at_mut(mid);
        let (la, ra) = axes.split_at_mut(mid);
        Self::build(lp, la, depth + 1);
        Self::build(&mut rp[1..], &mut ra[1..], depth + 1);
    }

    fn widest_axis(pts: &[Vec3]) -> Option<usize> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in pts {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pts.is_empty()
    }

    /// Squared distance from `q` to the nearest stored point.
    pub fn nearest_sq(&self, q: Vec3) -> f64 {
        let mut best = f64::INFINITY;
        self.search(0, self.pts.len(), q, &mut best);
        best
    }

    fn search(&self, lo: usize, hi: usize, q: Vec3, best: &mut f64) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let p = self.pts[mid];
        let d = geo3d::sub(p, q);
        *best = best.min(geo3d::dot(d, d));
        if hi - lo == 1 {
            return;
        }
        let axis = self.axes[mid] as usize;
        let delta = q[axis] - p[axis];
        let (near, far) = if delta < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(near.0, near.1, q, best);
        if delta * delta < *best {
            self.search(far.0, far.1, q, best);
        }
    }
}

fn mean_nearest(from: &[Vec3], to: &KdTree) -> f64 {
    let d: Vec<f64> = from.par_iter().map(|&p| to.nearest_sq(p).sqrt()).collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// Mean nearest-neighbour distance pred→gt (accuracy) and gt→pred (completeness).
pub fn chamfer(pred: &[Vec3], gt: &[Vec3]) -> Result<(f64, f64)> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Invalid("chamfer distance of an empty point set".into()));
    }
    if pred.iter().chain(gt).any(|p| !p.iter().all(|x| x.is_finite())) {
        return Err(Error::NonFinite("chamfer input".into()));
    }
    let (tp, tg) = (KdTree::new(pred), KdTree::new(gt));
    Ok((mean_nearest(pred, &tg), mean_nearest(gt, &tp)))
}

/// Seeded subsample to at most `cap` points (order preserved).
pub fn subsample(points: &[Vec3], cap: usize, seed: u64) -> Vec<Vec3> {
    if points.len() <= cap {
        return points.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, points.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|k| points[k]).collect()
}

/// Distance of each point of a `[T,N,H,W,3]` map to its frame's ego center.
pub fn ray_depth(pointmap: &Tensor<f64>, centers: &[Vec3]) -> Result<Vec<f64>> {
    let s = pointmap.shape();
    if s.len() != 5 || s[4] != 3 || s[0] != centers.len() {
        return Err(Error::Invalid(format!("point map {s:?} with {} frame centers", centers.len())));
    }
    let per_frame = s[1] * s[2] * s[3];
    Ok(pointmap
        .data()
        .chunks_exact(3)
        .enumerate()
        .map(|(k, p)| geo3d::norm(geo3d::sub([p[0], p[1], p[2]], centers[k / per_frame])))
        .collect())
}

/// Abs Rel and the fraction with `max(p/g, g/p) < 1.25`, over masked entries.
pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::Invalid("depth arrays differ in length".into()));
    }
    let (mut rel, mut hits, mut n) = (0.0, 0usize, 0usize);
    for ((&p, &g), &m) in pred.iter().zip(gt).zip(mask) {
        if !m {
            continue;
        }
        if !(g > 0.0) {
            return Err(Error::Invalid(format!("ground-truth depth {g} on a masked pixel")));
        }
        rel += (p - g).abs() / g;
        if (p / g).max(g / p) < 1.25 {
            hits += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid("depth metrics over an empty mask".into()));
    }
    Ok((rel / n as f64, hits as f64 / n as f64))
}

fn angle_deg(a: Vec3, b: Vec3) -> f64 {
    let c = geo3d::dot(a, b) / (geo3d::norm(a) * geo3d::norm(b));
    c.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Rotation and translation-direction errors (degrees) for every frame pair i < j.
pub fn pair_errors(pred: &[EgoPose], gt: &[EgoPose]) -> Result<Vec<(f64, f64)>> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!("{} predicted poses for {} frames", pred.len(), gt.len())));
    }
    if gt.len() < 2 {
        return Err(Error::Invalid("pose accuracy needs at least two frames".into()));
    }
    let mut out = Vec::with_capacity(gt.len() * (gt.len() - 1) / 2);
    for i in 0..gt.len() {
        for j in i + 1..gt.len() {
            let rp = pred[i].inverse().compose(&pred[j]);
            let rg = gt[i].inverse().compose(&gt[j]);
            let rra = quat_geodesic_deg(&rp.q(), &rg.q());
            let (np, ng) = (geo3d::norm(rp.t), geo3d::norm(rg.t));
            let rta = match (np < MIN_TRANSLATION, ng < MIN_TRANSLATION) {
                (true, true) => 0.0,
                (false, false) => angle_deg(rp.t, rg.t),
                _ => 180.0,
            };
            out.push((rra, rta));
        }
    }
    Ok(out)
}

/// Area under the accuracy curve over thresholds 1°..30°, in percent.
pub fn pose_auc30(pred: &[EgoPose], gt: &[EgoPose]) -> Result<f64> {
    let errs: Vec<f64> = pair_errors(pred, gt)?.into_iter().map(|(r, t)| r.max(t)).collect();
    let mut acc = 0.0;
    for tau in 1..=AUC_MAX_DEG {
        acc += errs.iter().filter(|&&e| e < tau as f64).count() as f64 / errs.len() as f64;
    }
    Ok(100.0 * acc / AUC_MAX_DEG as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy_m: f64,
    pub completeness_m: f64,
    pub abs_rel: f64,
    pub delta_125: f64,
    /// Absent when every clip has a single frame.
    pub auc30: Option<f64>,
    pub pred_points: usize,
    pub gt_points: usize,
    pub depth_pixels: usize,
    pub pose_pairs: usize,
}

/// Predicted geometry for one clip, in metric units.
pub struct MetricPrediction<'a> {
    /// `[T,N,H,W,3]` in the reference ego frame.
    pub pointmaps: &'a Tensor<f64>,
    pub poses: &'a [EgoPose],
}

/// Scores one clip. Chamfer sets are the GT-masked points of both sides,
/// each capped at `cap` by a seeded subsample.
pub fn evaluate(pred: &MetricPrediction<'_>, target: &SceneSample, cap: usize, seed: u64) -> Result<MetricReport> {
    if pred.pointmaps.shape() != target.pointmaps.shape() {
        return Err(Error::Invalid(format!(
            "predicted point map {:?} vs target {:?}",
            pred.pointmaps.shape(),
            target.pointmaps.shape()
        )));
    }
    if pred.poses.len() != target.poses.len() {
        return Err(Error::Invalid("predicted pose count differs from the clip".into()));
    }
    let masked = |t: &Tensor<f64>| -> Vec<Vec3> {
        t.data().chunks_exact(3).zip(&target.valid_mask).filter(|(_, &m)| m).map(|(p, _)| [p[0], p[1], p[2]]).collect()
    };
    let pp = subsample(&masked(pred.pointmaps), cap, seed);
    let gp = subsample(&masked(&target.pointmaps), cap, seed ^ 1);
    let (accuracy_m, completeness_m) = chamfer(&pp, &gp)?;

    let pc: Vec<Vec3> = pred.poses.iter().map(|p| p.t).collect();
    let gc: Vec<Vec3> = target.poses.iter().map(|p| p.t).collect();
    let pd = ray_depth(pred.pointmaps, &pc)?;
    let gd = ray_depth(&target.pointmaps, &gc)?;
    let (abs_rel, delta_125) = depth_metrics(&pd, &gd, &target.valid_mask)?;

    let (auc30, pose_pairs) = if target.frames >= 2 {
        (Some(pose_auc30(pred.poses, &target.poses)?), target.frames * (target.frames - 1) / 2)
    } else {
        (None, 0)
    };
    let report = MetricReport {
        accuracy_m,
        completeness_m,
        abs_rel,
        delta_125,
        auc30,
        pred_points: pp.len(),
        gt_points: gp.len(),
        depth_pixels: target.valid_mask.iter().filter(|&&m| m).count(),
        pose_pairs,
    };
    report.check()?;
    Ok(report)
}

impl MetricReport {
    fn check(&self) -> Result<()> {
        let finite = [self.accuracy_m, self.completeness_m, self.abs_rel, self.delta_125, self.auc30.unwrap_or(0.0)]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite("metric report".into()));
        }
        Ok(())
    }

    /// Count-weighted combination over clips, in input order.
    pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::Invalid("no reports to aggregate".into()));
        }
        let wsum = |f: &dyn Fn(&MetricReport) -> (f64, usize)| -> (f64, usize) {
            let (mut s, mut n) = (0.0, 0);
            for r in reports {
                let (v, c) = f(r);
                s += v * c as f64;
                n += c;
            }
            (if n > 0 { s / n as f64 } else { 0.0 }, n)
        };
        let (accuracy_m, pred_points) = wsum(&|r| (r.accuracy_m, r.pred_points));
        let (completeness_m, gt_points) = wsum(&|r| (r.completeness_m, r.gt_points));
        let (abs_rel, depth_pixels) = wsum(&|r| (r.abs_rel, r.depth_pixels));
        let (delta_125, _) = wsum(&|r| (r.delta_125, r.depth_pixels));
        let (auc, pose_pairs) = wsum(&|r| (r.auc30.unwrap_or(0.0), r.pose_pairs));
        Ok(MetricReport {
            accuracy_m,
            completeness_m,
            abs_rel,
            delta_125,
            auc30: (pose_pairs > 0).then_some(auc),
            pred_points,
            gt_points,
            depth_pixels,
            pose_pairs,
        })
    }

    /// Aligned plain-text table: one header row, one value row.
    pub fn table(&self, label: &str) -> String {
        let auc = self.auc30.map_or("-".to_string(), |a| format!("{a:.1}"));
        format!(
            "{:<16} {:>9} {:>9} {:>8} {:>8} {:>7}\n{:<16} {:>9.3} {:>9.3} {:>8.3} {:>8.3} {:>7}\n",
            "",
            "Acc(m)",
            "Comp(m)",
            "AbsRel",
            "d<1.25",
            "AUC@30",
            label,
            self.accuracy_m,
            self.completeness_m,
            self.abs_rel,
            self.delta_125,
            auc
        )
    }
}
