//! Synthetic driving clips with exact ground truth.
//!
//! A scene is a ground plane, axis-aligned boxes (static or moving at
//! constant velocity) and an optional far wall. Every pixel is ray cast in
//! closed form; hits within `extent` meters are valid and their 3D points
//! are stored in the ego frame of the first frame.

mod dataset;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo3d::{self, CameraModel, EgoPose, Quat, Vec3};
use dvgt_tensor::Tensor;

pub use dataset::{
    read_dataset, read_manifest, read_scene, write_dataset, DatasetManifest, SceneEntry, FORMAT_VERSION,
};

/// Frames are spaced at 2 Hz.
pub const DEFAULT_FRAME_INTERVAL: f64 = 0.5;
pub const DEFAULT_EXTENT: f64 = 100.0;
pub const CAMERA_HEIGHT: f64 = 1.5;
const SKY: [f32; 3] = [0.55, 0.7, 0.95];
const AMBIENT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Stationary,
    Straight {
        speed: f64,
    },
    /// Constant speed and yaw rate (rad/s), turning left for positive rates.
    Arc {
        speed: f64,
        yaw_rate: f64,
    },
    /// Smooth lateral shift of `offset` meters completed after `duration` seconds.
    LaneChange {
        speed: f64,
        offset: f64,
        duration: f64,
    },
}

impl Trajectory {
    /// Ego pose at time `tau` seconds, expressed in the ego frame at time 0.
    pub fn pose_at(&self, tau: f64) -> EgoPose {
        match *self {
            Trajectory::Stationary => EgoPose::IDENTITY,
            Trajectory::Straight { speed } => EgoPose::translation([speed * tau, 0.0, 0.0]),
            Trajectory::Arc { speed, yaw_rate } => {
                if yaw_rate.abs() < 1e-12 {
                    return EgoPose::translation([speed * tau, 0.0, 0.0]);
                }
                let psi = yaw_rate * tau;
                let r = speed / yaw_rate;
                EgoPose::from_parts([r * psi.sin(), r * (1.0 - psi.cos()), 0.0], Quat::yaw(psi))
            }
            Trajectory::LaneChange { speed, offset, duration } => {
                let s = (tau / duration).clamp(0.0, 1.0);
                let smooth = s * s * (3.0 - 2.0 * s);
                let dsmooth = if tau < duration { 6.0 * s * (1.0 - s) / duration } else { 0.0 };
                let heading = (offset * dsmooth).atan2(speed);
                EgoPose::from_parts([speed * tau, offset * smooth, 0.0], Quat::yaw(heading))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub min: Vec3,
    pub max: Vec3,
    #[serde(default)]
    pub velocity: Vec3,
    pub albedo: [f64; 3],
}

impl SceneBox {
    pub fn bounds_at(&self, tau: f64) -> (Vec3, Vec3) {
        let d = geo3d::scale(self.velocity, tau);
        (geo3d::add(self.min, d), geo3d::add(self.max, d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    #[serde(default = "yes")]
    pub ground: bool,
    #[serde(default)]
    pub boxes: Vec<SceneBox>,
    /// Vertical plane `x = far_wall` (reference-frame coordinates) facing the ego.
    #[serde(default)]
    pub far_wall: Option<f64>,
}

fn yes() -> bool {
    true
}

/// Normalized image window `[u0, u1) × [v0, v1)` in `[0, 1]` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub u0: f64,
    pub u1: f64,
    pub v0: f64,
    pub v1: f64,
}

impl Window {
    pub fn contains(&self, un: f64, vn: f64) -> bool {
        un >= self.u0 && un < self.u1 && vn >= self.v0 && vn < self.v1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidarSpec {
    /// Fraction of valid pixels returned as range points.
    pub fraction: f64,
    /// Restrict returns to this window (ill-conditioned alignment).
    #[serde(default)]
    pub concentrate: Option<Window>,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self { fraction: 0.01, concentrate: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub frames: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// Empty means the default ring rig for `views` cameras.
    #[serde(default)]
    pub rig: Vec<CameraModel>,
    pub trajectory: Trajectory,
    pub geometry: Geometry,
    #[serde(default = "default_extent")]
    pub extent: f64,
    #[serde(default = "default_interval")]
    pub frame_interval: f64,
    #[serde(default)]
    pub lidar: LidarSpec,
    /// Upper bound on frames × views × height × width.
    #[serde(default = "default_budget")]
    pub max_pixels: usize,
}

fn default_extent() -> f64 {
    DEFAULT_EXTENT
}

fn default_interval() -> f64 {
    DEFAULT_FRAME_INTERVAL
}

fn default_budget() -> usize {
    1 << 24
}

/// Cameras evenly spaced in yaw around the vehicle, level, 1.5 m high,
/// 90° horizontal field of view.
pub fn default_rig(views: usize, height: usize, width: usize) -> Vec<CameraModel> {
    // camera axes expressed in the ego frame: x_cam → -y, y_cam → -z, z_cam → +x
    let base = Quat::from_matrix(&[[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]);
    let f = width as f64 / 2.0;
    (0..views)
        .map(|n| {
            let yaw = std::f64::consts::TAU * n as f64 / views as f64;
            let mount = Quat::yaw(yaw);
            let offset = mount.rotate([1.0, 0.0, 0.0]);
            let extrinsic = EgoPose::from_parts([offset[0], offset[1], CAMERA_HEIGHT], mount.mul(&base));
            CameraModel { fx: f, fy: f, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height, extrinsic }
        })
        .collect()
}

impl SceneSpec {
    /// Flat ground only, level cameras, no motion.
    pub fn ground_only(seed: u64, frames: usize, views: usize, height: usize, width: usize) -> Self {
        Self {
            seed,
            frames,
            views,
            height,
            width,
            rig: Vec::new(),
            trajectory: Trajectory::Stationary,
            geometry: Geometry { ground: true, boxes: Vec::new(), far_wall: None },
            extent: DEFAULT_EXTENT,
            frame_interval: DEFAULT_FRAME_INTERVAL,
            lidar: LidarSpec::default(),
            max_pixels: default_budget(),
        }
    }

    /// A street scene drawn from `seed`: buildings on both sides, a few
    /// vehicles in the neighbouring lanes (some moving) and an ego path.
    pub fn random_street(seed: u64, frames: usize, views: usize, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_57ee7);
        let speed = rng.gen_range(4.0..10.0);
        let trajectory = match rng.gen_range(0..3) {
            0 => Trajectory::Straight { speed },
            1 => Trajectory::Arc { speed, yaw_rate: rng.gen_range(-0.05..0.05) },
            _ => Trajectory::LaneChange { speed, offset: rng.gen_range(-2.5..2.5), duration: rng.gen_range(1.5..3.0) },
        };
        let mut boxes = Vec::new();
        for side in [-1.0, 1.0] {
            let mut x = rng.gen_range(-45.0..-30.0);
            while x < 85.0 {
                let len = rng.gen_range(8.0..20.0);
                let near = rng.gen_range(9.0..14.0);
                let depth = rng.gen_range(6.0..12.0);
                let h = rng.gen_range(4.0..16.0);
                let (y0, y1) = if side > 0.0 { (near, near + depth) } else { (-near - depth, -near) };
                boxes.push(SceneBox {
                    min: [x, y0, 0.0],
                    max: [x + len, y1, h],
                    velocity: [0.0; 3],
                    albedo: [rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.9), rng.gen_range(0.3..0.9)],
                });
                x += len + rng.gen_range(2.0..8.0);
            }
        }
        for _ in 0..rng.gen_range(2..5) {
            let lane = if rng.gen_bool(0.5) { 4.5 } else { -4.5 };
            let x = rng.gen_range(-25.0..50.0);
            let moving = rng.gen_bool(0.5);
            boxes.push(SceneBox {
                min: [x, lane - 0.9, 0.0],
                max: [x + 4.5, lane + 0.9, 1.6],
                velocity: if moving { [rng.gen_range(-8.0..12.0), 0.0, 0.0] } else { [0.0; 3] },
                albedo: [rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0)],
            });
        }
        Self {
            trajectory,
            geometry: Geometry { ground: true, boxes, far_wall: Some(rng.gen_range(70.0..95.0)) },
            ..Self::ground_only(seed, frames, views, height, width)
        }
    }

    pub fn resolved_rig(&self) -> Vec<CameraModel> {
        if self.rig.is_empty() {
            default_rig(self.views, self.height, self.width)
        } else {
            self.rig.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.views == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("frames, views, height and width must be positive".into()));
        }
        let pixels = self.frames * self.views * self.height * self.width;
        if pixels > self.max_pixels {
            return Err(Error::Config(format!("{pixels} pixels exceeds the budget of {}", self.max_pixels)));
        }
        if !(self.extent > 0.0 && self.frame_interval > 0.0) {
            return Err(Error::Config("extent and frame interval must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lidar.fraction) {
            return Err(Error::Config("lidar fraction must lie in [0, 1]".into()));
        }
        let rig = self.resolved_rig();
        if rig.len() != self.views {
            return Err(Error::Config(format!("rig has {} cameras for {} views", rig.len(), self.views)));
        }
        for cam in &rig {
            cam.validate()?;
            if cam.width != self.width || cam.height != self.height {
                return Err(Error::InvalidCamera("camera size differs from the image size".into()));
            }
        }
        Ok(())
    }
}

/// One clip: T frames × N views with exact geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub frames: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// `[T, N, H, W, 3]`, values in [0, 1].
    pub images: Tensor<f32>,
    /// `[T, N, H, W, 3]` meters, ego frame of frame 0; zeros where invalid.
    pub pointmaps: Tensor<f64>,
    /// `T·N·H·W` flags in row-major order.
    pub valid_mask: Vec<bool>,
    /// Frame-0-to-frame-t ego motion; `poses[0]` is the identity.
    pub poses: Vec<EgoPose>,
    pub rig: Vec<CameraModel>,
    /// Range returns per image (index `t·N + n`), reference-frame coordinates.
    pub sparse_points: Vec<Vec<Vec3>>,
}

impl SceneSample {
    pub fn image_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image_index(&self, t: usize, n: usize) -> usize {
        t * self.views + n
    }

    pub fn pixel_index(&self, t: usize, n: usize, i: usize, j: usize) -> usize {
        (self.image_index(t, n) * self.height + i) * self.width + j
    }

    pub fn point(&self, t: usize, n: usize, i: usize, j: usize) -> Vec3 {
        let p = 3 * self.pixel_index(t, n, i, j);
        let d = self.pointmaps.data();
        [d[p], d[p + 1], d[p + 2]]
    }

    pub fn is_valid(&self, t: usize, n: usize, i: usize, j: usize) -> bool {
        self.valid_mask[self.pixel_index(t, n, i, j)]
    }

    /// Camera-to-reference pose of view `n` at frame `t`.
    pub fn camera_pose(&self, t: usize, n: usize) -> EgoPose {
        self.poses[t].compose(&self.rig[n].extrinsic)
    }

    /// Optical-axis depth map of one image (0 where invalid).
    pub fn camera_depth(&self, t: usize, n: usize) -> Vec<f64> {
        let to_cam = self.camera_pose(t, n).inverse();
        let mut out = vec![0.0; self.image_pixels()];
        for i in 0..self.height {
            for j in 0..self.width {
                if self.is_valid(t, n, i, j) {
                    out[i * self.width + j] = to_cam.transform_point(self.point(t, n, i, j))[2];
                }
            }
        }
        out
    }

    /// Sub-clip with frames `start..start+len` and the chosen views, with all
    /// geometry re-expressed in the ego frame of its first frame.
    pub fn window(&self, start: usize, len: usize, views: &[usize]) -> Result<SceneSample> {
        if len == 0 || start + len > self.frames || views.is_empty() || views.iter().any(|&v| v >= self.views) {
            return Err(Error::Config(format!(
                "window {start}+{len} over views {views:?} outside a {}x{} clip",
                self.frames, self.views
            )));
        }
        let rebase = self.poses[start].inverse();
        let (h, w) = (self.height, self.width);
        let hw = h * w;
        let mut images = Vec::with_capacity(len * views.len() * hw * 3);
        let mut points = Vec::with_capacity(len * views.len() * hw * 3);
        let mut mask = Vec::with_capacity(len * views.len() * hw);
        let mut sparse = Vec::new();
        for t in start..start + len {
            for &n in views {
                let img = self.image_index(t, n);
                images.extend_from_slice(&self.images.data()[img * hw * 3..(img + 1) * hw * 3]);
                for px in 0..hw {
                    let valid = self.valid_mask[img * hw + px];
                    mask.push(valid);
                    let p = if valid {
                        let d = &self.pointmaps.data()[(img * hw + px) * 3..];
                        rebase.transform_point([d[0], d[1], d[2]])
                    } else {
                        [0.0; 3]
                    };
                    points.extend(p);
                }
                sparse.push(rebase.transform_points(&self.sparse_points[img]));
            }
        }
        let shape = [len, views.len(), h, w, 3];
        Ok(SceneSample {
            frames: len,
            views: views.len(),
            height: h,
            width: w,
            images: Tensor::new(shape.to_vec(), images)?,
            pointmaps: Tensor::new(shape.to_vec(), points)?,
            valid_mask: mask,
            poses: (start..start + len).map(|t| rebase.compose(&self.poses[t])).collect(),
            rig: views.iter().map(|&n| self.rig[n].clone()).collect(),
            sparse_points: sparse,
        })
    }
}

/// Surface hit along a ray.
#[derive(Debug, Clone, Copy)]
pub struct Hit {
    pub distance: f64,
    pub normal: Vec3,
    pub albedo: [f64; 3],
}

/// Ray/plane `z = 0` intersection distance for a unit direction.
pub fn intersect_ground(origin: Vec3, dir: Vec3) -> Option<f64> {
    (dir[2] < 0.0 && origin[2] > 0.0).then(|| -origin[2] / dir[2])
}

/// Slab-method ray/box intersection: entry distance and face normal.
pub fn intersect_box(origin: Vec3, dir: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, Vec3)> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut normal = [0.0; 3];
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let (t0, t1) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
        let (enter, exit, sign) = if t0 < t1 { (t0, t1, -1.0) } else { (t1, t0, 1.0) };
        if enter > t_near {
            t_near = enter;
            normal = [0.0; 3];
            normal[a] = sign;
        }
        t_far = t_far.min(exit);
    }
    (t_near <= t_far && t_near > 0.0).then_some((t_near, normal))
}

fn cast(geometry: &Geometry, tau: f64, origin: Vec3, dir: Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |distance: f64, normal: Vec3, albedo: [f64; 3]| {
        if best.is_none_or(|b| distance < b.distance) {
            best = Some(Hit { distance, normal, albedo });
        }
    };
    if geometry.ground {
        if let Some(d) = intersect_ground(origin, dir) {
            consider(d, [0.0, 0.0, 1.0], [0.45, 0.45, 0.42]);
        }
    }
    for b in &geometry.boxes {
        let (lo, hi) = b.bounds_at(tau);
        if let Some((d, n)) = intersect_box(origin, dir, lo, hi) {
            consider(d, n, b.albedo);
        }
    }
    if let Some(wall) = geometry.far_wall {
        if dir[0] > 0.0 && origin[0] < wall {
            consider((wall - origin[0]) / dir[0], [-1.0, 0.0, 0.0], [0.6, 0.55, 0.5]);
        }
    }
    best
}

fn shade(hit: &Hit) -> [f32; 3] {
    let l = [0.4, 0.3, 0.85];
    let l = geo3d::scale(l, 1.0 / geo3d::norm(l));
    let lambert = AMBIENT + (1.0 - AMBIENT) * geo3d::dot(hit.normal, l).max(0.0);
    [(hit.albedo[0] * lambert) as f32, (hit.albedo[1] * lambert) as f32, (hit.albedo[2] * lambert) as f32]
}

/// Renders a clip. Deterministic in `spec` (including its seed).
pub fn synthesize(spec: &SceneSpec) -> Result<SceneSample> {
    spec.validate()?;
    let rig = spec.resolved_rig();
    let (t_n, v_n, h, w) = (spec.frames, spec.views, spec.height, spec.width);
    let poses: Vec<EgoPose> = (0..t_n).map(|t| spec.trajectory.pose_at(t as f64 * spec.frame_interval)).collect();
    let total = t_n * v_n * h * w;
    let mut images = Vec::with_capacity(total * 3);
    let mut points = Vec::with_capacity(total * 3);
    let mut mask = Vec::with_capacity(total);
    for (t, pose) in poses.iter().enumerate() {
        let tau = t as f64 * spec.frame_interval;
        for cam in &rig {
            let cam_pose = pose.compose(&cam.extrinsic);
            let origin = cam_pose.t;
            for i in 0..h {
                for j in 0..w {
                    let ray = cam.ray(j as f64 + 0.5, i as f64 + 0.5);
                    let dir = cam_pose.q().rotate(ray);
                    match cast(&spec.geometry, tau, origin, dir) {
                        Some(hit) if hit.distance <= spec.extent => {
                            images.extend(shade(&hit));
                            points.extend(geo3d::add(origin, geo3d::scale(dir, hit.distance)));
                            mask.push(true);
                        }
                        _ => {
                            let fade = (i as f32 / h as f32) * 0.15;
                            images.extend(SKY.map(|c| c - fade));
                            points.extend([0.0; 3]);
                            mask.push(false);
                        }
                    }
                }
            }
        }
    }
    let shape = vec![t_n, v_n, h, w, 3];
    let mut sample = SceneSample {
        frames: t_n,
        views: v_n,
        height: h,
        width: w,
        images: Tensor::new(shape.clone(), images)?,
        pointmaps: Tensor::new(shape, points)?,
        valid_mask: mask,
        poses,
        rig,
        sparse_points: Vec::new(),
    };
    sample.sparse_points = emulate_lidar(&sample, &spec.lidar, spec.seed);
    Ok(sample)
}

/// Uniform subsample of valid pixels per image, optionally confined to a window.
pub fn emulate_lidar(sample: &SceneSample, lidar: &LidarSpec, seed: u64) -> Vec<Vec<Vec3>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11da_4);
    let (h, w) = (sample.height, sample.width);
    let mut out = Vec::with_capacity(sample.frames * sample.views);
    for t in 0..sample.frames {
        for n in 0..sample.views {
            let candidates: Vec<(usize, usize)> = (0..h)
                .flat_map(|i| (0..w).map(move |j| (i, j)))
                .filter(|&(i, j)| sample.is_valid(t, n, i, j))
                .filter(|&(i, j)| {
                    lidar
                        .concentrate
                        .is_none_or(|win| win.contains((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64))
                })
                .collect();
            let valid_count = (0..h * w).filter(|&p| sample.is_valid(t, n, p / w, p % w)).count();
            let want = ((lidar.fraction * valid_count as f64).round() as usize).min(candidates.len());
            let mut picks = index::sample(&mut rng, candidates.len(), want).into_vec();
            picks.sort_unstable();
            out.push(picks.into_iter().map(|k| sample.point(t, n, candidates[k].0, candidates[k].1)).collect());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_only_horizon() {
        let s = synthesize(&SceneSpec::ground_only(0, 1, 1, 32, 48)).unwrap();
        assert!((0..48).all(|j| s.is_valid(0, 0, 31, j)));
        assert!((0..48).all(|j| !s.is_valid(0, 0, 0, j)));
        // rows at or above the principal row never reach the ground
        assert!((0..16).all(|i| (0..48).all(|j| !s.is_valid(0, 0, i, j))));
    }

    #[test]
    fn stationary_poses_are_identity() {
        let s = synthesize(&SceneSpec::ground_only(1, 4, 2, 8, 12)).unwrap();
        assert!(s.poses.iter().all(|p| *p == EgoPose::IDENTITY));
    }

    #[test]
    fn straight_motion_at_two_hertz() {
        let spec =
            SceneSpec { trajectory: Trajectory::Straight { speed: 10.0 }, ..SceneSpec::ground_only(2, 5, 1, 8, 12) };
        let s = synthesize(&spec).unwrap();
        for (t, p) in s.poses.iter().enumerate() {
            assert!((geo3d::norm(p.t) - 5.0 * t as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_rig_and_budget_rejected() {
        let mut spec = SceneSpec::ground_only(0, 1, 1, 8, 8);
        spec.rig = default_rig(1, 8, 8);
        spec.rig[0].fx = 0.0;
        assert!(synthesize(&spec).is_err());
        let mut spec = SceneSpec::ground_only(0, 2, 2, 8, 8);
        spec.max_pixels = 100;
        assert!(matches!(synthesize(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn box_intersection_closed_form() {
        let (d, n) = intersect_box([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [5.0, -1.0, 0.0], [6.0, 1.0, 2.0]).unwrap();
        assert_eq!(d, 5.0);
        assert_eq!(n, [-1.0, 0.0, 0.0]);
        assert!(intersect_box([0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [5.0, -1.0, 0.0], [6.0, 1.0, 2.0]).is_none());
    }
}
