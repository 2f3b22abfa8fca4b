//! Rigid-body poses, unit quaternions and pinhole cameras.
//!
//! Coordinate conventions: ego frame is x forward, y left, z up; camera frame
//! is x right, y down, z along the optical axis. Quaternions are (w, x, y, z)
//! and kept in the canonical hemisphere so that `q` and `-q` never both occur.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = norm(axis);
        let (s, c) = (0.5 * angle).sin_cos();
        let a = scale(axis, s / n);
        Self::new(c, a[0], a[1], a[2]).canonical()
    }

    pub fn yaw(angle: f64) -> Self {
        Self::from_axis_angle([0.0, 0.0, 1.0], angle)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        self.as_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    /// Representative with w > 0, or (w = 0 and first nonzero of x, y, z > 0).
    pub fn canonical(&self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else {
            [self.x, self.y, self.z].into_iter().find(|&v| v != 0.0).is_some_and(|v| v < 0.0)
        };
        if flip {
            Self::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            *self
        }
    }

    pub fn dot(&self, o: &Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn conj(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * o`.
    pub fn mul(&self, o: &Quat) -> Self {
        Self::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        // v' = v + 2w (u × v) + 2 u × (u × v)
        let u = [self.x, self.y, self.z];
        let uv = cross(u, v);
        let uuv = cross(u, uv);
        add(v, add(scale(uv, 2.0 * self.w), scale(uuv, 2.0)))
    }

    pub fn to_matrix(&self) -> Mat3 {
        let Quat { w, x, y, z } = *self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Shepperd's method on the largest diagonal term.
    pub fn from_matrix(m: &Mat3) -> Self {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let q = if tr > m[0][0].max(m[1][1]).max(m[2][2]) {
            let s = 2.0 * (1.0 + tr).sqrt();
            Self::new(0.25 * s, (m[2][1] - m[1][2]) / s, (m[0][2] - m[2][0]) / s, (m[1][0] - m[0][1]) / s)
        } else if m[0][0] >= m[1][1] && m[0][0] >= m[2][2] {
            let s = 2.0 * (1.0 + m[0][0] - m[1][1] - m[2][2]).sqrt();
            Self::new((m[2][1] - m[1][2]) / s, 0.25 * s, (m[0][1] + m[1][0]) / s, (m[0][2] + m[2][0]) / s)
        } else if m[1][1] >= m[2][2] {
            let s = 2.0 * (1.0 + m[1][1] - m[0][0] - m[2][2]).sqrt();
            Self::new((m[0][2] - m[2][0]) / s, (m[0][1] + m[1][0]) / s, 0.25 * s, (m[1][2] + m[2][1]) / s)
        } else {
            let s = 2.0 * (1.0 + m[2][2] - m[0][0] - m[1][1]).sqrt();
            Self::new((m[1][0] - m[0][1]) / s, (m[0][2] + m[2][0]) / s, (m[1][2] + m[2][1]) / s, 0.25 * s)
        };
        q.normalized().canonical()
    }
}

/// Geodesic angle between two rotations in degrees, in [0, 180].
pub fn quat_geodesic_deg(q1: &Quat, q2: &Quat) -> f64 {
    let d = q1.dot(q2).abs().min(1.0);
    (2.0 * d.acos()).to_degrees()
}

/// Element of SE(3): `x' = R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 7]", into = "[f64; 7]")]
pub struct EgoPose {
    pub t: Vec3,
    q: Quat,
}

impl TryFrom<[f64; 7]> for EgoPose {
    type Error = Error;

    fn try_from(v: [f64; 7]) -> Result<Self> {
        EgoPose::from_array7(v)
    }
}

impl From<EgoPose> for [f64; 7] {
    fn from(p: EgoPose) -> Self {
        p.to_array7()
    }
}

const UNIT_TOL: f64 = 1e-9;

impl EgoPose {
    pub const IDENTITY: EgoPose = EgoPose { t: [0.0; 3], q: Quat::IDENTITY };

    /// Builds a pose from a unit quaternion (checked to 1e-9) and translation.
    pub fn new(t: Vec3, q: Quat) -> Result<Self> {
        if (q.norm() - 1.0).abs() > UNIT_TOL || t.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "pose needs a unit quaternion and finite translation, got |q| = {}",
                q.norm()
            )));
        }
        Ok(Self { t, q: q.canonical() })
    }

    /// Like [`EgoPose::new`] but renormalizes the quaternion first.
    pub fn from_parts(t: Vec3, q: Quat) -> Self {
        Self { t, q: q.normalized().canonical() }
    }

    pub fn translation(t: Vec3) -> Self {
        Self { t, q: Quat::IDENTITY }
    }

    pub fn q(&self) -> Quat {
        self.q
    }

    /// (tx, ty, tz, qw, qx, qy, qz)
    pub fn to_array7(&self) -> [f64; 7] {
        [self.t[0], self.t[1], self.t[2], self.q.w, self.q.x, self.q.y, self.q.z]
    }

    pub fn from_array7(v: [f64; 7]) -> Result<Self> {
        Self::new([v[0], v[1], v[2]], Quat::new(v[3], v[4], v[5], v[6]))
    }

    pub fn rotation(&self) -> Mat3 {
        self.q.to_matrix()
    }

    pub fn compose(&self, b: &EgoPose) -> EgoPose {
        let q = self.q.mul(&b.q);
        EgoPose { t: add(self.t, self.q.rotate(b.t)), q: q.normalized().canonical() }
    }

    pub fn inverse(&self) -> EgoPose {
        let qi = self.q.conj();
        EgoPose { t: scale(qi.rotate(self.t), -1.0), q: qi.canonical() }
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        add(self.q.rotate(p), self.t)
    }

    pub fn transform_points(&self, pts: &[Vec3]) -> Vec<Vec3> {
        pts.iter().map(|&p| self.transform_point(p)).collect()
    }
}

/// Pinhole camera with its mounting on the vehicle (camera → ego).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub extrinsic: EgoPose,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, extrinsic: EgoPose) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height, extrinsic };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!("focal lengths must be positive ({}, {})", self.fx, self.fy)));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidCamera(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-frame point to continuous pixel coordinates (u right, v down).
    pub fn project(&self, p: Vec3) -> Result<(f64, f64)> {
        if p[2] <= 0.0 {
            return Err(Error::BehindCamera(p[2]));
        }
        Ok((self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy))
    }

    /// Camera-frame point at optical-axis depth `depth` seen at pixel (u, v).
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vec3> {
        if !(depth > 0.0) {
            return Err(Error::Degenerate(format!("unproject needs positive depth, got {depth}")));
        }
        Ok([(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth])
    }

    /// Unit viewing ray through (u, v) in the camera frame.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        let d = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        scale(d, 1.0 / norm(d))
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}
