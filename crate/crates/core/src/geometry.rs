//! Rigid-body kinematics and pinhole projection.
//!
//! A serial chain is a list of revolute joints. Joint `i` rotates about a
//! fixed axis expressed in the frame of joint `i - 1`, and is followed by a
//! fixed offset transform that places the next frame. Frame origins are the
//! "joint positions" used throughout the crate; the final origin is the
//! end-effector tip.

use std::ops::{Add, Mul, Neg, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Rotation of `angle` radians about the unit vector `axis` (Rodrigues).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Mat3 {
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let Vec3 { x, y, z } = axis;
        Mat3([
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ])
    }

    /// Rotation from an axis-angle vector whose norm is the angle.
    pub fn from_rotation_vector(v: Vec3) -> Mat3 {
        let angle = v.norm();
        if angle == 0.0 {
            Mat3::IDENTITY
        } else {
            Mat3::from_axis_angle(v * (1.0 / angle), angle)
        }
    }

    /// Matrix with the given vectors as columns.
    pub fn from_columns(a: Vec3, b: Vec3, c: Vec3) -> Mat3 {
        Mat3([[a.x, b.x, c.x], [a.y, b.y, c.y], [a.z, b.z, c.z]])
    }

    pub fn column(&self, j: usize) -> Vec3 {
        Vec3::new(self.0[0][j], self.0[1][j], self.0[2][j])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}

/// Proper rigid motion `p -> rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        rotation: Mat3::IDENTITY,
        translation: Vec3::ZERO,
    };

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(Mat3::IDENTITY, t)
    }

    pub fn from_rotation(r: Mat3) -> Self {
        Self::new(r, Vec3::ZERO)
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -rt.mul_vec(self.translation))
    }

    /// Orthonormal columns and determinant +1, both within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose().mul_mat(&self.rotation);
        let ortho = (0..3).all(|i| {
            (0..3).all(|j| {
                let expect = if i == j { 1.0 } else { 0.0 };
                (rtr.0[i][j] - expect).abs() <= tol
            })
        });
        ortho && (self.rotation.determinant() - 1.0).abs() <= tol && self.translation.is_finite()
    }
}

/// `a ∘ b`: applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform::new(
        a.rotation.mul_mat(&b.rotation),
        a.rotation.mul_vec(b.translation) + a.translation,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub axis: Vec3,
    pub offset: RigidTransform,
    /// Capsule radius of the link that ends at this joint's frame, meters.
    pub radius: f64,
    /// Lower and upper angle limits, radians.
    pub limits: [f64; 2],
}

impl JointSpec {
    pub fn new(axis: Vec3, offset: RigidTransform, radius: f64) -> Self {
        Self {
            axis,
            offset,
            radius,
            limits: [-std::f64::consts::PI, std::f64::consts::PI],
        }
    }

    pub fn with_limits(mut self, lo: f64, hi: f64) -> Self {
        self.limits = [lo, hi];
        self
    }

    fn validate(&self, index: usize) -> Result<()> {
        if (self.axis.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidChain(format!("joint {index}: axis is not unit length")));
        }
        if !(self.radius > 0.0) {
            return Err(Error::InvalidChain(format!("joint {index}: radius must be positive")));
        }
        if !self.offset.is_valid(1e-9) {
            return Err(Error::InvalidChain(format!("joint {index}: offset is not a rigid transform")));
        }
        if !(self.limits[0] <= self.limits[1]) {
            return Err(Error::InvalidChain(format!("joint {index}: limits are inverted")));
        }
        Ok(())
    }
}

/// Ordered revolute joints from the base outward.
///
/// The built-in robot families use 6 or 7 joints; shorter chains are
/// accepted so small cases can be checked by hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicChain {
    joints: Vec<JointSpec>,
}

impl KinematicChain {
    pub fn new(joints: Vec<JointSpec>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::InvalidChain("chain has no joints".into()));
        }
        for (i, j) in joints.iter().enumerate() {
            j.validate(i)?;
        }
        Ok(Self { joints })
    }

    pub fn joints(&self) -> &[JointSpec] {
        &self.joints
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    /// Same chain with every offset translation and radius multiplied by `s`.
    /// Link offsets multiplied by `length`, capsule radii by `radius`.
    pub fn scaled(&self, length: f64, radius: f64) -> KinematicChain {
        let joints = self
            .joints
            .iter()
            .map(|j| JointSpec {
                offset: RigidTransform::new(j.offset.rotation, j.offset.translation * length),
                radius: j.radius * radius,
                ..j.clone()
            })
            .collect();
        KinematicChain { joints }
    }

    pub fn mean_radius(&self) -> f64 {
        self.joints.iter().map(|j| j.radius).sum::<f64>() / self.joints.len() as f64
    }

    /// Sum of offset translation lengths; an upper bound on reach.
    pub fn reach(&self) -> f64 {
        self.joints.iter().map(|j| j.offset.translation.norm()).sum()
    }

    /// Loads a chain from a TOML file of `[[joint]]` records.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let file: ChainFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("chain file: {e}")))?;
        let joints = file
            .joint
            .into_iter()
            .map(|r| {
                let offset = RigidTransform::new(
                    Mat3::from_rotation_vector(Vec3::from_array(r.rotation)),
                    Vec3::from_array(r.translation),
                );
                let spec = JointSpec::new(Vec3::from_array(r.axis).normalized(), offset, r.radius);
                match r.limits {
                    Some([lo, hi]) => spec.with_limits(lo, hi),
                    None => spec,
                }
            })
            .collect();
        Self::new(joints)
    }

    pub fn to_toml(&self) -> String {
        let file = ChainFile {
            joint: self
                .joints
                .iter()
                .map(|j| JointRecord {
                    axis: j.axis.to_array(),
                    rotation: rotation_vector(&j.offset.rotation).to_array(),
                    translation: j.offset.translation.to_array(),
                    radius: j.radius,
                    limits: Some(j.limits),
                })
                .collect(),
        };
        toml::to_string(&file).expect("chain records always serialize")
    }
}

#[derive(Serialize, Deserialize)]
struct ChainFile {
    joint: Vec<JointRecord>,
}

#[derive(Serialize, Deserialize)]
struct JointRecord {
    axis: [f64; 3],
    /// Offset rotation as an axis-angle vector, radians.
    #[serde(default)]
    rotation: [f64; 3],
    translation: [f64; 3],
    radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    limits: Option<[f64; 2]>,
}

/// Inverse of [`Mat3::from_rotation_vector`] for angles in [0, π).
fn rotation_vector(r: &Mat3) -> Vec3 {
    let m = &r.0;
    let cos = ((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let angle = cos.acos();
    if angle < 1e-12 {
        return Vec3::ZERO;
    }
    let v = Vec3::new(m[2][1] - m[1][2], m[0][2] - m[2][0], m[1][0] - m[0][1]);
    v * (angle / (2.0 * angle.sin()))
}

/// Frame origins in the base frame: index 0 is the base, index `i` is the
/// origin of joint `i`'s frame, the last entry is the end-effector tip.
pub fn forward_kinematics(chain: &KinematicChain, angles: &[f64]) -> Result<Vec<Vec3>> {
    if angles.len() != chain.n_joints() {
        return Err(Error::AngleCountMismatch {
            expected: chain.n_joints(),
            got: angles.len(),
        });
    }
    if angles.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidChain("non-finite joint angle".into()));
    }
    let mut frame = RigidTransform::IDENTITY;
    let mut positions = Vec::with_capacity(angles.len() + 1);
    positions.push(frame.translation);
    for (joint, &angle) in chain.joints.iter().zip(angles) {
        let rot = RigidTransform::from_rotation(Mat3::from_axis_angle(joint.axis, angle));
        frame = compose(&frame, &compose(&rot, &joint.offset));
        positions.push(frame.translation);
    }
    Ok(positions)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera-from-robot-base transform.
    pub extrinsic: RigidTransform,
}

/// Points closer than this to the image plane are rejected by [`project`].
pub const MIN_DEPTH: f64 = 1e-6;

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic: RigidTransform::IDENTITY,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn with_extrinsic(mut self, extrinsic: RigidTransform) -> Self {
        self.extrinsic = extrinsic;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidScene("camera intrinsics out of range".into()))
        }
    }

    /// Camera-frame point at depth `z` that projects onto `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }

    /// Ray direction through `(u, v)` scaled so that its z component is 1.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

pub fn to_camera_frame(points: &[Vec3], camera: &PinholeCamera) -> Vec<Vec3> {
    points.iter().map(|&p| camera.extrinsic.apply(p)).collect()
}

/// Pixel coordinates of a camera-frame point.
pub fn project(camera: &PinholeCamera, p: Vec3) -> Result<(f64, f64)> {
    if p.z <= MIN_DEPTH {
        return Err(Error::BehindCamera { z: p.z });
    }
    Ok((camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy))
}

/// Camera-from-world transform for a camera at `eye` looking at `target`.
///
/// Camera axes follow the image convention: +z forward, +x right, +y down.
/// `up` is the world direction that should appear upward in the image.
pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> RigidTransform {
    let forward = (target - eye).normalized();
    let right = forward.cross(up).normalized();
    let down = forward.cross(right);
    // Rows of camera-from-world are the camera axes expressed in world.
    let world_from_cam = Mat3::from_columns(right, down, forward);
    let rotation = world_from_cam.transpose();
    RigidTransform::new(rotation, -rotation.mul_vec(eye))
}
