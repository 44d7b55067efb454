//! Unit dual quaternions for rigid motions, pose sets and pose losses.

mod io;
mod tape;

use std::cell::Cell;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{format_matrix_file, format_pose_file, parse_pose_file};
pub use tape::{
    align_loss, camera_loss, camera_terms, conjugate_rows, dq_mul_rows, grad_cases,
    quat_trans_loss, quat_trans_rows, CameraTerms, QUAT_TRANS_WIDTH,
};

/// Tolerance for the unit and orthogonality constraints.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DqError {
    #[error("real part has norm {0}, expected 1")]
    NonUnitReal(f64),
    #[error("real and dual parts are not orthogonal (dot {0})")]
    NotOrthogonal(f64),
    #[error("raw real part norm {0} is too small to normalize")]
    DegenerateRaw(f64),
    #[error("rotation matrix is not orthonormal with det +1 (error {0})")]
    DegenerateRotation(f64),
    #[error("first pose of a pose set must be the identity")]
    FirstNotIdentity,
    #[error("pose sets differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("pose file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Quaternion `w + xi + yj + zk`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat::new(1.0, 0.0, 0.0, 0.0);
    pub const ZERO: Quat = Quat::new(0.0, 0.0, 0.0, 0.0);

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn pure(v: Vector3<f64>) -> Self {
        Self::new(0.0, v.x, v.y, v.z)
    }

    pub fn vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn conj(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn add(self, o: Quat) -> Quat {
        Quat::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Quat) -> Quat {
        Quat::new(self.w - o.w, self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Quat {
        Quat::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `+1` or `-1` such that `sign * self` has a nonnegative scalar part,
    /// breaking a zero scalar part by the first nonzero component.
    pub fn canonical_sign(self) -> f64 {
        for c in self.to_array() {
            if c > 0.0 {
                return 1.0;
            }
            if c < 0.0 {
                return -1.0;
            }
        }
        1.0
    }

    pub fn to_rotation(self) -> Matrix3<f64> {
        let Quat { w, x, y, z } = self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Rotation matrix to unit quaternion (Shepperd's branch selection).
    pub fn from_rotation(r: &Matrix3<f64>) -> Quat {
        let tr = r.trace();
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            Quat::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.scale(1.0 / q.norm())
    }

    /// Unit quaternion for a rotation of `angle` radians about `axis`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64) -> Quat {
        let a = axis.normalize() * (0.5 * angle).sin();
        Quat::new((0.5 * angle).cos(), a.x, a.y, a.z)
    }
}

/// Rigid motion `q_r + eps q_d` with `|q_r| = 1`, `<q_r, q_d> = 0` and a
/// canonical sign on `q_r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitDualQuat {
    real: Quat,
    dual: Quat,
}

impl UnitDualQuat {
    pub const IDENTITY: UnitDualQuat = UnitDualQuat {
        real: Quat::IDENTITY,
        dual: Quat::ZERO,
    };

    /// Validates the unit constraints and canonicalizes the sign.
    pub fn new(real: Quat, dual: Quat) -> Result<Self, DqError> {
        let n = real.norm();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(DqError::NonUnitReal(n));
        }
        let d = real.dot(dual);
        if d.abs() > UNIT_TOL {
            return Err(DqError::NotOrthogonal(d));
        }
        Ok(Self { real, dual }.canonical())
    }

    /// Projects an arbitrary 8-vector onto the unit dual quaternions.
    ///
    /// The real part is normalized, the dual part loses its component
    /// along the real part, and the sign is canonicalized.
    pub fn from_raw(raw: [f64; 8]) -> Result<Self, DqError> {
        let r = Quat::new(raw[0], raw[1], raw[2], raw[3]);
        let d = Quat::new(raw[4], raw[5], raw[6], raw[7]);
        let n = r.norm();
        if !(n > 1e-8) {
            return Err(DqError::DegenerateRaw(n));
        }
        let real = r.scale(1.0 / n);
        let dual = d.sub(real.scale(d.dot(real)));
        Ok(Self { real, dual }.canonical())
    }

    pub fn from_array(a: [f64; 8]) -> Result<Self, DqError> {
        Self::new(
            Quat::new(a[0], a[1], a[2], a[3]),
            Quat::new(a[4], a[5], a[6], a[7]),
        )
    }

    pub fn to_array(self) -> [f64; 8] {
        let (r, d) = (self.real, self.dual);
        [r.w, r.x, r.y, r.z, d.w, d.x, d.y, d.z]
    }

    pub fn real(self) -> Quat {
        self.real
    }

    pub fn dual(self) -> Quat {
        self.dual
    }

    pub fn from_rotation_translation(rot: Quat, t: Vector3<f64>) -> Self {
        let real = rot.scale(1.0 / rot.norm());
        let dual = Quat::pure(t).mul(real).scale(0.5);
        Self { real, dual }.canonical()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::from_rotation_translation(Quat::IDENTITY, t)
    }

    pub fn canonical(self) -> Self {
        let s = self.real.canonical_sign();
        Self {
            real: self.real.scale(s),
            dual: self.dual.scale(s),
        }
    }

    /// Composition `self * other` (apply `other` first).
    pub fn mul(self, other: Self) -> Self {
        debug_assert!((self.real.norm() - 1.0).abs() < UNIT_TOL);
        debug_assert!((other.real.norm() - 1.0).abs() < UNIT_TOL);
        Self {
            real: self.real.mul(other.real),
            dual: self.real.mul(other.dual).add(self.dual.mul(other.real)),
        }
        .canonical()
    }

    /// Quaternion conjugate of both parts; the inverse rigid motion.
    pub fn conjugate(self) -> Self {
        self.raw_conjugate().canonical()
    }

    fn raw_conjugate(self) -> Self {
        let s = conjugate_signs();
        let q = |p: Quat, o: usize| Quat::new(s[o] * p.w, s[o + 1] * p.x, s[o + 2] * p.y, s[o + 3] * p.z);
        Self {
            real: q(self.real, 0),
            dual: q(self.dual, 4),
        }
    }

    pub fn rotation(self) -> Quat {
        self.real
    }

    pub fn translation(self) -> Vector3<f64> {
        self.dual.mul(self.real.conj()).scale(2.0).vector()
    }

    pub fn to_se3(self) -> PoseSE3 {
        PoseSE3 {
            rotation: self.real.to_rotation(),
            translation: self.translation(),
        }
    }

    pub fn from_se3(pose: &PoseSE3) -> Self {
        Self::from_rotation_translation(Quat::from_rotation(&pose.rotation), pose.translation)
    }

    pub fn transform_point(self, p: Vector3<f64>) -> Vector3<f64> {
        self.to_se3().apply(p)
    }

    /// Largest coefficient difference to `other`.
    pub fn max_diff(self, other: Self) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Default for UnitDualQuat {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Rigid motion `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checks `R^T R = I` and `det R = 1` within [`UNIT_TOL`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, DqError> {
        let orth = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = (rotation.determinant() - 1.0).abs();
        let err = orth.max(det);
        if !(err <= UNIT_TOL) {
            return Err(DqError::DegenerateRotation(err));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn apply(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Rotation angle of `R`, in radians.
    pub fn angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }
}

/// Ordered camera-to-canonical poses whose first entry is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSet {
    poses: Vec<UnitDualQuat>,
}

impl PoseSet {
    pub fn new(poses: Vec<UnitDualQuat>) -> Result<Self, DqError> {
        if poses.first().is_some_and(|p| *p != UnitDualQuat::IDENTITY) {
            return Err(DqError::FirstNotIdentity);
        }
        Ok(Self { poses })
    }

    /// Re-expresses arbitrary poses relative to the first one.
    pub fn canonicalize(poses: &[UnitDualQuat]) -> Self {
        let Some(first) = poses.first() else {
            return Self { poses: Vec::new() };
        };
        let inv = first.conjugate();
        let mut out: Vec<UnitDualQuat> = poses.iter().map(|p| inv.mul(*p)).collect();
        out[0] = UnitDualQuat::IDENTITY;
        Self { poses: out }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn get(&self, i: usize) -> UnitDualQuat {
        self.poses[i]
    }

    pub fn as_slice(&self) -> &[UnitDualQuat] {
        &self.poses
    }

    pub fn iter(&self) -> impl Iterator<Item = &UnitDualQuat> {
        self.poses.iter()
    }

    /// Coefficients of frames `2..T` as a `[T-1, 8]` row-major buffer.
    pub fn tail_coefficients(&self) -> Vec<f64> {
        self.poses.iter().skip(1).flat_map(|p| p.to_array()).collect()
    }

    pub fn centers(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation()).collect()
    }
}

thread_local! {
    static CONJUGATE_FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Mutation hook for the self-test: while set, conjugation on the current
/// thread forgets to negate the dual part's vector.
#[doc(hidden)]
pub fn set_conjugate_fault(on: bool) {
    CONJUGATE_FAULT.with(|f| f.set(on));
}

/// Per-coefficient signs of the dual-quaternion conjugate.
pub(crate) fn conjugate_signs() -> [f64; 8] {
    let dual = if CONJUGATE_FAULT.with(Cell::get) { 1.0 } else { -1.0 };
    [1.0, -1.0, -1.0, -1.0, 1.0, dual, dual, dual]
}

/// `sum_t |I - gt_t pred_t*| + |I - pred_t gt_t*|` over frames `2..T`.
pub fn dq_align_loss(pred: &PoseSet, gt: &PoseSet) -> Result<f64, DqError> {
    if pred.len() != gt.len() {
        return Err(DqError::LengthMismatch(pred.len(), gt.len()));
    }
    let id = UnitDualQuat::IDENTITY.to_array();
    let dist = |a: [f64; 8]| -> f64 {
        a.iter().zip(id).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt()
    };
    let raw_mul = |a: UnitDualQuat, b: UnitDualQuat| -> [f64; 8] {
        let r = a.real.mul(b.real);
        let d = a.real.mul(b.dual).add(a.dual.mul(b.real));
        [r.w, r.x, r.y, r.z, d.w, d.x, d.y, d.z]
    };
    Ok(pred
        .iter()
        .zip(gt.iter())
        .skip(1)
        .map(|(p, g)| dist(raw_mul(*g, p.raw_conjugate())) + dist(raw_mul(*p, g.raw_conjugate())))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn raw_with_orthogonal_parts_keeps_dual() {
        let p = UnitDualQuat::from_raw([2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 6.0]).unwrap();
        assert_eq!(p.to_array(), [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 6.0]);
    }

    #[test]
    fn half_turn_about_z_is_canonical() {
        let r = Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);
        let p = UnitDualQuat::from_se3(&PoseSE3::new(r, Vector3::zeros()).unwrap());
        for (a, b) in p.real().to_array().iter().zip([0.0, 0.0, 0.0, 1.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn pure_translations_add() {
        let t = UnitDualQuat::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let tt = t.mul(t);
        assert_abs_diff_eq!(tt.translation(), Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
        assert_eq!(tt.real(), Quat::IDENTITY);
    }

    #[test]
    fn identity_conjugate_is_identity() {
        assert_eq!(UnitDualQuat::IDENTITY.conjugate(), UnitDualQuat::IDENTITY);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(matches!(UnitDualQuat::from_raw([0.0; 8]), Err(DqError::DegenerateRaw(_))));
        let shear = Matrix3::new(1.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(PoseSE3::new(shear, Vector3::zeros()).is_err());
        let bad = UnitDualQuat::from_translation(Vector3::x());
        assert!(matches!(PoseSet::new(vec![bad]), Err(DqError::FirstNotIdentity)));
    }

    #[test]
    fn align_loss_rejects_length_mismatch() {
        let a = PoseSet::new(vec![UnitDualQuat::IDENTITY; 2]).unwrap();
        let b = PoseSet::new(vec![UnitDualQuat::IDENTITY; 3]).unwrap();
        assert!(dq_align_loss(&a, &b).is_err());
    }
}
