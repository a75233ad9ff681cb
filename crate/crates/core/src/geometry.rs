//! Rigid-body algebra, pinhole projection and trajectory alignment.
//!
//! Poses are stored as rotation matrices plus translations. Lie-algebra
//! coordinates follow the `(ω, v)` ordering: the first three components are
//! the axis-angle rotation vector, the last three the translational part.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

const SMALL_ANGLE: f64 = 1e-4;

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix after checking orthonormality and orientation.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m * m.transpose() - Matrix3::identity()).amax();
        let det = m.determinant();
        if !(ortho < 1e-9 && (det - 1.0).abs() < 1e-9) {
            return Err(Error::Validation(format!(
                "not a rotation matrix (orthogonality error {ortho:.3e}, det {det})"
            )));
        }
        Ok(Rotation(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rotation(*q.to_rotation_matrix().matrix())
    }

    /// Hamilton quaternion with non-negative scalar part.
    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(self.0);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn exp(omega: &Vector3<f64>) -> Self {
        so3_exp(omega)
    }

    pub fn log(&self) -> Vector3<f64> {
        so3_log(self)
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

/// Rigid transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3 {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for Se3 {
    fn default() -> Self {
        Se3::identity()
    }
}

impl Se3 {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Se3 {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Se3::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Se3::new(Rotation::identity(), t)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3::new(
            self.rotation * other.rotation,
            self.rotation.matrix() * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Se3 {
        let rt = self.rotation.transpose();
        Se3::new(rt, -(rt.matrix() * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p + self.translation
    }

    /// Camera center of a world-to-camera pose.
    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.matrix().transpose() * self.translation)
    }

    pub fn exp(xi: &Vector6<f64>) -> Se3 {
        se3_exp(xi)
    }

    pub fn log(&self) -> Vector6<f64> {
        se3_log(self)
    }
}

impl Mul for Se3 {
    type Output = Se3;
    fn mul(self, rhs: Se3) -> Se3 {
        self.compose(&rhs)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Validation(format!(
                "intrinsics need positive focal lengths (fx={fx}, fy={fy})"
            )));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }

    /// `K⁻¹·(p, 1)`.
    pub fn ray(&self, p: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }

    /// Applies a uniform pixel scaling `s` (image resize).
    pub fn scaled(&self, s: f64) -> Intrinsics {
        Intrinsics {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: self.cx * s,
            cy: self.cy * s,
        }
    }
}

pub fn project(k: &Intrinsics, x: &Vector3<f64>) -> Result<Vector2<f64>> {
    if !(x.z > 0.0) {
        return Err(Error::BehindCamera(x.z));
    }
    Ok(Vector2::new(
        k.fx * x.x / x.z + k.cx,
        k.fy * x.y / x.z + k.cy,
    ))
}

pub fn unproject(k: &Intrinsics, p: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    Ok(k.ray(p) * depth)
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`] applied to the skew part of `m`: `(m32, m13, m21)`.
pub(crate) fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

pub fn so3_exp(omega: &Vector3<f64>) -> Rotation {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + w * a + w * w * b)
}

/// Rotation vector with `‖ω‖ ≤ π`. At exactly π the axis is chosen so its
/// first nonzero component is positive.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let skew = vee(&(m - m.transpose()));
    let sin_theta = 0.5 * skew.norm();
    let cos_theta = (0.5 * (m.trace() - 1.0)).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < SMALL_ANGLE {
        // θ/(2 sin θ) ≈ 1/2 + θ²/12
        return skew * (0.5 + theta * theta / 12.0);
    }
    if theta < PI - 1e-3 {
        return skew * (theta / (2.0 * sin_theta));
    }

    // Near π: (R + Rᵀ)/2 − cos θ·I = (1 − cos θ)·a·aᵀ.
    let sym = (m + m.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
    let col = (0..3)
        .max_by(|&a, &b| sym[(a, a)].total_cmp(&sym[(b, b)]))
        .unwrap_or(0);
    let mut axis = sym.column(col).into_owned();
    axis /= axis.norm();
    // The skew part only fixes the sign while it is above rounding noise.
    let flip = if sin_theta > 1e-10 {
        axis.dot(&skew) < 0.0
    } else {
        first_nonzero_negative(&axis)
    };
    if flip {
        axis = -axis;
    }
    axis * theta
}

fn first_nonzero_negative(v: &Vector3<f64>) -> bool {
    v.iter().find(|c| c.abs() > 1e-12).is_some_and(|c| *c < 0.0)
}

/// Left Jacobian `V(ω)` relating `t = V·v`.
fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + w * b + w * w * c
}

fn left_jacobian_inverse(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = hat(omega);
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - w * 0.5 + w * w * d
}

pub fn se3_exp(xi: &Vector6<f64>) -> Se3 {
    let omega = xi.fixed_rows::<3>(0).into_owned();
    let v = xi.fixed_rows::<3>(3).into_owned();
    Se3::new(so3_exp(&omega), left_jacobian(&omega) * v)
}

pub fn se3_log(x: &Se3) -> Vector6<f64> {
    let omega = so3_log(&x.rotation);
    let v = left_jacobian_inverse(&omega) * x.translation;
    Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    Se3,
    Sim3,
}

/// Similarity mapping estimated camera centers onto reference centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Alignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * p * self.scale + self.translation
    }
}

/// Umeyama alignment of camera centers of two world-to-camera trajectories.
/// Returns the alignment and the RMSE of the aligned center residuals.
pub fn align_trajectories(
    est: &[Se3],
    reference: &[Se3],
    mode: AlignMode,
) -> Result<(Alignment, f64)> {
    if est.len() != reference.len() {
        return Err(Error::Validation(format!(
            "trajectory lengths differ ({} vs {})",
            est.len(),
            reference.len()
        )));
    }
    let n = est.len();
    if n < 3 {
        return Err(Error::UnderdeterminedAlignment(n));
    }
    let src: Vec<Vector3<f64>> = est.iter().map(Se3::camera_center).collect();
    let dst: Vec<Vector3<f64>> = reference.iter().map(Se3::camera_center).collect();
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / nf;

    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    let mut var_d = 0.0;
    for (s, d) in src.iter().zip(&dst) {
        let (sc, dc) = (s - mu_s, d - mu_d);
        cov += dc * sc.transpose();
        var_s += sc.norm_squared();
        var_d += dc.norm_squared();
    }
    cov /= nf;
    var_s /= nf;
    var_d /= nf;

    let svd = cov.svd(true, true);
    let sv = svd.singular_values;
    let coincident = var_s <= 1e-24 || var_d <= 1e-24;
    if coincident || !(sv[1] > 1e-9 * sv[0]) {
        return Err(Error::DegenerateAlignment);
    }
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let scale = match mode {
        AlignMode::Se3 => 1.0,
        AlignMode::Sim3 => (sv[0] * d[(0, 0)] + sv[1] * d[(1, 1)] + sv[2] * d[(2, 2)]) / var_s,
    };
    let translation = mu_d - rotation * mu_s * scale;
    let alignment = Alignment {
        scale,
        rotation: Rotation(rotation),
        translation,
    };
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (alignment.apply(s) - d).norm_squared())
        .sum();
    Ok((alignment, (sq / nf).sqrt()))
}
