//! SO(3) and SE(3) group and Lie-algebra operations.
//!
//! Twists are always ordered `(omega, v)`: rotational part first, then
//! translational. The SE(3) exponential couples the two through the left
//! Jacobian `V(omega)`.

mod svd;

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use svd::{project_to_so3, Svd3};

/// Below this angle the Rodrigues coefficients switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;
/// Logarithms of rotations closer than this to π are rejected where a unique
/// tangent vector is required.
pub const PI_MARGIN: f64 = 1e-6;
/// Tolerance used when accepting an externally supplied matrix as a rotation.
pub const ROTATION_ACCEPT_TOL: f64 = 1e-6;

// Series cut-over for the `V` / `V⁻¹` coefficients, which suffer cancellation
// well above `SMALL_ANGLE`.
const SERIES_ANGLE: f64 = 1e-2;

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Accepts `m` if `‖mᵀm − I‖_F` and `|det m − 1|` are within [`ROTATION_ACCEPT_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(
                "rotation has non-finite entries".into(),
            ));
        }
        let ortho = (m.transpose() * m - Matrix3::identity()).norm();
        let det = m.determinant();
        if ortho > ROTATION_ACCEPT_TOL || (det - 1.0).abs() > ROTATION_ACCEPT_TOL {
            return Err(Error::InvalidArgument(format!(
                "matrix is not a rotation (orthogonality defect {ortho:e}, det {det})"
            )));
        }
        Ok(Rotation(m))
    }

    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn exp(omega: &Vector3<f64>) -> Self {
        let theta_sq = omega.norm_squared();
        let theta = theta_sq.sqrt();
        let w = hat(omega);
        let w2 = w * w;
        if theta < SMALL_ANGLE {
            return Rotation(Matrix3::identity() + w + w2 * 0.5);
        }
        let (a, b) = rodrigues_coeffs(theta);
        Rotation(Matrix3::identity() + w * a + w2 * b)
    }

    /// Principal axis-angle vector with `‖ω‖ ≤ π`.
    pub fn log(&self) -> Vector3<f64> {
        let m = &self.0;
        let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let sin_axis = Vector3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        ) * 0.5;
        let sin = sin_axis.norm();
        let theta = sin.atan2(cos);

        if theta < SMALL_ANGLE {
            return sin_axis * (1.0 + theta * theta / 6.0);
        }
        if cos > -0.99 {
            return sin_axis * (theta / sin);
        }

        // Near π: read the axis off the symmetric part, (R+Rᵀ)/2 = cI + (1-c)aaᵀ.
        let sym = (m + m.transpose()) * 0.5;
        let outer = (sym - Matrix3::identity() * cos) / (1.0 - cos);
        let k = (0..3)
            .max_by(|&i, &j| outer[(i, i)].total_cmp(&outer[(j, j)]))
            .unwrap_or(0);
        let mut axis: Vector3<f64> = outer.column(k).into_owned() / outer[(k, k)].max(0.0).sqrt();
        axis.normalize_mut();
        if axis.dot(&sin_axis) < 0.0 {
            axis = -axis;
        }
        axis * theta
    }

    /// Rotation angle in `[0, π]`, computed as `atan2(‖vee(R−Rᵀ)‖/2, (tr R − 1)/2)`.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.0)
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        Rotation(self.0 * other.0)
    }
}

/// `(sin θ / θ, (1 − cos θ) / θ²)` with the half-angle form for the second.
fn rodrigues_coeffs(theta: f64) -> (f64, f64) {
    let half = 0.5 * theta;
    let s_half = half.sin() / half;
    (theta.sin() / theta, 0.5 * s_half * s_half)
}

/// Angle of the rotation carried by `m`, numerically stable across `[0, π]`.
///
/// Equal to `arccos((tr m − 1)/2)` for rotations, without the loss of
/// precision that `arccos` has near 0 and π.
pub fn rotation_angle(m: &Matrix3<f64>) -> f64 {
    let cos = (m.trace() - 1.0) * 0.5;
    let sin = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    )
    .norm()
        * 0.5;
    sin.atan2(cos)
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// 6-vector Lie-algebra coordinate of SE(3), ordered `(omega, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        Twist { omega, v }
    }

    pub fn zero() -> Self {
        Twist::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Twist::new(
            x.fixed_rows::<3>(0).into_owned(),
            x.fixed_rows::<3>(3).into_owned(),
        )
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega.x,
            self.omega.y,
            self.omega.z,
            self.v.x,
            self.v.y,
            self.v.z,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.omega
            .iter()
            .chain(self.v.iter())
            .all(|x| x.is_finite())
    }

    pub fn scale(&self, s: f64) -> Twist {
        Twist::new(self.omega * s, self.v * s)
    }

    /// Draw `omega ~ N(0, rot_scale² I)`, `v ~ N(0, trans_scale² I)`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, rot_scale: f64, trans_scale: f64) -> Twist {
        let mut draw = || -> f64 { rng.sample(StandardNormal) };
        let omega = Vector3::new(draw(), draw(), draw()) * rot_scale;
        let v = Vector3::new(draw(), draw(), draw()) * trans_scale;
        Twist::new(omega, v)
    }
}

impl std::ops::Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist::new(self.omega + rhs.omega, self.v + rhs.v)
    }
}

/// An element of SE(3): `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        RigidTransform::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform::new(Rotation::identity(), t)
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.0 * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt.0 * self.translation),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.0 * p + self.translation
    }

    pub fn exp(xi: &Twist) -> RigidTransform {
        let omega = &xi.omega;
        let theta = omega.norm();
        let w = hat(omega);
        let w2 = w * w;
        let rotation = Rotation::exp(omega);
        let (b, c) = if theta < SERIES_ANGLE {
            let t2 = theta * theta;
            (
                0.5 - t2 / 24.0 + t2 * t2 / 720.0,
                1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
            )
        } else {
            let (_, b) = rodrigues_coeffs(theta);
            (b, (theta - theta.sin()) / (theta * theta * theta))
        };
        let v_mat = Matrix3::identity() + w * b + w2 * c;
        RigidTransform::new(rotation, v_mat * xi.v)
    }

    /// Inverse of [`RigidTransform::exp`]; fails within [`PI_MARGIN`] of a half turn.
    pub fn log(&self) -> Result<Twist> {
        let theta = self.rotation.angle();
        if theta >= std::f64::consts::PI - PI_MARGIN {
            return Err(Error::domain(format!(
                "rotation angle {theta} is within {PI_MARGIN:e} of pi; logarithm not unique"
            )));
        }
        let omega = self.rotation.log();
        let theta = omega.norm();
        let w = hat(&omega);
        let w2 = w * w;
        let c = if theta < SERIES_ANGLE {
            let t2 = theta * theta;
            1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
        } else {
            let half = 0.5 * theta;
            // 1 - θ sinθ / (2(1-cosθ)) = 1 - (θ/2) cot(θ/2)
            (1.0 - half * half.cos() / half.sin()) / (theta * theta)
        };
        let v_inv = Matrix3::identity() - w * 0.5 + w2 * c;
        Ok(Twist::new(omega, v_inv * self.translation))
    }

    /// 12 numbers: row-major rotation followed by translation.
    pub fn to_row(&self) -> [f64; 12] {
        let r = &self.rotation.0;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    pub fn from_row(row: &[f64]) -> Result<RigidTransform> {
        if row.len() != 12 {
            return Err(Error::Parse(format!(
                "pose row needs 12 numbers, got {}",
                row.len()
            )));
        }
        let r = Matrix3::new(
            row[0], row[1], row[2], row[3], row[4], row[5], row[6], row[7], row[8],
        );
        let t = Vector3::new(row[9], row[10], row[11]);
        if !t.iter().all(|x| x.is_finite()) {
            return Err(Error::Parse("pose translation is not finite".into()));
        }
        Ok(RigidTransform::new(Rotation::from_matrix(r)?, t))
    }

    /// Geodesic rotation angle and translation distance between two transforms.
    pub fn distance(&self, other: &RigidTransform) -> (f64, f64) {
        let rel = self.rotation.transpose().compose(&other.rotation);
        (rel.angle(), (self.translation - other.translation).norm())
    }
}

impl fmt::Display for RigidTransform {
    /// Whitespace-separated row with 17 significant digits per entry.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = self.to_row();
        for (k, x) in row.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{x:.16e}")?;
        }
        Ok(())
    }
}

impl FromStr for RigidTransform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let row = s
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("bad number {tok:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        RigidTransform::from_row(&row)
    }
}

pub fn so3_exp(omega: &Vector3<f64>) -> Result<Rotation> {
    if !omega.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite rotation vector".into()));
    }
    Ok(Rotation::exp(omega))
}

/// Validates `m` as a rotation (to 1e-6) and returns its principal logarithm.
pub fn so3_log(m: &Matrix3<f64>) -> Result<Vector3<f64>> {
    Ok(Rotation::from_matrix(*m)?.log())
}

pub fn se3_exp(xi: &Twist) -> Result<RigidTransform> {
    if !xi.is_finite() {
        return Err(Error::InvalidArgument("non-finite twist".into()));
    }
    Ok(RigidTransform::exp(xi))
}

pub fn se3_log(t: &RigidTransform) -> Result<Twist> {
    t.log()
}

/// Geodesic interpolation `Exp((1−w)·Log(T_prior·T0⁻¹))·T0`.
///
/// `w = 1` returns `t0`, `w = 0` returns `prior`.
pub fn pose_interpolate(
    w: f64,
    t0: &RigidTransform,
    prior: &RigidTransform,
) -> Result<RigidTransform> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidArgument(format!(
            "interpolation weight {w} outside [0, 1]"
        )));
    }
    let delta = prior.compose(&t0.inverse()).log()?;
    if w == 1.0 {
        return Ok(*t0);
    }
    if w == 0.0 {
        return Ok(*prior);
    }
    Ok(RigidTransform::exp(&delta.scale(1.0 - w)).compose(t0))
}

/// `Exp(ξ)` with `ξ.omega ~ N(0, rot_scale²)`, `ξ.v ~ N(0, trans_scale²)` per component.
pub fn sample_random_pose<R: Rng + ?Sized>(
    rng: &mut R,
    rot_scale: f64,
    trans_scale: f64,
) -> Result<RigidTransform> {
    if !(rot_scale >= 0.0 && trans_scale >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scales must be non-negative, got ({rot_scale}, {trans_scale})"
        )));
    }
    Ok(RigidTransform::exp(&Twist::sample(
        rng,
        rot_scale,
        trans_scale,
    )))
}

/// Rotation drawn uniformly from SO(3) (Shoemake's unit-quaternion method).
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let u1: f64 = rng.random();
    let u2: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let u3: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos());
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
    Rotation(*q.to_rotation_matrix().matrix())
}
