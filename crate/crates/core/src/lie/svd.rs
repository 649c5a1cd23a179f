//! 3×3 singular value decomposition by one-sided Jacobi rotations, and the
//! nearest-rotation projection built on it.

use nalgebra::{Matrix3, Vector3};

use super::Rotation;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 64;

/// `m = u · diag(sigma) · vᵀ` with `det(u) = +1`.
///
/// Singular values are ordered by decreasing magnitude. Because `u` is forced
/// to be a proper rotation, the last singular value carries the sign of
/// `det(m)`.
#[derive(Debug, Clone, Copy)]
pub struct Svd3 {
    pub u: Matrix3<f64>,
    pub sigma: Vector3<f64>,
    pub v: Matrix3<f64>,
}

impl Svd3 {
    pub fn new(m: &Matrix3<f64>) -> Self {
        let mut a = *m;
        let mut v = Matrix3::<f64>::identity();

        for _ in 0..MAX_SWEEPS {
            let mut rotated = false;
            for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..3 {
                    let (ap, aq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * ap - s * aq;
                    a[(k, q)] = s * ap + c * aq;
                    let (vp, vq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vp - s * vq;
                    v[(k, q)] = s * vp + c * vq;
                }
            }
            if !rotated {
                break;
            }
        }

        // Sort columns by decreasing norm.
        let mut order = [0usize, 1, 2];
        let norms: [f64; 3] = [a.column(0).norm(), a.column(1).norm(), a.column(2).norm()];
        order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
        let a_sorted =
            Matrix3::from_columns(&[a.column(order[0]), a.column(order[1]), a.column(order[2])]);
        let v_sorted =
            Matrix3::from_columns(&[v.column(order[0]), v.column(order[1]), v.column(order[2])]);

        let s0 = norms[order[0]];
        let s1 = norms[order[1]];
        let u0 = if s0 > 0.0 {
            a_sorted.column(0) / s0
        } else {
            Vector3::x()
        };
        let u1 = if s1 > 0.0 {
            let raw = a_sorted.column(1) / s1;
            // Re-orthogonalize against u0 to absorb residual rounding.
            let r = raw - u0 * u0.dot(&raw);
            r.normalize()
        } else {
            any_orthogonal(&u0)
        };
        let u2 = u0.cross(&u1);
        let s2 = u2.dot(&a_sorted.column(2));

        Svd3 {
            u: Matrix3::from_columns(&[u0, u1, u2]),
            sigma: Vector3::new(s0, s1, s2),
            v: v_sorted,
        }
    }
}

fn any_orthogonal(u: &Vector3<f64>) -> Vector3<f64> {
    let pick = if u.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    (pick - u * u.dot(&pick)).normalize()
}

/// Nearest rotation in Frobenius norm: `U·diag(1,1,det(UVᵀ))·Vᵀ`.
///
/// Fails when the smallest singular value is at most `1e-12` times the largest.
pub fn project_to_so3(m: &Matrix3<f64>) -> Result<Rotation> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "matrix has non-finite entries".into(),
        ));
    }
    let svd = Svd3::new(m);
    let smax = svd.sigma[0].abs();
    let smin = svd.sigma[2].abs();
    if smax == 0.0 || smin <= 1e-12 * smax {
        return Err(Error::Degenerate(format!(
            "rank-deficient matrix, singular values ({:e}, {:e}, {:e})",
            svd.sigma[0], svd.sigma[1], svd.sigma[2]
        )));
    }
    let d = (svd.u * svd.v.transpose()).determinant().signum();
    let r = svd.u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * svd.v.transpose();
    Ok(Rotation::from_matrix_unchecked(r))
}
