//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::ops::{Add, Div, Mul, Neg, Sub};

use mvdiff::diffusion::PoseSet;
use mvdiff::lie::{RigidTransform, Rotation};
use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// Double-double number: unevaluated sum `hi + lo` with ~106-bit significand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub fn new(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::new(0.0);
        }
        let y = Dd::new(self.hi.sqrt());
        y + (self - y * y) / (y * Dd::new(2.0))
    }

    pub fn abs(self) -> Dd {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (hi, lo) = quick_two_sum(s, e + self.lo + o.lo);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let (hi, lo) = quick_two_sum(p, e + self.hi * o.lo + self.lo * o.hi);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

/// Denoising weights recomputed from a raw β array in double-double, with
/// the third weight taken from its closed form rather than `1 − λ0 − λ1`.
pub fn lambdas_dd(betas: &[f64], t: usize) -> (Dd, Dd, Dd) {
    let one = Dd::new(1.0);
    let mut ab_prev = one;
    for b in &betas[..t - 1] {
        ab_prev = ab_prev * (one - Dd::new(*b));
    }
    let beta = Dd::new(betas[t - 1]);
    let alpha = one - beta;
    let ab = ab_prev * alpha;
    let denom = one - ab;
    let l0 = ab_prev.sqrt() * beta / denom;
    let l1 = alpha.sqrt() * (one - ab_prev) / denom;
    let l2 = one + (ab.sqrt() - one) * (alpha.sqrt() + ab_prev.sqrt()) / denom;
    (l0, l1, l2)
}

/// Mean L1 point discrepancy accumulated entirely in double-double.
pub fn pointwise_dd(a: &RigidTransform, b: &RigidTransform, pts: &[Vector3<f64>]) -> f64 {
    let ra = a.rotation.matrix();
    let rb = b.rotation.matrix();
    let mut total = Dd::new(0.0);
    for p in pts {
        for r in 0..3 {
            let mut d = Dd::new(a.translation[r]) - Dd::new(b.translation[r]);
            for c in 0..3 {
                d = d + Dd::new(ra[(r, c)]) * Dd::new(p[c]) - Dd::new(rb[(r, c)]) * Dd::new(p[c]);
            }
            total = total + d.abs();
        }
    }
    (total / Dd::new(pts.len() as f64)).to_f64()
}

fn hat4(xi: &Vector6<f64>) -> Matrix4<f64> {
    let (w, v) = (xi.fixed_rows::<3>(0), xi.fixed_rows::<3>(3));
    Matrix4::new(
        0.0, -w[2], w[1], v[0], //
        w[2], 0.0, -w[0], v[1], //
        -w[1], w[0], 0.0, v[2], //
        0.0, 0.0, 0.0, 0.0,
    )
}

/// Matrix exponential of the 4×4 twist matrix by scaling and squaring.
pub fn ref_exp(xi: &Vector6<f64>) -> Matrix4<f64> {
    let m = hat4(xi);
    let norm = m.abs().row_sum().max();
    let mut s = 0;
    while norm / f64::powi(2.0, s) > 0.25 {
        s += 1;
    }
    let a = m / f64::powi(2.0, s);
    let mut term = Matrix4::identity();
    let mut sum = Matrix4::identity();
    for k in 1..=24 {
        term = term * a / k as f64;
        sum += term;
    }
    for _ in 0..s {
        sum = sum * sum;
    }
    sum
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

/// Logarithm via quaternion extraction and an inverted power series for the
/// left Jacobian.
pub fn ref_log(t: &Matrix4<f64>) -> Vector6<f64> {
    let r: Matrix3<f64> = t.fixed_view::<3, 3>(0, 0).into_owned();
    let q = nalgebra::UnitQuaternion::from_matrix(&r);
    let (w, v) = (q.w, q.imag());
    let (w, v) = if w < 0.0 { (-w, -v) } else { (w, v) };
    let s = v.norm();
    let omega = if s == 0.0 {
        Vector3::zeros()
    } else {
        v * (2.0 * s.atan2(w) / s)
    };
    let k = skew(&omega);
    let mut jac = Matrix3::zeros();
    let mut power = Matrix3::identity();
    let mut fact = 1.0;
    for n in 0..60 {
        fact *= (n + 1) as f64;
        jac += power / fact;
        power *= k;
    }
    let trans: Vector3<f64> = t.fixed_view::<3, 1>(0, 3).into_owned();
    let v = jac
        .lu()
        .solve(&trans)
        .expect("left Jacobian invertible below 2π");
    Vector6::new(omega[0], omega[1], omega[2], v[0], v[1], v[2])
}

pub fn to_matrix4(t: &RigidTransform) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(t.rotation.matrix());
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t.translation);
    m
}

pub fn from_matrix4(m: &Matrix4<f64>) -> RigidTransform {
    let r = Rotation::from_matrix(m.fixed_view::<3, 3>(0, 0).into_owned()).expect("valid rotation");
    RigidTransform::new(r, m.fixed_view::<3, 1>(0, 3).into_owned())
}

/// Horn's closed-form absolute orientation via the 4×4 quaternion matrix.
pub fn horn_align(
    p: &[Vector3<f64>],
    q: &[Vector3<f64>],
    w: &[f64],
) -> (Matrix3<f64>, Vector3<f64>) {
    let wsum: f64 = w.iter().sum();
    let pc = p.iter().zip(w).map(|(x, k)| x * *k).sum::<Vector3<f64>>() / wsum;
    let qc = q.iter().zip(w).map(|(x, k)| x * *k).sum::<Vector3<f64>>() / wsum;
    let mut s = Matrix3::zeros();
    for ((a, b), k) in p.iter().zip(q).zip(w) {
        s += (a - pc) * (b - qc).transpose() * *k;
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let n = Matrix4::new(
        sxx + syy + szz,
        syz - szy,
        szx - sxz,
        sxy - syx, //
        syz - szy,
        sxx - syy - szz,
        sxy + syx,
        szx + sxz, //
        szx - sxz,
        sxy + syx,
        -sxx + syy - szz,
        syz + szy, //
        sxy - syx,
        szx + sxz,
        syz + szy,
        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(n);
    let k = eig.eigenvalues.imax();
    let e = eig.eigenvectors.column(k);
    let quat = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        e[0], e[1], e[2], e[3],
    ));
    let r = *quat.to_rotation_matrix().matrix();
    (r, qc - r * pc)
}

/// Random pose set with the given per-component twist scales.
pub fn random_poses<R: Rng>(rng: &mut R, n: usize, rot: f64, trans: f64) -> PoseSet {
    PoseSet::new(
        (0..n)
            .map(|_| mvdiff::lie::sample_random_pose(rng, rot, trans).unwrap())
            .collect(),
    )
    .unwrap()
}

pub fn max_pose_error(a: &PoseSet, b: &PoseSet) -> (f64, f64) {
    a.iter().zip(b.iter()).fold((0.0, 0.0), |(r, t), (x, y)| {
        let (dr, dt) = x.distance(y);
        (f64::max(r, dr), f64::max(t, dt))
    })
}
