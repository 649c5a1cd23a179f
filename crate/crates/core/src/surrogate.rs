//! Multiview surrogate registration: maps the currently transformed scans to
//! per-scan residual transforms `T̂ᵢ^{t→0}` that move each scan toward its
//! optimal pose. Residuals act in the world frame (left composition).

use nalgebra::{Matrix3, Vector3};
use rand::RngCore;

use crate::diffusion::PoseSet;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Scene};
use crate::lie::{RigidTransform, Svd3, Twist};

/// Everything a surrogate may look at for one reverse step.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateInput<'a> {
    /// Scans transformed by the current poses.
    pub transformed: &'a [PointCloud],
    pub current: &'a PoseSet,
    /// Diffusion timestep, when called from inside a chain. Default
    /// implementations ignore it.
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanWarning {
    pub scan: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    pub residuals: PoseSet,
    pub warnings: Vec<ScanWarning>,
}

/// A registration model usable inside the reverse diffusion chain.
///
/// Implementations are stateless between calls and must tolerate concurrent
/// read-only use.
pub trait Surrogate: Sync {
    fn estimate(
        &self,
        input: &SurrogateInput<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<SurrogateOutput>;
}

/// Weighted least-squares rigid alignment: `argmin_T Σ w_k ‖T p_k − q_k‖²`.
pub fn kabsch_align(
    p: &[Vector3<f64>],
    q: &[Vector3<f64>],
    w: Option<&[f64]>,
) -> Result<RigidTransform> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "{} source vs {} target points",
            p.len(),
            q.len()
        )));
    }
    if p.len() < 3 {
        return Err(Error::Degenerate(format!(
            "need at least 3 pairs, got {}",
            p.len()
        )));
    }
    if let Some(w) = w {
        if w.len() != p.len() {
            return Err(Error::InvalidArgument(
                "weight count differs from point count".into(),
            ));
        }
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidArgument(
                "weights must be finite and non-negative".into(),
            ));
        }
    }
    let weight = |k: usize| w.map_or(1.0, |w| w[k]);
    let total: f64 = (0..p.len()).map(weight).sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::Degenerate("all weights are zero".into()));
    }
    let p_bar = (0..p.len()).fold(Vector3::zeros(), |acc, k| acc + p[k] * weight(k)) / total;
    let q_bar = (0..q.len()).fold(Vector3::zeros(), |acc, k| acc + q[k] * weight(k)) / total;
    let h = (0..p.len()).fold(Matrix3::zeros(), |acc, k| {
        acc + (p[k] - p_bar) * (q[k] - q_bar).transpose() * weight(k)
    });

    let svd = Svd3::new(&h);
    if svd.sigma[1].abs() <= 1e-10 * svd.sigma[0].abs().max(f64::MIN_POSITIVE)
        || svd.sigma[0] == 0.0
    {
        return Err(Error::Degenerate(format!(
            "collinear or coincident correspondences (singular values {:e}, {:e}, {:e})",
            svd.sigma[0], svd.sigma[1], svd.sigma[2]
        )));
    }
    // H = U Σ Vᵀ  ⇒  R = V diag(1, 1, det(V Uᵀ)) Uᵀ
    let d = (svd.v * svd.u.transpose()).determinant().signum();
    let r = svd.v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * svd.u.transpose();
    let rotation = crate::lie::Rotation::from_matrix_unchecked(r);
    Ok(RigidTransform::new(rotation, q_bar - r * p_bar))
}

/// Per-scan `(local point index, world point id)` pairs with weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    pub pairs: Vec<Vec<(usize, u64)>>,
    pub weights: Vec<Vec<f64>>,
}

impl Correspondences {
    /// Pairs every scan point with the world point carrying the same id, weight 1.
    pub fn from_ids(scene: &Scene) -> Self {
        let pairs: Vec<Vec<(usize, u64)>> = scene
            .scans
            .iter()
            .map(|s| {
                s.ids
                    .iter()
                    .enumerate()
                    .filter(|(_, id)| scene.world_point(**id).is_some())
                    .map(|(k, &id)| (k, id))
                    .collect()
            })
            .collect();
        let weights = pairs.iter().map(|p| vec![1.0; p.len()]).collect();
        Correspondences { pairs, weights }
    }
}

/// Residuals `Exp(noise)·T_i^0·(T_i^t)⁻¹` from known ground truth.
pub fn oracle_estimate(
    gt: &PoseSet,
    current: &PoseSet,
    noise_scale: f64,
    rng: &mut dyn RngCore,
) -> Result<SurrogateOutput> {
    gt.ensure_same_len(current, "oracle_estimate")?;
    let residuals = gt
        .iter()
        .zip(current.iter())
        .map(|(g, c)| {
            let exact = g.compose(&c.inverse());
            if noise_scale > 0.0 {
                RigidTransform::exp(&Twist::sample(rng, noise_scale, noise_scale)).compose(&exact)
            } else {
                exact
            }
        })
        .collect();
    Ok(SurrogateOutput {
        residuals: PoseSet::new(residuals)?,
        warnings: Vec::new(),
    })
}

/// Surrogate with access to the ground-truth poses.
#[derive(Debug, Clone)]
pub struct OracleSurrogate {
    pub gt: PoseSet,
    pub noise_scale: f64,
}

impl OracleSurrogate {
    pub fn exact(gt: PoseSet) -> Self {
        OracleSurrogate {
            gt,
            noise_scale: 0.0,
        }
    }
}

impl Surrogate for OracleSurrogate {
    fn estimate(
        &self,
        input: &SurrogateInput<'_>,
        rng: &mut dyn RngCore,
    ) -> Result<SurrogateOutput> {
        oracle_estimate(&self.gt, input.current, self.noise_scale, rng)
    }
}

/// What to do when a scan's correspondences are degenerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegeneratePolicy {
    /// Substitute the identity residual and record a warning.
    #[default]
    Identity,
    Fail,
}

/// Closed-form Procrustes surrogate: aligns each transformed scan to the
/// world coordinates of its corresponded points.
#[derive(Debug, Clone)]
pub struct KabschSurrogate {
    targets: Vec<Vec<(usize, Vector3<f64>)>>,
    weights: Vec<Vec<f64>>,
    pub policy: DegeneratePolicy,
}

impl KabschSurrogate {
    pub fn new(scene: &Scene, corr: &Correspondences) -> Result<Self> {
        if corr.pairs.len() != scene.len() || corr.weights.len() != scene.len() {
            return Err(Error::InvalidArgument(
                "correspondences do not match scan count".into(),
            ));
        }
        let mut targets = Vec::with_capacity(scene.len());
        for (i, pairs) in corr.pairs.iter().enumerate() {
            if corr.weights[i].len() != pairs.len() {
                return Err(Error::InvalidArgument(format!(
                    "scan {i}: weight count mismatch"
                )));
            }
            let mut t = Vec::with_capacity(pairs.len());
            for &(k, id) in pairs {
                if k >= scene.scans[i].len() {
                    return Err(Error::InvalidArgument(format!(
                        "scan {i}: point index {k} out of range"
                    )));
                }
                let q = scene.world_point(id).ok_or_else(|| {
                    Error::InvalidArgument(format!("scan {i}: unknown world id {id}"))
                })?;
                t.push((k, *q));
            }
            targets.push(t);
        }
        Ok(KabschSurrogate {
            targets,
            weights: corr.weights.clone(),
            policy: DegeneratePolicy::default(),
        })
    }

    pub fn from_scene(scene: &Scene) -> Result<Self> {
        Self::new(scene, &Correspondences::from_ids(scene))
    }

    pub fn with_policy(mut self, policy: DegeneratePolicy) -> Self {
        self.policy = policy;
        self
    }
}

/// Per-scan Kabsch residuals from transformed scans to world points.
pub fn kabsch_surrogate_estimate(
    transformed: &[PointCloud],
    surrogate: &KabschSurrogate,
    step: Option<usize>,
) -> Result<SurrogateOutput> {
    if transformed.len() != surrogate.targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} transformed scans for a surrogate built on {}",
            transformed.len(),
            surrogate.targets.len()
        )));
    }
    let mut residuals = Vec::with_capacity(transformed.len());
    let mut warnings = Vec::new();
    for (i, (cloud, targets)) in transformed.iter().zip(&surrogate.targets).enumerate() {
        let p: Vec<Vector3<f64>> = targets.iter().map(|(k, _)| cloud.points[*k]).collect();
        let q: Vec<Vector3<f64>> = targets.iter().map(|(_, q)| *q).collect();
        match kabsch_align(&p, &q, Some(&surrogate.weights[i])) {
            Ok(t) => residuals.push(t),
            Err(e @ Error::Degenerate(_)) => match surrogate.policy {
                DegeneratePolicy::Identity => {
                    warnings.push(ScanWarning {
                        scan: i,
                        message: e.to_string(),
                    });
                    residuals.push(RigidTransform::identity());
                }
                DegeneratePolicy::Fail => {
                    return Err(Error::Surrogate {
                        step: step.unwrap_or(0),
                        scan: i,
                        source: Box::new(e),
                    })
                }
            },
            Err(e) => {
                return Err(Error::Surrogate {
                    step: step.unwrap_or(0),
                    scan: i,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(SurrogateOutput {
        residuals: PoseSet::new(residuals)?,
        warnings,
    })
}

impl Surrogate for KabschSurrogate {
    fn estimate(
        &self,
        input: &SurrogateInput<'_>,
        _rng: &mut dyn RngCore,
    ) -> Result<SurrogateOutput> {
        kabsch_surrogate_estimate(input.transformed, self, input.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_scene, transform_scene, SceneConfig};
    use crate::lie::sample_random_pose;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                )
            })
            .collect()
    }

    #[test]
    fn identical_sets_align_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_points(&mut rng, 20);
        let t = kabsch_align(&p, &p, None).unwrap();
        assert_relative_eq!(*t.rotation.matrix(), Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(t.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn recovers_known_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let truth = sample_random_pose(&mut rng, 1.5, 3.0).unwrap();
            let p = random_points(&mut rng, 30);
            let q: Vec<_> = p.iter().map(|x| truth.apply(x)).collect();
            let w: Vec<f64> = (0..30).map(|_| rng.random_range(0.1..2.0)).collect();
            let t = kabsch_align(&p, &q, Some(&w)).unwrap();
            assert_relative_eq!(
                *t.rotation.matrix(),
                *truth.rotation.matrix(),
                epsilon = 1e-10
            );
            assert_relative_eq!(t.translation, truth.translation, epsilon = 1e-10);
        }
    }

    #[test]
    fn planar_points_are_fine_collinear_are_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = sample_random_pose(&mut rng, 1.0, 1.0).unwrap();
        let planar: Vec<_> = (0..10)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    0.0,
                )
            })
            .collect();
        let q: Vec<_> = planar.iter().map(|x| truth.apply(x)).collect();
        let t = kabsch_align(&planar, &q, None).unwrap();
        assert_relative_eq!(
            *t.rotation.matrix(),
            *truth.rotation.matrix(),
            epsilon = 1e-10
        );

        let line: Vec<_> = (0..10)
            .map(|k| Vector3::new(k as f64, 2.0 * k as f64, 0.0))
            .collect();
        assert!(matches!(
            kabsch_align(&line, &line, None),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            kabsch_align(&line[..2], &line[..2], None),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn left_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_points(&mut rng, 25);
        let q = random_points(&mut rng, 25);
        let g = sample_random_pose(&mut rng, 1.0, 2.0).unwrap();
        let gq: Vec<_> = q.iter().map(|x| g.apply(x)).collect();
        let a = kabsch_align(&p, &gq, None).unwrap();
        let b = g.compose(&kabsch_align(&p, &q, None).unwrap());
        assert_relative_eq!(*a.rotation.matrix(), *b.rotation.matrix(), epsilon = 1e-10);
        assert_relative_eq!(a.translation, b.translation, epsilon = 1e-10);
    }

    #[test]
    fn oracle_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = PoseSet::new(
            (0..4)
                .map(|_| sample_random_pose(&mut rng, 1.0, 2.0).unwrap())
                .collect(),
        )
        .unwrap();
        let out = oracle_estimate(&gt, &gt, 0.0, &mut rng).unwrap();
        for r in out.residuals.iter() {
            assert_relative_eq!(*r.rotation.matrix(), Matrix3::identity(), epsilon = 1e-12);
            assert_relative_eq!(r.translation, Vector3::zeros(), epsilon = 1e-12);
        }
        assert!(oracle_estimate(&gt, &PoseSet::identity(2).unwrap(), 0.0, &mut rng).is_err());
    }

    #[test]
    fn oracle_noise_has_requested_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = PoseSet::identity(2).unwrap();
        let n = 5000;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let out = oracle_estimate(&gt, &gt, 0.05, &mut rng).unwrap();
            for r in out.residuals.iter() {
                sum_sq += r.log().unwrap().to_vector().norm_squared();
            }
        }
        let stdev = (sum_sq / (n as f64 * 2.0 * 6.0)).sqrt();
        assert!((stdev - 0.05).abs() < 0.05 * 0.05, "stdev {stdev}");
    }

    fn noiseless_scene(n: usize, seed: u64) -> Scene {
        let cfg = SceneConfig {
            world_points: 1500,
            point_noise: 0.0,
            ..SceneConfig::default().with_scans(n)
        };
        generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn kabsch_surrogate_at_gt_is_identity() {
        let scene = noiseless_scene(4, 7);
        let s = KabschSurrogate::from_scene(&scene).unwrap();
        let moved = transform_scene(&scene, &scene.gt).unwrap();
        let out = kabsch_surrogate_estimate(&moved, &s, None).unwrap();
        assert!(out.warnings.is_empty());
        for r in out.residuals.iter() {
            assert_relative_eq!(*r.rotation.matrix(), Matrix3::identity(), epsilon = 1e-10);
            assert_relative_eq!(r.translation, Vector3::zeros(), epsilon = 1e-10);
        }
    }

    #[test]
    fn kabsch_surrogate_recovers_exact_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scene = noiseless_scene(5, 8);
        let current = PoseSet::new(
            scene
                .gt
                .iter()
                .map(|g| g.compose(&sample_random_pose(&mut rng, 0.3, 0.5).unwrap()))
                .collect(),
        )
        .unwrap();
        let s = KabschSurrogate::from_scene(&scene).unwrap();
        let moved = transform_scene(&scene, &current).unwrap();
        let out = kabsch_surrogate_estimate(&moved, &s, Some(3)).unwrap();
        for ((r, g), c) in out
            .residuals
            .iter()
            .zip(scene.gt.iter())
            .zip(current.iter())
        {
            let exact = g.compose(&c.inverse());
            assert_relative_eq!(
                *r.rotation.matrix(),
                *exact.rotation.matrix(),
                epsilon = 1e-9
            );
            assert_relative_eq!(r.translation, exact.translation, epsilon = 1e-9);
        }
    }

    #[test]
    fn degenerate_scan_policy() {
        let scene = noiseless_scene(3, 9);
        let mut corr = Correspondences::from_ids(&scene);
        corr.pairs[1].truncate(2);
        corr.weights[1].truncate(2);
        let moved = transform_scene(&scene, &scene.gt).unwrap();

        let lenient = KabschSurrogate::new(&scene, &corr).unwrap();
        let out = kabsch_surrogate_estimate(&moved, &lenient, None).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.warnings[0].scan, 1);
        assert_eq!(out.residuals[1], RigidTransform::identity());

        let strict = lenient.with_policy(DegeneratePolicy::Fail);
        let err = kabsch_surrogate_estimate(&moved, &strict, Some(7)).unwrap_err();
        assert!(matches!(
            err,
            Error::Surrogate {
                step: 7,
                scan: 1,
                ..
            }
        ));
    }
}
