use nalgebra::Vector6;
use rand::{Rng, RngCore};

use super::{inference_timesteps, DenoiseCoeffs, NoiseSchedule, PoseSet};
use crate::error::{Error, Result};
use crate::geometry::{transform_scene, Scene};
use crate::lie::{pose_interpolate, RigidTransform, Twist};
use crate::surrogate::{Surrogate, SurrogateInput};

/// Per-part multipliers on the unit-variance noise twist. Isotropic by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseScales {
    pub rotation: f64,
    pub translation: f64,
}

impl Default for NoiseScales {
    fn default() -> Self {
        NoiseScales {
            rotation: 1.0,
            translation: 1.0,
        }
    }
}

impl NoiseScales {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> Twist {
        Twist::sample(rng, scale * self.rotation, scale * self.translation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionConfig {
    /// Forward-process noise weight `γ`.
    pub gamma: f64,
    pub train_steps: usize,
    pub inference_steps: usize,
    pub seed: u64,
    /// Add `√β̃_t·ε` in each reverse step.
    pub reverse_noise: bool,
    /// Start the chain from a forward sample around the prior instead of the prior itself.
    pub stochastic_init: bool,
    pub noise_scales: NoiseScales,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            gamma: 0.1,
            train_steps: 200,
            inference_steps: 10,
            seed: 0,
            reverse_noise: true,
            stochastic_init: false,
            noise_scales: NoiseScales::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        if self.inference_steps < 1 || self.inference_steps > self.train_steps {
            return Err(Error::InvalidArgument(format!(
                "inference steps {} must lie in 1..={}",
                self.inference_steps, self.train_steps
            )));
        }
        if !(self.noise_scales.rotation >= 0.0 && self.noise_scales.translation >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise scales must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Forward sample at an explicit `ᾱ`:
/// `T_i = Exp(γ·√(1−ᾱ)·ε_i) · F(√ᾱ; T_i^0, T̂_i)`.
pub fn forward_diffuse_at<R: Rng + ?Sized>(
    t0: &PoseSet,
    prior: &PoseSet,
    alpha_bar: f64,
    gamma: f64,
    scales: NoiseScales,
    rng: &mut R,
) -> Result<PoseSet> {
    t0.ensure_same_len(prior, "forward_diffuse")?;
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::InvalidArgument(format!(
            "alpha_bar {alpha_bar} outside [0, 1]"
        )));
    }
    let weight = alpha_bar.sqrt();
    let noise = gamma * (1.0 - alpha_bar).sqrt();
    let poses = t0
        .iter()
        .zip(prior.iter())
        .enumerate()
        .map(|(i, (a, p))| {
            let interp = pose_interpolate(weight, a, p).map_err(|e| e.at_index(i))?;
            let eps = scales.sample(rng, noise);
            Ok(if noise > 0.0 {
                RigidTransform::exp(&eps).compose(&interp)
            } else {
                interp
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PoseSet::new(poses)
}

/// Forward sample `q(T^t | T^0, T̂)` for `t ∈ 0..=T`.
pub fn forward_diffuse<R: Rng + ?Sized>(
    t0: &PoseSet,
    prior: &PoseSet,
    schedule: &NoiseSchedule,
    t: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<PoseSet> {
    forward_diffuse_at(
        t0,
        prior,
        schedule.alpha_bar(t)?,
        gamma,
        NoiseScales::default(),
        rng,
    )
}

fn log_at(t: &RigidTransform, i: usize) -> Result<Vector6<f64>> {
    Ok(t.log().map_err(|e| e.at_index(i))?.to_vector())
}

/// `Σ w_k Log(T_k)`, skipping zero weights so an unused pose cannot raise a domain error.
fn weighted_log_sum(terms: &[(f64, &RigidTransform)], i: usize) -> Result<Vector6<f64>> {
    let mut acc = Vector6::zeros();
    for &(w, t) in terms {
        if w != 0.0 {
            acc += log_at(t, i)? * w;
        }
    }
    Ok(acc)
}

/// Posterior mean `Exp(λ0·Log T_i^0 + λ1·Log T_i^t + λ2·Log T̂_i)`.
pub fn posterior_mean(
    t0: &RigidTransform,
    tt: &RigidTransform,
    prior: &RigidTransform,
    c: &DenoiseCoeffs,
) -> Result<RigidTransform> {
    let x = weighted_log_sum(&[(c.lambda0, t0), (c.lambda1, tt), (c.lambda2, prior)], 0).map_err(
        |e| match e {
            Error::Domain { message, .. } => Error::Domain {
                message,
                index: None,
            },
            other => other,
        },
    )?;
    Ok(RigidTransform::exp(&Twist::from_vector(&x)))
}

/// Model mean in tangent coordinates (the argument of `Exp`), per scan.
pub(crate) fn model_mean_log(
    residuals: &PoseSet,
    tt: &PoseSet,
    prior: &PoseSet,
    c: &DenoiseCoeffs,
) -> Result<Vec<Vector6<f64>>> {
    residuals.ensure_same_len(tt, "reverse_step")?;
    tt.ensure_same_len(prior, "reverse_step")?;
    (0..tt.len())
        .map(|i| {
            let clean = residuals[i].compose(&tt[i]);
            weighted_log_sum(
                &[
                    (c.lambda0, &clean),
                    (c.lambda1, &tt[i]),
                    (c.lambda2, &prior[i]),
                ],
                i,
            )
        })
        .collect()
}

/// One reverse step:
/// `Exp(λ0·Log(T̂_i^{t→0}·T_i^t) + λ1·Log(T_i^t) + λ2·Log(T̂_i) [+ σ·ε_i])`.
pub fn reverse_step<R: Rng + ?Sized>(
    residuals: &PoseSet,
    tt: &PoseSet,
    prior: &PoseSet,
    c: &DenoiseCoeffs,
    noise_on: bool,
    rng: &mut R,
) -> Result<PoseSet> {
    let means = model_mean_log(residuals, tt, prior, c)?;
    let poses = means
        .into_iter()
        .map(|mut x| {
            if noise_on && c.sigma > 0.0 {
                x += Twist::sample(rng, c.sigma, c.sigma).to_vector();
            }
            RigidTransform::exp(&Twist::from_vector(&x))
        })
        .collect();
    PoseSet::new(poses)
}

/// Runs the reverse chain from the prior over `K` strided timesteps ending at
/// `t = 1`. Returns `K + 1` pose sets: the initial state, then one per step.
pub fn run_denoising(
    scene: &Scene,
    prior: &PoseSet,
    surrogate: &dyn Surrogate,
    schedule: &NoiseSchedule,
    cfg: &DiffusionConfig,
    rng: &mut dyn RngCore,
) -> Result<Vec<PoseSet>> {
    cfg.validate()?;
    if cfg.train_steps != schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "config expects {} training steps, schedule has {}",
            cfg.train_steps,
            schedule.steps()
        )));
    }
    if prior.len() != scene.len() {
        return Err(Error::InvalidArgument(format!(
            "prior has {} poses for {} scans",
            prior.len(),
            scene.len()
        )));
    }
    let steps = inference_timesteps(schedule.steps(), cfg.inference_steps)?;

    let mut state = if cfg.stochastic_init {
        let ab = schedule.alpha_bar(schedule.steps())?;
        let noise = cfg.gamma * (1.0 - ab).sqrt();
        let poses = prior
            .iter()
            .map(|p| RigidTransform::exp(&cfg.noise_scales.sample(rng, noise)).compose(p))
            .collect();
        PoseSet::new(poses)?
    } else {
        prior.clone()
    };

    let mut trajectory = Vec::with_capacity(steps.len() + 1);
    trajectory.push(state.clone());
    for &t in &steps {
        let transformed = transform_scene(scene, &state)?;
        let input = SurrogateInput {
            transformed: &transformed,
            current: &state,
            step: Some(t),
        };
        let out = surrogate.estimate(&input, rng).map_err(|e| match e {
            e @ Error::Surrogate { .. } => e,
            other => Error::Surrogate {
                step: t,
                scan: 0,
                source: Box::new(other),
            },
        })?;
        for w in &out.warnings {
            log::warn!("t={t} scan {}: {}", w.scan, w.message);
        }
        if out.residuals.len() != state.len() {
            return Err(Error::InvalidArgument(format!(
                "surrogate returned {} residuals for {} scans",
                out.residuals.len(),
                state.len()
            )));
        }
        let c = schedule.coeffs_at(t)?;
        state = reverse_step(&out.residuals, &state, prior, &c, cfg.reverse_noise, rng)?;
        trajectory.push(state.clone());
    }
    Ok(trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{sample_random_pose, Rotation};
    use crate::surrogate::OracleSurrogate;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, rot: f64, trans: f64) -> PoseSet {
        PoseSet::new(
            (0..n)
                .map(|_| sample_random_pose(rng, rot, trans).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn assert_pose_eq(a: &RigidTransform, b: &RigidTransform, eps: f64) {
        assert_relative_eq!(*a.rotation.matrix(), *b.rotation.matrix(), epsilon = eps);
        assert_relative_eq!(a.translation, b.translation, epsilon = eps);
    }

    #[test]
    fn forward_endpoints_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t0 = random_set(&mut rng, 4, 0.8, 2.0);
        let prior = random_set(&mut rng, 4, 0.8, 2.0);
        let s = NoiseSchedule::cosine(200).unwrap();
        assert_eq!(
            forward_diffuse(&t0, &prior, &s, 0, 0.0, &mut rng).unwrap(),
            t0
        );
        let at_prior =
            forward_diffuse_at(&t0, &prior, 0.0, 0.0, NoiseScales::default(), &mut rng).unwrap();
        assert_eq!(at_prior, prior);
        assert!(forward_diffuse(
            &t0,
            &random_set(&mut rng, 3, 0.1, 0.1),
            &s,
            5,
            0.1,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn noiseless_forward_lies_on_geodesic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = NoiseSchedule::cosine(200).unwrap();
        let t0 = random_set(&mut rng, 3, 0.8, 2.0);
        let prior = random_set(&mut rng, 3, 0.8, 2.0);
        for t in [1, 50, 120, 200] {
            let out = forward_diffuse(&t0, &prior, &s, t, 0.0, &mut rng).unwrap();
            let w = s.alpha_bar(t).unwrap().sqrt();
            for i in 0..3 {
                let total = prior[i]
                    .compose(&t0[i].inverse())
                    .log()
                    .unwrap()
                    .to_vector();
                let part = out[i].compose(&t0[i].inverse()).log().unwrap().to_vector();
                assert!((part - total * (1.0 - w)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_mean_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = NoiseSchedule::cosine(200).unwrap();
        let g = sample_random_pose(&mut rng, 1.0, 3.0).unwrap();
        for t in [1, 7, 100, 200] {
            let c = s.coeffs_at(t).unwrap();
            assert_pose_eq(&posterior_mean(&g, &g, &g, &c).unwrap(), &g, 1e-12);
        }
        let a = sample_random_pose(&mut rng, 1.0, 3.0).unwrap();
        let b = sample_random_pose(&mut rng, 1.0, 3.0).unwrap();
        assert_pose_eq(
            &posterior_mean(&g, &a, &b, &s.coeffs_at(1).unwrap()).unwrap(),
            &g,
            1e-14,
        );
    }

    #[test]
    fn first_step_with_exact_residuals_recovers_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = NoiseSchedule::cosine(200).unwrap();
        let gt = random_set(&mut rng, 5, 1.0, 3.0);
        let tt = random_set(&mut rng, 5, 1.0, 3.0);
        let prior = random_set(&mut rng, 5, 1.0, 3.0);
        let residuals = PoseSet::new(
            gt.iter()
                .zip(tt.iter())
                .map(|(g, c)| g.compose(&c.inverse()))
                .collect(),
        )
        .unwrap();
        let out = reverse_step(
            &residuals,
            &tt,
            &prior,
            &s.coeffs_at(1).unwrap(),
            true,
            &mut rng,
        )
        .unwrap();
        for i in 0..5 {
            assert_pose_eq(&out[i], &gt[i], 1e-9);
        }
    }

    #[test]
    fn reverse_step_reports_scan_index_on_domain_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = NoiseSchedule::cosine(200).unwrap();
        let half_turn = RigidTransform::new(
            Rotation::from_matrix(Matrix3::from_diagonal(&nalgebra::Vector3::new(
                1.0, -1.0, -1.0,
            )))
            .unwrap(),
            nalgebra::Vector3::zeros(),
        );
        let tt = PoseSet::new(vec![RigidTransform::identity(), half_turn]).unwrap();
        let id = PoseSet::identity(2).unwrap();
        let err =
            reverse_step(&id, &tt, &id, &s.coeffs_at(50).unwrap(), false, &mut rng).unwrap_err();
        assert!(matches!(err, Error::Domain { index: Some(1), .. }), "{err}");
    }

    #[test]
    fn permuting_scans_permutes_reverse_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = NoiseSchedule::cosine(200).unwrap();
        let c = s.coeffs_at(40).unwrap();
        let res = random_set(&mut rng, 6, 0.2, 0.3);
        let tt = random_set(&mut rng, 6, 1.0, 2.0);
        let prior = random_set(&mut rng, 6, 1.0, 2.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let a = reverse_step(&res, &tt, &prior, &c, false, &mut rng)
            .unwrap()
            .permuted(&perm);
        let b = reverse_step(
            &res.permuted(&perm),
            &tt.permuted(&perm),
            &prior.permuted(&perm),
            &c,
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_single_step_chain() {
        use crate::geometry::{generate_scene, SceneConfig};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = SceneConfig {
            world_points: 800,
            ..SceneConfig::default().with_scans(3)
        };
        let scene = generate_scene(&cfg, &mut rng).unwrap();
        let prior = PoseSet::new(
            scene
                .gt
                .iter()
                .map(|g| g.compose(&sample_random_pose(&mut rng, 0.3, 0.5).unwrap()))
                .collect(),
        )
        .unwrap();
        let s = NoiseSchedule::cosine(200).unwrap();
        let dcfg = DiffusionConfig {
            inference_steps: 1,
            ..DiffusionConfig::default()
        };
        let oracle = OracleSurrogate::exact(scene.gt.clone());
        let traj = run_denoising(&scene, &prior, &oracle, &s, &dcfg, &mut rng).unwrap();
        assert_eq!(traj.len(), 2);
        let residuals = PoseSet::new(
            scene
                .gt
                .iter()
                .zip(prior.iter())
                .map(|(g, p)| g.compose(&p.inverse()))
                .collect(),
        )
        .unwrap();
        let direct = reverse_step(
            &residuals,
            &prior,
            &prior,
            &s.coeffs_at(1).unwrap(),
            false,
            &mut rng,
        )
        .unwrap();
        assert_eq!(traj[1], direct);
    }

    #[test]
    fn config_validation() {
        assert!(DiffusionConfig::default().validate().is_ok());
        assert!(DiffusionConfig {
            gamma: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DiffusionConfig {
            inference_steps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DiffusionConfig {
            inference_steps: 201,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
