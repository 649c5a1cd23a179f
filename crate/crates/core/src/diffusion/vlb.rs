//! Variational-bound diagnostics. All Gaussians live on the 6N-dimensional
//! tangent space with covariance `β̃_t·I`, so each denoising KL reduces to a
//! squared mean difference.

use std::f64::consts::PI;

use nalgebra::Vector6;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::process::{forward_diffuse_at, model_mean_log, NoiseScales};
use super::{NoiseSchedule, PoseSet};
use crate::error::{Error, Result};
use crate::geometry::{transform_scene, Scene};
use crate::lie::{pose_interpolate, RigidTransform, Twist};
use crate::surrogate::{Surrogate, SurrogateInput};

#[derive(Debug, Clone, PartialEq)]
pub struct VlbTerms {
    /// Negative Gaussian log-likelihood of `T^0` under the model at `t = 1`.
    pub residual_term: f64,
    /// KL between the forward marginal at `t = T` and the prior-centred terminal law.
    pub prior_matching_term: f64,
    /// KL terms for `t = 2..=T`, in that order.
    pub denoising_terms: Vec<f64>,
}

impl VlbTerms {
    pub fn total(&self) -> f64 {
        self.residual_term + self.prior_matching_term + self.denoising_terms.iter().sum::<f64>()
    }

    pub fn denoising_sum(&self) -> f64 {
        self.denoising_terms.iter().sum()
    }
}

fn residuals_at(
    scene: &Scene,
    tt: &PoseSet,
    surrogate: &dyn Surrogate,
    t: usize,
    rng: &mut dyn RngCore,
) -> Result<PoseSet> {
    let transformed = transform_scene(scene, tt)?;
    let input = SurrogateInput {
        transformed: &transformed,
        current: tt,
        step: Some(t),
    };
    surrogate
        .estimate(&input, rng)
        .map(|o| o.residuals)
        .map_err(|e| match e {
            e @ Error::Surrogate { .. } => e,
            other => Error::Surrogate {
                step: t,
                scan: 0,
                source: Box::new(other),
            },
        })
}

fn prior_matching(t0: &PoseSet, prior: &PoseSet, alpha_bar: f64, gamma: f64) -> Result<f64> {
    let var = gamma * gamma * (1.0 - alpha_bar);
    let mut sq = 0.0;
    for (i, (a, p)) in t0.iter().zip(prior.iter()).enumerate() {
        let mean = pose_interpolate(alpha_bar.sqrt(), a, p).map_err(|e| e.at_index(i))?;
        sq += mean
            .compose(&p.inverse())
            .log()
            .map_err(|e| e.at_index(i))?
            .to_vector()
            .norm_squared();
    }
    Ok(if sq == 0.0 { 0.0 } else { sq / (2.0 * var) })
}

/// Computes the bound's three groups of terms for one scene.
///
/// Forward samples and surrogate calls draw from two streams forked from
/// `rng`, so swapping the surrogate leaves the sampled `T^t` unchanged.
pub fn vlb_terms(
    scene: &Scene,
    t0: &PoseSet,
    prior: &PoseSet,
    surrogate: &dyn Surrogate,
    schedule: &NoiseSchedule,
    gamma: f64,
    rng: &mut dyn RngCore,
) -> Result<VlbTerms> {
    t0.ensure_same_len(prior, "vlb_terms")?;
    if t0.len() != scene.len() {
        return Err(Error::InvalidArgument(format!(
            "{} poses for {} scans",
            t0.len(),
            scene.len()
        )));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "vlb needs gamma > 0, got {gamma}"
        )));
    }
    let mut parent = rng;
    let mut fwd_rng = ChaCha8Rng::from_rng(&mut parent);
    let mut sur_rng = ChaCha8Rng::from_rng(&mut parent);
    let steps = schedule.steps();
    let log_t0: Vec<Vector6<f64>> = t0
        .iter()
        .enumerate()
        .map(|(i, p)| Ok(p.log().map_err(|e| e.at_index(i))?.to_vector()))
        .collect::<Result<_>>()?;

    let sample = |t: usize, rng: &mut ChaCha8Rng| -> Result<PoseSet> {
        forward_diffuse_at(
            t0,
            prior,
            schedule.alpha_bar(t)?,
            gamma,
            NoiseScales::default(),
            rng,
        )
    };

    let mut denoising_terms = Vec::with_capacity(steps.saturating_sub(1));
    for t in 2..=steps {
        let tt = sample(t, &mut fwd_rng)?;
        let res = residuals_at(scene, &tt, surrogate, t, &mut sur_rng)?;
        let c = schedule.coeffs_at(t)?;
        let bt = schedule.beta_tilde(t)?;
        let mut sq = 0.0;
        for (i, lt0) in log_t0.iter().enumerate() {
            let clean = res[i].compose(&tt[i]);
            let lc = clean.log().map_err(|e| e.at_index(i))?.to_vector();
            sq += ((lt0 - lc) * c.lambda0).norm_squared();
        }
        denoising_terms.push(if sq == 0.0 { 0.0 } else { sq / (2.0 * bt) });
    }

    let residual_term = if steps >= 1 {
        let t1 = sample(1, &mut fwd_rng)?;
        let res = residuals_at(scene, &t1, surrogate, 1, &mut sur_rng)?;
        let c = schedule.coeffs_at(1)?;
        let means = model_mean_log(&res, &t1, prior, &c)?;
        let var = schedule.beta(1)?;
        let mut sq = 0.0;
        for (i, m) in means.iter().enumerate() {
            let mu = RigidTransform::exp(&Twist::from_vector(m));
            sq += t0[i]
                .compose(&mu.inverse())
                .log()
                .map_err(|e| e.at_index(i))?
                .to_vector()
                .norm_squared();
        }
        let dim = 6.0 * t0.len() as f64;
        sq / (2.0 * var) + 0.5 * dim * (2.0 * PI * var).ln()
    } else {
        0.0
    };

    let prior_matching_term = prior_matching(t0, prior, schedule.alpha_bar(steps)?, gamma)?;
    Ok(VlbTerms {
        residual_term,
        prior_matching_term,
        denoising_terms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_scene, SceneConfig};
    use crate::lie::sample_random_pose;
    use crate::surrogate::OracleSurrogate;

    fn setup(seed: u64) -> (Scene, PoseSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = SceneConfig {
            world_points: 800,
            ..SceneConfig::default().with_scans(3)
        };
        let scene = generate_scene(&cfg, &mut rng).unwrap();
        let prior = PoseSet::new(
            scene
                .gt
                .iter()
                .map(|g| g.compose(&sample_random_pose(&mut rng, 0.35, 0.5).unwrap()))
                .collect(),
        )
        .unwrap();
        (scene, prior)
    }

    #[test]
    fn exact_surrogate_zero_kl() {
        let (scene, prior) = setup(1);
        let s = NoiseSchedule::cosine(50).unwrap();
        let oracle = OracleSurrogate::exact(scene.gt.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = vlb_terms(&scene, &scene.gt, &prior, &oracle, &s, 0.1, &mut rng).unwrap();
        assert_eq!(v.denoising_terms.len(), 49);
        assert!(
            v.denoising_terms.iter().all(|k| k.abs() < 1e-9),
            "{:?}",
            v.denoising_terms
        );
        assert!(v.prior_matching_term > 0.0);
    }

    #[test]
    fn prior_term_ignores_surrogate() {
        let (scene, prior) = setup(2);
        let s = NoiseSchedule::cosine(30).unwrap();
        let a = OracleSurrogate::exact(scene.gt.clone());
        let b = OracleSurrogate {
            gt: scene.gt.clone(),
            noise_scale: 0.2,
        };
        let va = vlb_terms(
            &scene,
            &scene.gt,
            &prior,
            &a,
            &s,
            0.1,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let vb = vlb_terms(
            &scene,
            &scene.gt,
            &prior,
            &b,
            &s,
            0.1,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        assert_eq!(
            va.prior_matching_term.to_bits(),
            vb.prior_matching_term.to_bits()
        );
        assert!(vb.denoising_sum() > va.denoising_sum());
    }

    #[test]
    fn rejects_zero_gamma() {
        let (scene, prior) = setup(3);
        let s = NoiseSchedule::cosine(10).unwrap();
        let a = OracleSurrogate::exact(scene.gt.clone());
        assert!(vlb_terms(
            &scene,
            &scene.gt,
            &prior,
            &a,
            &s,
            0.0,
            &mut ChaCha8Rng::seed_from_u64(0)
        )
        .is_err());
    }
}
