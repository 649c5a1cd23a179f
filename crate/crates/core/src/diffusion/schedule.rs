//! Cosine noise schedule and the per-step posterior coefficients.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Offset `s` of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clip applied to every `β_t`.
pub const MAX_BETA: f64 = 0.999;

/// Per-timestep variances of the diffusion chain, indexed `t ∈ 1..=T`.
///
/// `beta`, `alpha` and `beta_tilde` are stored at `[t - 1]`; `alpha_bar` has
/// `T + 1` entries with `alpha_bar[0] = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    beta_tilde: Vec<f64>,
}

/// Weights of the reverse-step combination at one timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenoiseCoeffs {
    /// Weight of the (estimated) clean pose.
    pub lambda0: f64,
    /// Weight of the current noisy pose.
    pub lambda1: f64,
    /// Weight of the prior pose.
    pub lambda2: f64,
    /// `√β̃_t`.
    pub sigma: f64,
}

impl NoiseSchedule {
    /// Cosine schedule: `ᾱ_t = f(t)/f(0)`, `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        let f = |t: usize| {
            let x = ((t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET))
                * std::f64::consts::FRAC_PI_2;
            let c = x.cos();
            c * c
        };
        let f0 = f(0);
        let ratio_bar = |t: usize| f(t) / f0;

        // α_t is taken first so that 1 − α_t reproduces β_t exactly where it matters (t = 1).
        let alpha: Vec<f64> = (1..=steps)
            .map(|t| (ratio_bar(t) / ratio_bar(t - 1)).max(1.0 - MAX_BETA))
            .collect();
        Self::from_alphas(alpha)
    }

    /// Builds a schedule from explicit `β_1..β_T`, each in `(0, 1)`.
    pub fn from_betas(beta: &[f64]) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        if let Some((t, b)) = beta
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
        {
            return Err(Error::InvalidArgument(format!(
                "beta[{}] = {b} outside (0, 1)",
                t + 1
            )));
        }
        Self::from_alphas(beta.iter().map(|b| 1.0 - b).collect())
    }

    fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        let steps = alpha.len();
        let beta: Vec<f64> = alpha.iter().map(|a| 1.0 - a).collect();
        if let Some((t, b)) = beta
            .iter()
            .enumerate()
            .find(|(_, b)| !(**b > 0.0 && **b < 1.0))
        {
            return Err(Error::InvalidArgument(format!(
                "beta[{}] = {b} outside (0, 1)",
                t + 1
            )));
        }
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for a in &alpha {
            let prev = *alpha_bar.last().unwrap_or(&1.0);
            alpha_bar.push(prev * a);
        }
        let beta_tilde = (1..=steps)
            .map(|t| beta[t - 1] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]))
            .collect();
        Ok(NoiseSchedule {
            steps,
            beta,
            alpha,
            alpha_bar,
            beta_tilde,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// `ᾱ_0..=ᾱ_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps {
            return Err(Error::Index {
                index: t,
                lo: 1,
                hi: self.steps,
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha[t - 1])
    }

    pub fn beta_tilde(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.beta_tilde[t - 1])
    }

    /// `ᾱ_t` for `t ∈ 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t > self.steps {
            return Err(Error::Index {
                index: t,
                lo: 0,
                hi: self.steps,
            });
        }
        Ok(self.alpha_bar[t])
    }

    pub fn coeffs_at(&self, t: usize) -> Result<DenoiseCoeffs> {
        self.check(t)?;
        let beta = self.beta[t - 1];
        let alpha = self.alpha[t - 1];
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let one_minus_ab = 1.0 - ab;
        let sqrt_alpha = alpha.sqrt();
        let sqrt_ab_prev = ab_prev.sqrt();

        let lambda0 = sqrt_ab_prev * beta / one_minus_ab;
        let lambda1 = sqrt_alpha * (1.0 - ab_prev) / one_minus_ab;
        // 1 + (√ᾱ_t − 1)(√α_t + √ᾱ_{t−1})/(1 − ᾱ_t), with (√ᾱ_t − 1)/(1 − ᾱ_t) = −1/(1 + √ᾱ_t).
        let lambda2 = 1.0 - (sqrt_alpha + sqrt_ab_prev) / (1.0 + ab.sqrt());
        Ok(DenoiseCoeffs {
            lambda0,
            lambda1,
            lambda2,
            sigma: self.beta_tilde[t - 1].sqrt(),
        })
    }

    /// CSV with columns `t,beta,alpha_bar,beta_tilde,lambda0,lambda1,lambda2`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,beta_tilde,lambda0,lambda1,lambda2\n");
        for t in 1..=self.steps {
            let c = self.coeffs_at(t).expect("t in range");
            let _ = writeln!(
                out,
                "{t},{},{},{},{},{},{}",
                self.beta[t - 1],
                self.alpha_bar[t],
                self.beta_tilde[t - 1],
                c.lambda0,
                c.lambda1,
                c.lambda2
            );
        }
        out
    }
}

pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::cosine(steps)
}

/// `K` timesteps evenly spaced from `T` down to 1, always ending at 1.
pub fn inference_timesteps(train_steps: usize, inference_steps: usize) -> Result<Vec<usize>> {
    if inference_steps < 1 || inference_steps > train_steps {
        return Err(Error::InvalidArgument(format!(
            "inference steps {inference_steps} must lie in 1..={train_steps}"
        )));
    }
    if inference_steps == 1 {
        return Ok(vec![1]);
    }
    let span = (train_steps - 1) as f64;
    let k = (inference_steps - 1) as f64;
    Ok((0..inference_steps)
        .map(|i| (train_steps as f64 - (i as f64) * span / k).round() as usize)
        .collect())
}
