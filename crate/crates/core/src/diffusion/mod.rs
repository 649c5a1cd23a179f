//! Prior-aware diffusion over SE(3)^N.
//!
//! The forward process moves each scan's pose from its optimum `T_i^0`
//! toward the prior `T̂_i` along the geodesic, with `√ᾱ_t` as the
//! interpolation weight, and perturbs it by a left-multiplied tangent-space
//! Gaussian of scale `γ·√(1−ᾱ_t)`. The reverse process combines
//! logarithms of the surrogate's clean-pose estimate, the current pose and
//! the prior with the weights `λ0, λ1, λ2` of [`DenoiseCoeffs`].

mod pose_set;
mod process;
mod schedule;
mod vlb;

pub use pose_set::PoseSet;
pub use process::{
    forward_diffuse, forward_diffuse_at, posterior_mean, reverse_step, run_denoising,
    DiffusionConfig, NoiseScales,
};
pub use schedule::{
    cosine_schedule, inference_timesteps, DenoiseCoeffs, NoiseSchedule, COSINE_OFFSET, MAX_BETA,
};
pub use vlb::{vlb_terms, VlbTerms};
