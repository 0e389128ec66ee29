//! Classifier-free guidance, the deterministic reverse sampler and
//! counterfactual generation with difference maps.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, Denoiser};
use crate::error::{Error, Result};
use crate::schedule::{alpha_sigma, NoiseSchedule, T_GUARD};

/// Guidance and sampler settings for counterfactual generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Guidance weight w.
    pub scale: f64,
    /// Time t* at which the input is noised before re-generation.
    pub noise_level: f64,
    /// Number of deterministic reverse steps.
    pub sampler_steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        // t* = 0.5 and w = 7.5 as CLI defaults.
        Self { scale: 7.5, noise_level: 0.5, sampler_steps: 50 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sampler_steps < 1 {
            return Err(Error::Config("sampler_steps must be >= 1".into()));
        }
        if !(self.noise_level > 0.0 && self.noise_level < 1.0) {
            return Err(Error::Config(format!("noise_level {} outside (0,1)", self.noise_level)));
        }
        Ok(())
    }
}

/// Guided prediction: x_tilde = (1+w) x_hat(z, c) - w x_hat(z, null).
pub fn cfg_denoise<D: Denoiser + ?Sized>(
    z: &Array4<f64>,
    lambda: f64,
    condition: Condition,
    w: f64,
    denoiser: &D,
) -> Result<Array4<f64>> {
    if !denoiser.contract().supports_null_condition {
        return Err(Error::NullConditionUnsupported);
    }
    if w == 0.0 {
        return denoiser.denoise_level(z, lambda, condition);
    }
    let cond = denoiser.denoise_level(z, lambda, condition)?;
    let uncond = denoiser.denoise_level(z, lambda, Condition::Null)?;
    Ok(&cond * (1.0 + w) - &uncond * w)
}

/// Deterministic reverse trajectory from t_start down to the schedule guard:
/// at each of K uniform steps compute the guided x_tilde, carry the implied
/// noise forward, and re-project at the next lower-noise level. Returns the
/// final x_tilde.
pub fn reverse_sample<D: Denoiser + ?Sized>(
    z_start: &Array4<f64>,
    t_start: f64,
    condition: Condition,
    config: &GuidanceConfig,
    denoiser: &D,
    schedule: &NoiseSchedule,
) -> Result<Array4<f64>> {
    config.validate()?;
    if !(t_start > 0.0 && t_start < 1.0) {
        return Err(Error::TimeOutOfRange(t_start));
    }
    let k = config.sampler_steps;
    let t_end = T_GUARD;
    let mut z = z_start.clone();
    let mut x_tilde = z_start.clone();
    for i in 0..k {
        let t_i = if k == 1 {
            t_start
        } else {
            t_start + (t_end - t_start) * i as f64 / (k - 1) as f64
        };
        let lambda_i = schedule.log_snr(schedule.clamp_time(t_i))?;
        x_tilde = cfg_denoise(&z, lambda_i, condition, config.scale, denoiser)?;
        if x_tilde.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: i, context: "reverse sampler prediction".into() });
        }
        if i + 1 < k {
            let t_next = t_start + (t_end - t_start) * (i + 1) as f64 / (k - 1) as f64;
            let lambda_next = schedule.log_snr(schedule.clamp_time(t_next))?;
            let (alpha_i, sigma_i) = alpha_sigma(lambda_i);
            let (alpha_n, sigma_n) = alpha_sigma(lambda_next);
            let eps_tilde = (&z - &(&x_tilde * alpha_i)) / sigma_i;
            z = &x_tilde * alpha_n + &eps_tilde * sigma_n;
        }
    }
    Ok(x_tilde)
}

/// Factual reconstruction, counterfactual reconstruction and their signed
/// difference map.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualResult {
    pub factual: Array4<f64>,
    pub counterfactual: Array4<f64>,
    /// counterfactual - factual, exactly.
    pub difference: Array4<f64>,
    pub source_class: usize,
    pub target_class: usize,
}

/// Noise the input to t*, then regenerate under the source and target
/// classes from the same z. The shared starting noise makes target = source
/// produce a bit-for-bit zero difference map.
pub fn counterfactual<D: Denoiser + ?Sized>(
    x: &Array4<f64>,
    source_class: usize,
    target_class: usize,
    config: &GuidanceConfig,
    denoiser: &D,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<CounterfactualResult> {
    config.validate()?;
    let contract = denoiser.contract();
    contract.validate_condition(Condition::Class(source_class))?;
    contract.validate_condition(Condition::Class(target_class))?;
    let t_star = schedule.clamp_time(config.noise_level);
    let lambda = schedule.log_snr(t_star)?;
    let (alpha, sigma) = alpha_sigma(lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Array4::from_shape_fn(x.dim(), |_| rng.sample::<f64, _>(StandardNormal));
    let z = x * alpha + &eps * sigma;
    let factual = reverse_sample(&z, t_star, Condition::Class(source_class), config, denoiser, schedule)?;
    let counterfactual = if target_class == source_class {
        factual.clone()
    } else {
        reverse_sample(&z, t_star, Condition::Class(target_class), config, denoiser, schedule)?
    };
    let difference = &counterfactual - &factual;
    Ok(CounterfactualResult { factual, counterfactual, difference, source_class, target_class })
}
