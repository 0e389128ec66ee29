//! Continuous-time variance-preserving diffusion math: the shifted-cosine
//! log-SNR schedule, forward marginals, prediction-space conversions and the
//! min-SNR training weight.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Guard band for sampling times: tan(pi t / 2) is singular at 0 and 1.
pub const T_GUARD: f64 = 1e-5;

/// Schedule family. Shifted-cosine is the only member for now.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ScheduleKind {
    #[default]
    ShiftedCosine,
}

/// Monotone map between time t in [0,1] and the log-SNR lambda.
///
/// The shift constant is 2*ln(base_resolution / image_resolution), so that
/// images trained at a resolution other than the reference get a consistent
/// noise schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub base_resolution: u32,
    pub image_resolution: u32,
}

impl NoiseSchedule {
    pub fn shifted_cosine(base_resolution: u32, image_resolution: u32) -> Self {
        assert!(base_resolution > 0 && image_resolution > 0);
        Self {
            kind: ScheduleKind::ShiftedCosine,
            base_resolution,
            image_resolution,
        }
    }

    /// The additive log-SNR shift, 2*ln(base/resolution).
    pub fn shift(&self) -> f64 {
        2.0 * (self.base_resolution as f64 / self.image_resolution as f64).ln()
    }

    /// lambda = -2 ln tan(pi t / 2) + shift, for t in the open interval (0,1).
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::TimeOutOfRange(t));
        }
        Ok(-2.0 * (PI * t / 2.0).tan().ln() + self.shift())
    }

    /// Closed-form inverse: t = (2/pi) atan(exp((shift - lambda)/2)).
    pub fn log_snr_inverse(&self, lambda: f64) -> f64 {
        (2.0 / PI) * ((self.shift() - lambda) / 2.0).exp().atan()
    }

    /// Density of the log-SNR induced by t ~ U(0,1): p(lambda) = -1/f'(t).
    ///
    /// f'(t) = -2 pi / sin(pi t), so p = sin(pi t) / (2 pi).
    pub fn noise_density(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::TimeOutOfRange(t));
        }
        Ok((PI * t).sin() / (2.0 * PI))
    }

    /// Clamp t into the guard band before evaluating the schedule.
    pub fn clamp_time(&self, t: f64) -> f64 {
        t.clamp(T_GUARD, 1.0 - T_GUARD)
    }
}

/// One sampled noise level: time, log-SNR and the (alpha, sigma) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSnrSample {
    pub t: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub sigma: f64,
}

impl LogSnrSample {
    pub fn at_time(schedule: &NoiseSchedule, t: f64) -> Result<Self> {
        let lambda = schedule.log_snr(t)?;
        let (alpha, sigma) = alpha_sigma(lambda);
        Ok(Self { t, lambda, alpha, sigma })
    }
}

/// Numerically stable log-sigmoid: -softplus(-x).
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Variance-preserving coefficients: alpha^2 = sigmoid(lambda),
/// sigma^2 = sigmoid(-lambda). Stable for |lambda| well beyond 30.
pub fn alpha_sigma(lambda: f64) -> (f64, f64) {
    let alpha = (0.5 * log_sigmoid(lambda)).exp();
    let sigma = (0.5 * log_sigmoid(-lambda)).exp();
    (alpha, sigma)
}

/// Forward marginal: z = alpha * x + sigma * eps.
pub fn forward_diffuse(x: &ArrayD<f64>, lambda: f64, eps: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    if x.shape() != eps.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    let (alpha, sigma) = alpha_sigma(lambda);
    Ok(x * alpha + eps * sigma)
}

/// The quantity a denoising network regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredictionSpace {
    X,
    Epsilon,
    V,
}

/// Exact algebraic conversion between prediction spaces given (z, lambda).
///
/// Identities: v = alpha*eps - sigma*x, x = alpha*z - sigma*v,
/// eps = sigma*z + alpha*v.
pub fn convert_prediction(
    z: &ArrayD<f64>,
    value: &ArrayD<f64>,
    from: PredictionSpace,
    to: PredictionSpace,
    lambda: f64,
) -> Result<ArrayD<f64>> {
    if z.shape() != value.shape() {
        return Err(Error::ShapeMismatch {
            expected: z.shape().to_vec(),
            got: value.shape().to_vec(),
        });
    }
    if from == to {
        return Ok(value.clone());
    }
    let (alpha, sigma) = alpha_sigma(lambda);
    // Route through x-space.
    let x = match from {
        PredictionSpace::X => value.clone(),
        PredictionSpace::Epsilon => (z - &(value * sigma)) / alpha,
        PredictionSpace::V => z * alpha - value * sigma,
    };
    Ok(match to {
        PredictionSpace::X => x,
        PredictionSpace::Epsilon => (z - &(&x * alpha)) / sigma,
        PredictionSpace::V => {
            let eps = (z - &(&x * alpha)) / sigma;
            eps * alpha - &x * sigma
        }
    })
}

/// min-SNR loss weight: min(SNR, gamma) / SNR = min(1, gamma * e^(-lambda)).
pub fn min_snr_weight(lambda: f64, gamma: f64) -> f64 {
    debug_assert!(gamma > 0.0);
    (gamma * (-lambda).exp()).min(1.0)
}

/// Weighted x-space squared error: min_snr_weight(lambda, gamma) * MSE(x, x_hat).
pub fn training_loss(x: &ArrayD<f64>, x_hat: &ArrayD<f64>, lambda: f64, gamma: f64) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape().to_vec(),
            got: x_hat.shape().to_vec(),
        });
    }
    let n = x.len() as f64;
    let mse = x
        .iter()
        .zip(x_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(min_snr_weight(lambda, gamma) * mse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::shifted_cosine(64, 256)
    }

    #[test]
    fn log_snr_known_points() {
        // tan(pi/4) = 1, so the shift alone remains.
        let l = sched().log_snr(0.5).unwrap();
        assert!((l - 2.0 * 0.25f64.ln()).abs() < 1e-12);
        assert!((l - (-2.772588722239781)).abs() < 1e-12);

        let unshifted = NoiseSchedule::shifted_cosine(256, 256);
        assert!(unshifted.log_snr(0.5).unwrap().abs() < 1e-12);

        // Frozen from 40-digit evaluation of -2 ln tan(pi/8) + 2 ln(1/4).
        let l = sched().log_snr(0.25).unwrap();
        assert!((l - (-1.0098415482006952)).abs() < 1e-10);
    }

    #[test]
    fn log_snr_domain_errors() {
        for t in [0.0, 1.0, -0.1, 1.5] {
            assert!(sched().log_snr(t).is_err());
            assert!(sched().noise_density(t).is_err());
        }
    }

    #[test]
    fn log_snr_monotone_decreasing() {
        let s = sched();
        let mut prev = f64::INFINITY;
        for i in 1..1000 {
            let t = i as f64 / 1000.0;
            let l = s.log_snr(t).unwrap();
            assert!(l < prev, "not strictly decreasing at t={t}");
            prev = l;
        }
    }

    #[test]
    fn log_snr_inverse_round_trip() {
        let s = sched();
        assert!((s.log_snr_inverse(-2.772588722239781) - 0.5).abs() < 1e-12);
        let unshifted = NoiseSchedule::shifted_cosine(256, 256);
        assert!((unshifted.log_snr_inverse(0.0) - 0.5).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let lambda = rng.gen_range(-15.0..15.0);
            let t = s.log_snr_inverse(lambda);
            assert!((s.log_snr(t).unwrap() - lambda).abs() < 1e-9);
        }
        // Identity the other way around, over the stated t range.
        for _ in 0..1000 {
            let t = rng.gen_range(1e-6..1.0 - 1e-6);
            let l = s.log_snr(t).unwrap();
            assert!((s.log_snr_inverse(l) - t).abs() < 1e-9);
        }
    }

    #[test]
    fn alpha_sigma_known_values() {
        let (a, s) = alpha_sigma(0.0);
        assert!((a - 0.7071067811865476).abs() < 1e-12);
        assert!((s - 0.7071067811865476).abs() < 1e-12);

        // sigmoid(ln 16) = 16/17 exactly.
        let (a, s) = alpha_sigma(16f64.ln());
        assert!((a * a - 16.0 / 17.0).abs() < 1e-12);
        assert!((s * s - 1.0 / 17.0).abs() < 1e-12);
    }

    #[test]
    fn variance_preserving_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let lambda = rng.gen_range(-30.0..30.0);
            let (a, s) = alpha_sigma(lambda);
            assert!(a > 0.0 && s > 0.0);
            assert!((a * a + s * s - 1.0).abs() < 1e-12, "lambda={lambda}");
        }
    }

    #[test]
    fn noise_density_matches_finite_difference() {
        let s = sched();
        let h = 1e-6;
        for i in 1..=100 {
            let t = i as f64 / 101.0;
            let deriv = (s.log_snr(t + h).unwrap() - s.log_snr(t - h).unwrap()) / (2.0 * h);
            let analytic = -1.0 / deriv;
            let p = s.noise_density(t).unwrap();
            assert!(p > 0.0);
            assert!((p - analytic).abs() < 1e-5, "t={t}: {p} vs {analytic}");
        }
        assert!((s.noise_density(0.5).unwrap() - 0.15915494309189535).abs() < 1e-12);
    }

    #[test]
    fn noise_density_integrates_to_one() {
        // Change of variables: integral over t of p(lambda(t)) * |dlambda/dt| dt = 1.
        let s = sched();
        let n = 200_000usize;
        let mut acc = 0.0;
        for i in 0..n {
            let t = (i as f64 + 0.5) / n as f64;
            let p = s.noise_density(t).unwrap();
            let dldt = 2.0 * PI / (PI * t).sin();
            acc += p * dldt / n as f64;
        }
        assert!((acc - 1.0).abs() < 1e-6, "integral {acc}");
    }

    fn scalar(v: f64) -> ArrayD<f64> {
        ArrayD::from_elem(IxDyn(&[1]), v)
    }

    #[test]
    fn forward_diffuse_limits() {
        let x = scalar(0.37);
        let eps = scalar(1.21);
        let z = forward_diffuse(&x, 30.0, &eps).unwrap();
        assert!((z[0] - 0.37).abs() < 1e-6);

        let zero = scalar(0.0);
        let z = forward_diffuse(&zero, -1.3, &eps).unwrap();
        let (_, sigma) = alpha_sigma(-1.3);
        assert!((z[0] - sigma * 1.21).abs() < 1e-12);

        let z = forward_diffuse(&scalar(1.0), 0.0, &scalar(1.0)).unwrap();
        assert!((z[0] - 1.4142135623730951).abs() < 1e-12);

        let bad = ArrayD::zeros(IxDyn(&[2]));
        assert!(forward_diffuse(&x, 0.0, &bad).is_err());
    }

    #[test]
    fn convert_prediction_hand_case() {
        // x = 1, eps = 0, lambda = 0: z = alpha, v = -sigma.
        let (alpha, sigma) = alpha_sigma(0.0);
        let z = scalar(alpha);
        let x = scalar(1.0);
        let v = convert_prediction(&z, &x, PredictionSpace::X, PredictionSpace::V, 0.0).unwrap();
        assert!((v[0] - (-0.7071067811865476)).abs() < 1e-12);
        let back = convert_prediction(&z, &v, PredictionSpace::V, PredictionSpace::X, 0.0).unwrap();
        assert!((back[0] - (alpha * z[0] - sigma * v[0])).abs() < 1e-15);
        assert!((back[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn convert_prediction_high_snr_v_approaches_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = scalar(rng.gen_range(-1.0..1.0));
        let eps = scalar(rng.gen_range(-1.0..1.0));
        let lambda = 30.0;
        let z = forward_diffuse(&x, lambda, &eps).unwrap();
        let v = convert_prediction(&z, &x, PredictionSpace::X, PredictionSpace::V, lambda).unwrap();
        assert!((v[0] - eps[0]).abs() < 1e-6);
    }

    #[test]
    fn convert_prediction_round_trips() {
        let spaces = [PredictionSpace::X, PredictionSpace::Epsilon, PredictionSpace::V];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let x = scalar(rng.gen_range(-2.0..2.0));
            let eps = scalar(rng.gen_range(-2.0..2.0));
            let lambda = rng.gen_range(-10.0..10.0);
            let z = forward_diffuse(&x, lambda, &eps).unwrap();
            for &a in &spaces {
                for &b in &spaces {
                    let va = convert_prediction(&z, &x, PredictionSpace::X, a, lambda).unwrap();
                    let vb = convert_prediction(&z, &va, a, b, lambda).unwrap();
                    let back = convert_prediction(&z, &vb, b, a, lambda).unwrap();
                    assert!((back[0] - va[0]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn min_snr_weight_values() {
        assert!((min_snr_weight(0.0, 5.0) - 1.0).abs() < 1e-15);
        assert!((min_snr_weight(10f64.ln(), 5.0) - 0.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let w = min_snr_weight(rng.gen_range(-20.0..20.0), 5.0);
            assert!(w > 0.0 && w <= 1.0);
        }
    }

    #[test]
    fn training_loss_values() {
        let x = ArrayD::from_elem(IxDyn(&[4]), 1.0);
        assert_eq!(training_loss(&x, &x, 0.3, 5.0).unwrap(), 0.0);
        let x_hat = ArrayD::from_elem(IxDyn(&[4]), 3.0);
        let l = training_loss(&x, &x_hat, 0.0, 5.0).unwrap();
        assert!((l - 4.0).abs() < 1e-12);
    }

    #[test]
    fn variance_preservation_empirical() {
        // Var(z) = alpha^2 Var(x) + sigma^2 for unit-variance x, over 1e5 draws.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let lambda = 0.7;
        let (a, s) = alpha_sigma(lambda);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x: f64 = rng.sample(rand_distr::StandardNormal);
            let e: f64 = rng.sample(rand_distr::StandardNormal);
            let z = a * x + s * e;
            sum += z;
            sumsq += z * z;
        }
        let var = sumsq / n as f64 - (sum / n as f64).powi(2);
        let expect = a * a + s * s; // = 1
        assert!((var - expect).abs() / expect < 0.01);
    }
}
