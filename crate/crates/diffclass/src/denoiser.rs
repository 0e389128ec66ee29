//! The conditional denoising contract and its two implementations: a small
//! trainable network (see [`crate::nn`]) and a closed-form Gaussian oracle
//! whose posterior mean is the MSE-optimal denoiser for Gaussian class data.

use ndarray::{s, Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::alpha_sigma;

/// A conditioning input: a class index or the classifier-free null token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Null,
}

/// What a denoiser promises its callers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserContract {
    pub num_classes: usize,
    pub supports_null_condition: bool,
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
}

impl DenoiserContract {
    pub fn validate_condition(&self, condition: Condition) -> Result<()> {
        match condition {
            Condition::Class(c) if c >= self.num_classes => Err(Error::InvalidCondition {
                index: c,
                num_classes: self.num_classes,
            }),
            Condition::Null if !self.supports_null_condition => Err(Error::NullConditionUnsupported),
            _ => Ok(()),
        }
    }
}

/// Conditional denoiser x_hat(z_lambda, c). Outputs are always in x-space;
/// implementations that predict v convert internally. Evaluation is
/// deterministic given (z, lambda, c) and fixed parameters.
pub trait Denoiser {
    fn contract(&self) -> DenoiserContract;

    /// Denoise a batch under a single shared condition. `lambdas` gives the
    /// log-SNR per sample (length = batch).
    fn denoise_batch(&self, z: &Array4<f64>, lambdas: &[f64], condition: Condition)
        -> Result<Array4<f64>>;

    /// Denoise a batch at one shared noise level.
    fn denoise_level(&self, z: &Array4<f64>, lambda: f64, condition: Condition) -> Result<Array4<f64>> {
        let lambdas = vec![lambda; z.dim().0];
        self.denoise_batch(z, &lambdas, condition)
    }
}

/// Per-class diagonal Gaussian data model. Enables the closed-form optimal
/// denoiser and exact Bayes posteriors used to verify the classifier.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GaussianClassModel {
    /// (num_classes, dim) per-class means.
    pub means: Array2<f64>,
    /// (num_classes, dim) per-class diagonal variances, strictly positive.
    pub variances: Array2<f64>,
    /// Per-class prior probabilities, summing to 1.
    pub priors: Array1<f64>,
    /// Image shape the flattened dimension corresponds to.
    pub shape: (usize, usize, usize),
}

impl GaussianClassModel {
    pub fn new(
        means: Array2<f64>,
        variances: Array2<f64>,
        priors: Array1<f64>,
        shape: (usize, usize, usize),
    ) -> Result<Self> {
        let dim = shape.0 * shape.1 * shape.2;
        if means.dim().1 != dim || means.dim() != variances.dim() || means.dim().0 != priors.len() {
            return Err(Error::Data("inconsistent Gaussian model dimensions".into()));
        }
        if variances.iter().any(|&v| v <= 0.0) {
            return Err(Error::Data("variances must be strictly positive".into()));
        }
        if (priors.sum() - 1.0).abs() > 1e-9 || priors.iter().any(|&p| p < 0.0) {
            return Err(Error::Data("priors must be non-negative and sum to 1".into()));
        }
        Ok(Self { means, variances, priors, shape })
    }

    /// Two classes with means -m and +m in every coordinate, shared isotropic
    /// variance and uniform priors.
    pub fn symmetric_pair(shape: (usize, usize, usize), mean_magnitude: f64, variance: f64) -> Self {
        let dim = shape.0 * shape.1 * shape.2;
        let mut means = Array2::zeros((2, dim));
        means.row_mut(0).fill(-mean_magnitude);
        means.row_mut(1).fill(mean_magnitude);
        Self {
            means,
            variances: Array2::from_elem((2, dim), variance),
            priors: Array1::from_elem(2, 0.5),
            shape,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.means.dim().1
    }

    /// E[x | z, c] for z = alpha x + sigma eps with x ~ N(mu_c, s2_c):
    /// mu + alpha s2 / (alpha^2 s2 + sigma^2) * (z - alpha mu), elementwise.
    pub fn oracle_denoise_class(&self, z_flat: &Array2<f64>, lambda: f64, class: usize) -> Array2<f64> {
        let (alpha, sigma) = alpha_sigma(lambda);
        let mut out = Array2::zeros(z_flat.dim());
        for (mut row, z_row) in out.outer_iter_mut().zip(z_flat.outer_iter()) {
            for j in 0..self.dim() {
                let mu = self.means[[class, j]];
                let s2 = self.variances[[class, j]];
                let gain = alpha * s2 / (alpha * alpha * s2 + sigma * sigma);
                row[j] = mu + gain * (z_row[j] - alpha * mu);
            }
        }
        out
    }

    /// Log density of z under class c: z | c ~ N(alpha mu_c, alpha^2 s2_c + sigma^2).
    fn log_density_z(&self, z_row: &[f64], lambda: f64, class: usize) -> f64 {
        let (alpha, sigma) = alpha_sigma(lambda);
        let mut acc = 0.0;
        for j in 0..self.dim() {
            let var = alpha * alpha * self.variances[[class, j]] + sigma * sigma;
            let d = z_row[j] - alpha * self.means[[class, j]];
            acc += -0.5 * (d * d / var + var.ln());
        }
        acc
    }

    /// Exact Bayes posterior p(c | x) from the Gaussian densities and priors,
    /// computed with max-subtraction for stability.
    pub fn oracle_bayes_posterior(&self, x_flat: &[f64]) -> Result<Array1<f64>> {
        if x_flat.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.dim()],
                got: vec![x_flat.len()],
            });
        }
        let mut logs = Array1::zeros(self.num_classes());
        for c in 0..self.num_classes() {
            let mut acc = self.priors[c].max(f64::MIN_POSITIVE).ln();
            for j in 0..self.dim() {
                let var = self.variances[[c, j]];
                let d = x_flat[j] - self.means[[c, j]];
                acc += -0.5 * (d * d / var + var.ln());
            }
            logs[c] = acc;
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = logs.mapv(|l| (l - max).exp());
        let sum = probs.sum();
        probs /= sum;
        Ok(probs)
    }

    /// Analytic accuracy of the Bayes classifier for the symmetric two-class
    /// isotropic case: Phi(||mu_1 - mu_0|| / (2 s)).
    pub fn symmetric_bayes_accuracy(&self) -> Option<f64> {
        if self.num_classes() != 2 {
            return None;
        }
        let s2 = self.variances[[0, 0]];
        if self.variances.iter().any(|&v| (v - s2).abs() > 1e-12) {
            return None;
        }
        let d2: f64 = (0..self.dim())
            .map(|j| (self.means[[1, j]] - self.means[[0, j]]).powi(2))
            .sum();
        Some(standard_normal_cdf(d2.sqrt() / (2.0 * s2.sqrt())))
    }
}

/// Phi(x) via erf, accurate to ~1e-15.
pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

// Abramowitz & Stegun 7.1.26-style rational approximation refined with a
// series; here we use the classic W. J. Cody rational erf, good to 1e-15.
fn erf(x: f64) -> f64 {
    // For the magnitudes used here (|x| < 6) a high-order series/continued
    // fraction split is sufficient.
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 2.5 {
        // Taylor series of erf around 0, converges fast for x < 2.5.
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        for n in 1..200 {
            term *= -x2 / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-18 * sum.abs() {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // Complementary error function via continued fraction.
        let mut f = 0.0;
        for k in (1..60).rev() {
            f = k as f64 / 2.0 / (x + f);
        }
        let erfc = (-x * x).exp() / ((x + f) * std::f64::consts::PI.sqrt());
        1.0 - erfc
    }
}

impl Denoiser for GaussianClassModel {
    fn contract(&self) -> DenoiserContract {
        DenoiserContract {
            num_classes: self.num_classes(),
            supports_null_condition: true,
            input_shape: self.shape,
        }
    }

    fn denoise_batch(&self, z: &Array4<f64>, lambdas: &[f64], condition: Condition) -> Result<Array4<f64>> {
        self.contract().validate_condition(condition)?;
        let (b, c, h, w) = z.dim();
        if (c, h, w) != self.shape || lambdas.len() != b {
            return Err(Error::ShapeMismatch {
                expected: vec![lambdas.len(), self.shape.0, self.shape.1, self.shape.2],
                got: vec![b, c, h, w],
            });
        }
        let z_flat = z.to_shape((b, self.dim())).unwrap().to_owned();
        let mut out_flat = Array2::zeros((b, self.dim()));
        for i in 0..b {
            let lambda = lambdas[i];
            let z_row = z_flat.slice(s![i..i + 1, ..]).to_owned();
            let row = match condition {
                Condition::Class(cl) => self.oracle_denoise_class(&z_row, lambda, cl),
                Condition::Null => {
                    // Mixture posterior mean: sum_c p(c|z) E[x|z,c].
                    let zs = z_row.row(0).to_vec();
                    let mut logs = vec![0.0; self.num_classes()];
                    for cl in 0..self.num_classes() {
                        logs[cl] = self.priors[cl].max(f64::MIN_POSITIVE).ln()
                            + self.log_density_z(&zs, lambda, cl);
                    }
                    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let weights: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
                    let wsum: f64 = weights.iter().sum();
                    let mut acc = Array2::zeros((1, self.dim()));
                    for cl in 0..self.num_classes() {
                        let part = self.oracle_denoise_class(&z_row, lambda, cl);
                        acc = acc + part * (weights[cl] / wsum);
                    }
                    acc
                }
            };
            out_flat.row_mut(i).assign(&row.row(0));
        }
        Ok(out_flat.into_shape((b, c, h, w)).unwrap())
    }
}

/// Test stub: ignores z and returns a fixed target batch plus an offset.
/// The spec's "perfect denoiser" is `offset = 0`.
#[derive(Debug, Clone)]
pub struct StubDenoiser {
    pub target: Array4<f64>,
    pub offset: f64,
    pub num_classes: usize,
}

impl Denoiser for StubDenoiser {
    fn contract(&self) -> DenoiserContract {
        let d = self.target.dim();
        DenoiserContract {
            num_classes: self.num_classes,
            supports_null_condition: true,
            input_shape: (d.1, d.2, d.3),
        }
    }

    fn denoise_batch(&self, z: &Array4<f64>, lambdas: &[f64], condition: Condition) -> Result<Array4<f64>> {
        self.contract().validate_condition(condition)?;
        if z.dim() != self.target.dim() || lambdas.len() != z.dim().0 {
            return Err(Error::ShapeMismatch {
                expected: vec![self.target.dim().0],
                got: vec![z.dim().0],
            });
        }
        Ok(&self.target + self.offset)
    }
}
