//! The diffusion classifier: shared noise-level sets, per-condition
//! reconstruction errors, and the averaging / majority-voting decision rules.

use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::{alpha_sigma, NoiseSchedule};

/// Space in which reconstruction errors are measured. X is the default;
/// Epsilon replicates implementations that score noise predictions instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ErrorSpace {
    #[default]
    X,
    Epsilon,
}

/// Decision rule for turning per-step errors into a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionRule {
    Average,
    Majority,
}

impl std::fmt::Display for DecisionRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecisionRule::Average => write!(f, "average"),
            DecisionRule::Majority => write!(f, "majority"),
        }
    }
}

/// One noise level of the shared set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePair {
    pub t: f64,
    pub lambda: f64,
}

/// The shared set S of N noise levels reused for every condition of one
/// classification pass. The lambda sequence is identical for all samples and
/// conditions; epsilon draws are deterministic in (seed, step) and
/// independent across samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevelSet {
    pub pairs: Vec<NoisePair>,
    pub seed: u64,
    pub shape: (usize, usize, usize),
}

impl NoiseLevelSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The epsilon draw for step `k`: (batch, c, h, w), standard normal,
    /// deterministic given (seed, k, batch).
    pub fn epsilon(&self, k: usize, batch: usize) -> Array4<f64> {
        let (c, h, w) = self.shape;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (k as u64).wrapping_mul(0x9e3779b97f4a7c15));
        Array4::from_shape_fn((batch, c, h, w), |_| rng.sample(StandardNormal))
    }

    /// First `n` steps as a new set sharing the same seed, so prefix
    /// subsampling reproduces an independent smaller run exactly.
    pub fn prefix(&self, n: usize) -> NoiseLevelSet {
        NoiseLevelSet {
            pairs: self.pairs[..n.min(self.pairs.len())].to_vec(),
            seed: self.seed,
            shape: self.shape,
        }
    }
}

/// Draw N (epsilon, lambda) pairs: t ~ U(0,1) clamped into the schedule guard
/// band, lambda through the schedule, epsilon deferred to [`NoiseLevelSet::epsilon`].
pub fn sample_noise_set(
    n: usize,
    schedule: &NoiseSchedule,
    shape: (usize, usize, usize),
    seed: u64,
) -> Result<NoiseLevelSet> {
    if n < 1 {
        return Err(Error::EmptyNoiseSet(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let t = schedule.clamp_time(rng.gen::<f64>());
        let lambda = schedule.log_snr(t)?;
        pairs.push(NoisePair { t, lambda });
    }
    Ok(NoiseLevelSet { pairs, seed, shape })
}

/// Per-sample x per-class x per-step mean squared reconstruction errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTensor {
    /// (B, C, N)
    pub errors: Array3<f64>,
}

impl ErrorTensor {
    pub fn num_samples(&self) -> usize {
        self.errors.dim().0
    }

    pub fn num_classes(&self) -> usize {
        self.errors.dim().1
    }

    pub fn num_steps(&self) -> usize {
        self.errors.dim().2
    }

    /// Mean over steps: (B, C).
    pub fn mean_errors(&self) -> Array2<f64> {
        let n = self.num_steps() as f64;
        let mut out = Array2::zeros((self.num_samples(), self.num_classes()));
        for b in 0..self.num_samples() {
            for c in 0..self.num_classes() {
                let mut acc = 0.0;
                for k in 0..self.num_steps() {
                    acc += self.errors[[b, c, k]];
                }
                out[[b, c]] = acc / n;
            }
        }
        out
    }

    /// Keep only the first `n` steps.
    pub fn prefix(&self, n: usize) -> ErrorTensor {
        let n = n.min(self.num_steps());
        ErrorTensor {
            errors: self.errors.slice(ndarray::s![.., .., ..n]).to_owned(),
        }
    }
}

/// Classification outcome for a batch. Votes and posterior are filled in
/// regardless of which rule produced `predicted`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub predicted: Vec<usize>,
    /// (B, C) per-step argmin tallies; rows sum to N.
    pub votes: Array2<u32>,
    /// (B, C) softmax of negative mean errors; rows sum to 1.
    pub posterior: Array2<f64>,
    /// (B, C) mean reconstruction error per class.
    pub mean_errors: Array2<f64>,
    pub rule: DecisionRule,
}

/// Eq. 4 summands for every condition: errors[b][j][k] is the mean squared
/// error of denoising sample b at step k under class j. The same
/// (epsilon_k, lambda_k) — and therefore the same z — is used for every class.
pub fn reconstruction_errors<D: Denoiser + ?Sized>(
    x_batch: &Array4<f64>,
    set: &NoiseLevelSet,
    denoiser: &D,
    error_space: ErrorSpace,
) -> Result<ErrorTensor> {
    let contract = denoiser.contract();
    let (b, c, h, w) = x_batch.dim();
    if (c, h, w) != contract.input_shape {
        return Err(Error::ShapeMismatch {
            expected: vec![contract.input_shape.0, contract.input_shape.1, contract.input_shape.2],
            got: vec![c, h, w],
        });
    }
    let num_classes = contract.num_classes;
    let dim = (c * h * w) as f64;
    let mut errors = Array3::zeros((b, num_classes, set.len()));
    for (k, pair) in set.pairs.iter().enumerate() {
        let (alpha, sigma) = alpha_sigma(pair.lambda);
        let eps = set.epsilon(k, b);
        let z = x_batch * alpha + &eps * sigma;
        for class in 0..num_classes {
            let x_hat = denoiser
                .denoise_level(&z, pair.lambda, crate::denoiser::Condition::Class(class))
                .map_err(|e| Error::NonFinite {
                    step: k,
                    context: format!("denoiser failed for class {class}: {e}"),
                })?;
            for i in 0..b {
                let err = match error_space {
                    ErrorSpace::X => {
                        let xi = x_batch.index_axis(ndarray::Axis(0), i);
                        let pi = x_hat.index_axis(ndarray::Axis(0), i);
                        xi.iter().zip(pi.iter()).map(|(a, p)| (a - p) * (a - p)).sum::<f64>() / dim
                    }
                    ErrorSpace::Epsilon => {
                        // eps_hat = (z - alpha x_hat) / sigma, scored against eps.
                        let zi = z.index_axis(ndarray::Axis(0), i);
                        let pi = x_hat.index_axis(ndarray::Axis(0), i);
                        let ei = eps.index_axis(ndarray::Axis(0), i);
                        zi.iter()
                            .zip(pi.iter())
                            .zip(ei.iter())
                            .map(|((zv, pv), ev)| {
                                let eh = (zv - alpha * pv) / sigma;
                                (eh - ev) * (eh - ev)
                            })
                            .sum::<f64>()
                            / dim
                    }
                };
                if !err.is_finite() {
                    return Err(Error::NonFinite {
                        step: k,
                        context: format!("error for sample {i}, class {class}"),
                    });
                }
                errors[[i, class, k]] = err;
            }
        }
    }
    Ok(ErrorTensor { errors })
}

/// Variant with per-class independent epsilon draws. Used only to measure the
/// variance-reduction effect of the shared-set contract; the classifier
/// proper always shares the set.
pub fn reconstruction_errors_independent<D: Denoiser + ?Sized>(
    x_batch: &Array4<f64>,
    set: &NoiseLevelSet,
    denoiser: &D,
    error_space: ErrorSpace,
) -> Result<ErrorTensor> {
    let contract = denoiser.contract();
    let num_classes = contract.num_classes;
    let b = x_batch.dim().0;
    let mut errors = Array3::zeros((b, num_classes, set.len()));
    for class in 0..num_classes {
        // Re-key the epsilon stream per class.
        let class_set = NoiseLevelSet {
            pairs: set.pairs.clone(),
            seed: set.seed ^ (0xc0ffee + class as u64).wrapping_mul(0x2545f4914f6cdd1d),
            shape: set.shape,
        };
        for (k, pair) in class_set.pairs.iter().enumerate() {
            let (alpha, sigma) = alpha_sigma(pair.lambda);
            let eps = class_set.epsilon(k, b);
            let z = x_batch * alpha + &eps * sigma;
            let x_hat = denoiser.denoise_level(&z, pair.lambda, crate::denoiser::Condition::Class(class))?;
            let dim = (set.shape.0 * set.shape.1 * set.shape.2) as f64;
            for i in 0..b {
                let err = match error_space {
                    ErrorSpace::X => {
                        let xi = x_batch.index_axis(ndarray::Axis(0), i);
                        let pi = x_hat.index_axis(ndarray::Axis(0), i);
                        xi.iter().zip(pi.iter()).map(|(a, p)| (a - p) * (a - p)).sum::<f64>() / dim
                    }
                    ErrorSpace::Epsilon => {
                        let zi = z.index_axis(ndarray::Axis(0), i);
                        let pi = x_hat.index_axis(ndarray::Axis(0), i);
                        let ei = eps.index_axis(ndarray::Axis(0), i);
                        zi.iter()
                            .zip(pi.iter())
                            .zip(ei.iter())
                            .map(|((zv, pv), ev)| {
                                let eh = (zv - alpha * pv) / sigma;
                                (eh - ev) * (eh - ev)
                            })
                            .sum::<f64>()
                            / dim
                    }
                };
                errors[[i, class, k]] = err;
            }
        }
    }
    Ok(ErrorTensor { errors })
}

fn argmin_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v < row[best] {
            best = j;
        }
    }
    best
}

/// Tally per-step argmin votes: vote[b][j] = #{k : j has the lowest error at
/// step k}. Ties at a step go to the lowest class index.
pub fn tally_votes(e: &ErrorTensor) -> Array2<u32> {
    let (b, c, n) = e.errors.dim();
    let mut votes = Array2::zeros((b, c));
    for i in 0..b {
        for k in 0..n {
            let col: Vec<f64> = (0..c).map(|j| e.errors[[i, j, k]]).collect();
            votes[[i, argmin_row(&col)]] += 1;
        }
    }
    votes
}

/// Eq. 3 softmax posterior with the sign convention that argmax(posterior)
/// equals argmin(mean error): p ~ exp(-mean error), max-subtracted.
pub fn posterior_softmax(e: &ErrorTensor) -> Array2<f64> {
    let means = e.mean_errors();
    let (b, c) = means.dim();
    let mut out = Array2::zeros((b, c));
    for i in 0..b {
        let max_neg = (0..c).map(|j| -means[[i, j]]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let v = (-means[[i, j]] - max_neg).exp();
            out[[i, j]] = v;
            sum += v;
        }
        for j in 0..c {
            out[[i, j]] /= sum;
        }
    }
    out
}

fn build_result(e: &ErrorTensor, rule: DecisionRule) -> ClassificationResult {
    let mean_errors = e.mean_errors();
    let votes = tally_votes(e);
    let posterior = posterior_softmax(e);
    let (b, c) = mean_errors.dim();
    let predicted = (0..b)
        .map(|i| match rule {
            DecisionRule::Average => {
                let row: Vec<f64> = (0..c).map(|j| mean_errors[[i, j]]).collect();
                argmin_row(&row)
            }
            DecisionRule::Majority => {
                let mut best = 0;
                for j in 0..c {
                    if votes[[i, j]] > votes[[i, best]] {
                        best = j;
                    }
                }
                best
            }
        })
        .collect();
    ClassificationResult { predicted, votes, posterior, mean_errors, rule }
}

/// Minimum-average-error rule (the softmax-equivalent decision).
pub fn average_rule(e: &ErrorTensor) -> ClassificationResult {
    build_result(e, DecisionRule::Average)
}

/// Per-step argmin voting with argmax tally. Final ties go to the lowest
/// class index.
pub fn majority_rule(e: &ErrorTensor) -> ClassificationResult {
    build_result(e, DecisionRule::Majority)
}

/// Full pipeline: sample the shared noise set, compute the error tensor, and
/// decide with the requested rule.
pub fn classify<D: Denoiser + ?Sized>(
    x_batch: &Array4<f64>,
    denoiser: &D,
    schedule: &NoiseSchedule,
    n_steps: usize,
    rule: DecisionRule,
    seed: u64,
    error_space: ErrorSpace,
) -> Result<(ClassificationResult, ErrorTensor)> {
    let shape = denoiser.contract().input_shape;
    let set = sample_noise_set(n_steps, schedule, shape, seed)?;
    let errors = reconstruction_errors(x_batch, &set, denoiser, error_space)?;
    Ok((build_result(&errors, rule), errors))
}

/// One exported record per classified sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub true_label: usize,
    pub predicted: usize,
    pub rule: DecisionRule,
    pub n: usize,
    pub votes: Vec<u32>,
    pub posterior: Vec<f64>,
    pub mean_errors: Vec<f64>,
}

impl ClassificationResult {
    /// Line-delimited JSON records, one per sample.
    pub fn to_records(&self, labels: &[usize], n_steps: usize) -> Vec<SampleRecord> {
        (0..self.predicted.len())
            .map(|i| SampleRecord {
                id: i,
                true_label: labels[i],
                predicted: self.predicted[i],
                rule: self.rule,
                n: n_steps,
                votes: self.votes.row(i).to_vec(),
                posterior: self.posterior.row(i).to_vec(),
                mean_errors: self.mean_errors.row(i).to_vec(),
            })
            .collect()
    }
}
