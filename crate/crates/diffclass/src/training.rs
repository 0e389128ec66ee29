//! Training loop for the tiny conditional denoiser: Adam with linear LR
//! warmup, global-norm gradient clipping, EMA shadow parameters and
//! classifier-free condition dropout.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::data::Dataset;
use crate::denoiser::{Condition, DenoiserContract};
use crate::error::{Error, Result};
use crate::nn::{MlpParams, TinyDenoiser, TinyDenoiserSpec};
use crate::schedule::{alpha_sigma, min_snr_weight, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_warmup_steps: usize,
    pub grad_clip: f64,
    pub ema_beta: f64,
    pub ema_warmup_steps: usize,
    pub ema_update_every: usize,
    /// Probability of replacing the class condition with the null token.
    pub condition_dropout: f64,
    pub total_steps: usize,
    pub seed: u64,
    /// min-SNR clamp for the loss weight.
    pub min_snr_gamma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-4,
            lr_warmup_steps: 250,
            grad_clip: 1.0,
            ema_beta: 0.999,
            ema_warmup_steps: 50,
            ema_update_every: 5,
            condition_dropout: 0.1,
            total_steps: 10_000,
            seed: 0,
            min_snr_gamma: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.condition_dropout) {
            return Err(Error::Config(format!("condition_dropout {} outside [0,1)", self.condition_dropout)));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(Error::Config(format!("ema_beta {} outside [0,1)", self.ema_beta)));
        }
        if self.batch_size == 0 || self.ema_update_every == 0 {
            return Err(Error::Config("batch_size and ema_update_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// EMA update with copy-through warmup: during warmup the shadow follows the
/// parameters exactly; afterwards ema <- beta*ema + (1-beta)*params, applied
/// only on steps divisible by `update_every`.
pub fn ema_update(
    params: &MlpParams,
    ema: &mut MlpParams,
    beta: f64,
    step: usize,
    warmup: usize,
    update_every: usize,
) {
    if step < warmup {
        *ema = params.clone();
        return;
    }
    if step % update_every != 0 {
        return;
    }
    for (e, p) in ema.slices_mut().into_iter().zip(params.slices().into_iter()) {
        for (ev, pv) in e.iter_mut().zip(p.iter()) {
            *ev = beta * *ev + (1.0 - beta) * *pv;
        }
    }
}

/// One row of the persisted loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn save_loss_history(history: &[LossRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss,lr")?;
    for r in history {
        writeln!(f, "{},{},{}", r.step, r.loss, r.lr)?;
    }
    Ok(())
}

const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or run inference: both parameter
/// sets, the contract, schedule constants and the dataset fingerprint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub contract: DenoiserContract,
    pub spec: TinyDenoiserSpec,
    pub schedule: NoiseSchedule,
    pub train_config: TrainConfig,
    pub step: usize,
    pub dataset_fingerprint: u64,
    pub params: MlpParams,
    pub ema_params: MlpParams,
}

impl Checkpoint {
    /// Instantiate the denoiser, from EMA weights by default.
    pub fn denoiser(&self, use_ema: bool) -> TinyDenoiser {
        TinyDenoiser {
            spec: self.spec,
            num_classes: self.contract.num_classes,
            input_shape: self.contract.input_shape,
            params: if use_ema { self.ema_params.clone() } else { self.params.clone() },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = bincode::serialize(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let ckpt: Checkpoint =
            bincode::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        if ckpt.params.num_params() != ckpt.ema_params.num_params() {
            return Err(Error::Checkpoint("parameter/EMA structure mismatch".into()));
        }
        Ok(ckpt)
    }
}

struct Adam {
    m: MlpParams,
    v: MlpParams,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(template: &MlpParams) -> Self {
        Self { m: template.zeros_like(), v: template.zeros_like(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    fn step(&mut self, params: &mut MlpParams, grads: &MlpParams, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut ms = self.m.slices_mut();
        let mut vs = self.v.slices_mut();
        let gs = grads.slices();
        let mut ps = params.slices_mut();
        for i in 0..gs.len() {
            let (m, v, g, p) = (&mut ms[i], &mut vs[i], &gs[i], &mut ps[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Clip gradients to a maximum global L2 norm. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut MlpParams, max_norm: f64) -> f64 {
    let norm: f64 = grads
        .slices()
        .iter()
        .map(|s| s.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for s in grads.slices_mut() {
            for v in s.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Train a fresh denoiser on the dataset per the configured objective:
/// t ~ U(0,1) per sample, v-prediction, min-SNR-weighted x-space loss.
pub fn train(
    dataset: &Dataset,
    spec: TinyDenoiserSpec,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    let num_classes = dataset.num_classes();
    if dataset.labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::Data("label out of range".into()));
    }
    let shape = dataset.image_shape();
    let net = TinyDenoiser::new(spec, num_classes, shape, config.seed);
    let ema = net.params.clone();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        contract: crate::denoiser::DenoiserContract {
            num_classes,
            supports_null_condition: true,
            input_shape: shape,
        },
        spec,
        schedule: *schedule,
        train_config: *config,
        step: 0,
        dataset_fingerprint: dataset.fingerprint(),
        params: net.params.clone(),
        ema_params: ema,
    };
    resume(dataset, ckpt, config.total_steps)
}

/// Continue training a checkpoint up to `target_steps`. The RNG stream is
/// keyed by (seed, start step) so a resumed run is itself deterministic.
pub fn resume(
    dataset: &Dataset,
    checkpoint: Checkpoint,
    target_steps: usize,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let config = checkpoint.train_config;
    let schedule = checkpoint.schedule;
    if checkpoint.dataset_fingerprint != dataset.fingerprint() {
        return Err(Error::Checkpoint("dataset fingerprint does not match checkpoint".into()));
    }
    let mut net = checkpoint.denoiser(false);
    let mut ema = checkpoint.ema_params.clone();
    let start_step = checkpoint.step;
    let dim = net.dim();
    let b = config.batch_size;
    let n = dataset.len();
    let flat_images = dataset
        .images
        .to_shape((n, dim))
        .map_err(|e| Error::Data(e.to_string()))?
        .to_owned();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (start_step as u64).wrapping_mul(0x6c62272e07bb0142));
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force initial shuffle
    let mut adam = Adam::new(&net.params);
    let mut history = Vec::with_capacity(target_steps.saturating_sub(start_step));

    for step in start_step..target_steps {
        // Assemble the batch by shuffled cycling.
        let mut batch_idx = Vec::with_capacity(b);
        for _ in 0..b {
            if cursor >= n {
                for i in (1..n).rev() {
                    let j = rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }

        let mut x = Array2::zeros((b, dim));
        let mut z = Array2::zeros((b, dim));
        let mut lambdas = Vec::with_capacity(b);
        let mut conditions = Vec::with_capacity(b);
        let mut weights = Vec::with_capacity(b);
        let mut sigmas = Vec::with_capacity(b);
        for (row, &i) in batch_idx.iter().enumerate() {
            let t = schedule.clamp_time(rng.gen::<f64>());
            let lambda = schedule.log_snr(t)?;
            let (alpha, sigma) = alpha_sigma(lambda);
            for j in 0..dim {
                let eps: f64 = rng.sample(StandardNormal);
                x[[row, j]] = flat_images[[i, j]];
                z[[row, j]] = alpha * flat_images[[i, j]] + sigma * eps;
            }
            let dropped = rng.gen::<f64>() < config.condition_dropout;
            conditions.push(if dropped { Condition::Null } else { Condition::Class(dataset.labels[i]) });
            lambdas.push(lambda);
            weights.push(min_snr_weight(lambda, config.min_snr_gamma));
            sigmas.push(sigma);
        }

        let (v, cache) = net.forward_v(&z, &lambdas, &conditions)?;
        // x_hat = alpha z - sigma v; loss = mean_i w_i mean_j (x - x_hat)^2.
        let mut loss = 0.0;
        let mut d_v = Array2::zeros(v.dim());
        for i in 0..b {
            let (alpha, _) = alpha_sigma(lambdas[i]);
            let sigma = sigmas[i];
            let w = weights[i];
            for j in 0..dim {
                let x_hat = alpha * z[[i, j]] - sigma * v[[i, j]];
                let d = x_hat - x[[i, j]];
                loss += w * d * d / (b * dim) as f64;
                d_v[[i, j]] = w * 2.0 * d * (-sigma) / (b * dim) as f64;
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                context: format!(
                    "training loss diverged (lambda range [{:.3}, {:.3}])",
                    lambdas.iter().cloned().fold(f64::INFINITY, f64::min),
                    lambdas.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                ),
            });
        }

        let mut grads = net.backward(&d_v, &cache);
        clip_global_norm(&mut grads, config.grad_clip);
        let warm = if config.lr_warmup_steps == 0 {
            1.0
        } else {
            ((step + 1) as f64 / config.lr_warmup_steps as f64).min(1.0)
        };
        adam.step(&mut net.params, &grads, config.learning_rate * warm);
        ema_update(&net.params, &mut ema, config.ema_beta, step, config.ema_warmup_steps, config.ema_update_every);
        history.push(LossRecord { step, loss, lr: config.learning_rate * warm });
    }

    let mut out = checkpoint;
    out.step = target_steps.max(start_step);
    out.params = net.params;
    out.ema_params = ema;
    Ok((out, history))
}
