//! The tiny trainable conditional denoiser: a residual MLP over flattened
//! inputs with additive log-SNR and class embeddings injected at every stage.
//! Predicts v; consumers receive x-space through the standard conversion.
//! Forward and backward passes are written out by hand so training has no
//! framework dependency.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Condition, Denoiser, DenoiserContract};
use crate::error::{Error, Result};
use crate::schedule::alpha_sigma;

/// Architecture hyperparameters for [`TinyDenoiser`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyDenoiserSpec {
    /// Hidden width of the residual trunk.
    pub hidden_dim: usize,
    /// Number of residual stages.
    pub depth: usize,
    /// Width of the conditioning embedding (class + noise level).
    pub embedding_dim: usize,
    /// Width of the sinusoidal log-SNR featurization (even).
    pub lambda_embedding_dim: usize,
}

impl Default for TinyDenoiserSpec {
    fn default() -> Self {
        Self { hidden_dim: 256, depth: 3, embedding_dim: 64, lambda_embedding_dim: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BlockParams {
    pub w1: Array2<f64>,
    pub q: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// All learnable parameters. Class embedding row `num_classes` is the
/// dedicated null-condition row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MlpParams {
    pub class_emb: Array2<f64>,
    pub lam_w1: Array2<f64>,
    pub lam_b1: Array1<f64>,
    pub lam_w2: Array2<f64>,
    pub lam_b2: Array1<f64>,
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub p_e: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl MlpParams {
    pub fn init(spec: &TinyDenoiserSpec, num_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = spec.hidden_dim;
        let e = spec.embedding_dim;
        let l = spec.lambda_embedding_dim;
        let mut mat = |out: usize, inp: usize, scale: f64| {
            Array2::from_shape_fn((out, inp), |_| {
                rng.sample::<f64, _>(StandardNormal) * scale / (inp as f64).sqrt()
            })
        };
        let blocks = (0..spec.depth)
            .map(|_| BlockParams {
                w1: mat(h, h, 1.0),
                q: mat(h, e, 1.0),
                b1: Array1::zeros(h),
                // Small residual branch at init keeps the trunk near-identity.
                w2: mat(h, h, 0.1),
                b2: Array1::zeros(h),
            })
            .collect();
        Self {
            class_emb: mat(num_classes + 1, e, (e as f64).sqrt()),
            lam_w1: mat(e, l, 1.0),
            lam_b1: Array1::zeros(e),
            lam_w2: mat(e, e, 1.0),
            lam_b2: Array1::zeros(e),
            w_in: mat(h, dim, 1.0),
            b_in: Array1::zeros(h),
            p_e: mat(h, e, 1.0),
            blocks,
            w_out: mat(dim, h, 0.1),
            b_out: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(0.0);
        }
        z
    }

    /// All parameter tensors as flat slices, in a fixed order shared with
    /// gradients and optimizer state.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            self.class_emb.as_slice_mut().unwrap(),
            self.lam_w1.as_slice_mut().unwrap(),
            self.lam_b1.as_slice_mut().unwrap(),
            self.lam_w2.as_slice_mut().unwrap(),
            self.lam_b2.as_slice_mut().unwrap(),
            self.w_in.as_slice_mut().unwrap(),
            self.b_in.as_slice_mut().unwrap(),
            self.p_e.as_slice_mut().unwrap(),
        ];
        for b in &mut self.blocks {
            v.push(b.w1.as_slice_mut().unwrap());
            v.push(b.q.as_slice_mut().unwrap());
            v.push(b.b1.as_slice_mut().unwrap());
            v.push(b.w2.as_slice_mut().unwrap());
            v.push(b.b2.as_slice_mut().unwrap());
        }
        v.push(self.w_out.as_slice_mut().unwrap());
        v.push(self.b_out.as_slice_mut().unwrap());
        v
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![
            self.class_emb.as_slice().unwrap(),
            self.lam_w1.as_slice().unwrap(),
            self.lam_b1.as_slice().unwrap(),
            self.lam_w2.as_slice().unwrap(),
            self.lam_b2.as_slice().unwrap(),
            self.w_in.as_slice().unwrap(),
            self.b_in.as_slice().unwrap(),
            self.p_e.as_slice().unwrap(),
        ];
        for b in &self.blocks {
            v.push(b.w1.as_slice().unwrap());
            v.push(b.q.as_slice().unwrap());
            v.push(b.b1.as_slice().unwrap());
            v.push(b.w2.as_slice().unwrap());
            v.push(b.b2.as_slice().unwrap());
        }
        v.push(self.w_out.as_slice().unwrap());
        v.push(self.b_out.as_slice().unwrap());
        v
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_deriv(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s + x * s * (1.0 - s)
}

/// Sinusoidal featurization of the log-SNR with octave-spaced frequencies.
fn lambda_features(lambdas: &[f64], dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let mut out = Array2::zeros((lambdas.len(), dim));
    for (i, &lam) in lambdas.iter().enumerate() {
        for k in 0..half {
            let omega = 2f64.powi(-(k as i32));
            out[[i, 2 * k]] = (lam * omega).sin();
            out[[i, 2 * k + 1]] = (lam * omega).cos();
        }
    }
    out
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    z_flat: Array2<f64>,
    lam_feats: Array2<f64>,
    lam_pre: Array2<f64>,
    lam_hidden: Array2<f64>,
    e: Array2<f64>,
    cond_rows: Vec<usize>,
    block_inputs: Vec<Array2<f64>>,
    block_pres: Vec<Array2<f64>>,
    block_us: Vec<Array2<f64>>,
    h_final: Array2<f64>,
}

/// The trainable conditional denoiser.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TinyDenoiser {
    pub spec: TinyDenoiserSpec,
    pub num_classes: usize,
    pub input_shape: (usize, usize, usize),
    pub params: MlpParams,
}

impl TinyDenoiser {
    pub fn new(spec: TinyDenoiserSpec, num_classes: usize, input_shape: (usize, usize, usize), seed: u64) -> Self {
        let dim = input_shape.0 * input_shape.1 * input_shape.2;
        let params = MlpParams::init(&spec, num_classes, dim, seed);
        Self { spec, num_classes, input_shape, params }
    }

    pub fn dim(&self) -> usize {
        self.input_shape.0 * self.input_shape.1 * self.input_shape.2
    }

    fn embedding_row(&self, condition: Condition) -> Result<usize> {
        match condition {
            Condition::Class(c) if c < self.num_classes => Ok(c),
            Condition::Class(c) => Err(Error::InvalidCondition { index: c, num_classes: self.num_classes }),
            Condition::Null => Ok(self.num_classes),
        }
    }

    /// Forward pass in v-space with per-sample lambdas and conditions.
    pub fn forward_v(
        &self,
        z_flat: &Array2<f64>,
        lambdas: &[f64],
        conditions: &[Condition],
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let b = z_flat.dim().0;
        if lambdas.len() != b || conditions.len() != b {
            return Err(Error::ShapeMismatch { expected: vec![b], got: vec![lambdas.len(), conditions.len()] });
        }
        let p = &self.params;
        let cond_rows: Vec<usize> = conditions
            .iter()
            .map(|&c| self.embedding_row(c))
            .collect::<Result<_>>()?;

        let lam_feats = lambda_features(lambdas, self.spec.lambda_embedding_dim);
        let lam_pre = lam_feats.dot(&p.lam_w1.t()) + &p.lam_b1;
        let lam_hidden = lam_pre.mapv(silu);
        let mut e = lam_hidden.dot(&p.lam_w2.t()) + &p.lam_b2;
        for (i, &row) in cond_rows.iter().enumerate() {
            let emb = p.class_emb.row(row);
            let mut er = e.row_mut(i);
            er += &emb;
        }

        let mut h = z_flat.dot(&p.w_in.t()) + &p.b_in + e.dot(&p.p_e.t());
        let mut block_inputs = Vec::with_capacity(p.blocks.len());
        let mut block_pres = Vec::with_capacity(p.blocks.len());
        let mut block_us = Vec::with_capacity(p.blocks.len());
        for blk in &p.blocks {
            block_inputs.push(h.clone());
            let pre = h.dot(&blk.w1.t()) + e.dot(&blk.q.t()) + &blk.b1;
            let u = pre.mapv(silu);
            h = h + u.dot(&blk.w2.t()) + &blk.b2;
            block_pres.push(pre);
            block_us.push(u);
        }
        let v = h.dot(&p.w_out.t()) + &p.b_out;
        let cache = ForwardCache {
            z_flat: z_flat.clone(),
            lam_feats,
            lam_pre,
            lam_hidden,
            e,
            cond_rows,
            block_inputs,
            block_pres,
            block_us,
            h_final: h,
        };
        Ok((v, cache))
    }

    /// Backward pass: gradient of a scalar loss with respect to every
    /// parameter, given dL/dv.
    pub fn backward(&self, d_v: &Array2<f64>, cache: &ForwardCache) -> MlpParams {
        let p = &self.params;
        let mut g = p.zeros_like();

        g.w_out = d_v.t().dot(&cache.h_final);
        g.b_out = d_v.sum_axis(Axis(0));
        let mut d_h = d_v.dot(&p.w_out);
        let mut d_e: Array2<f64> = Array2::zeros(cache.e.dim());

        for i in (0..p.blocks.len()).rev() {
            let blk = &p.blocks[i];
            let gb = &mut g.blocks[i];
            // h_out = h_in + u w2^T + b2
            gb.b2 = d_h.sum_axis(Axis(0));
            gb.w2 = d_h.t().dot(&cache.block_us[i]);
            let d_u = d_h.dot(&blk.w2);
            let d_pre = &d_u * &cache.block_pres[i].mapv(silu_deriv);
            gb.b1 = d_pre.sum_axis(Axis(0));
            gb.w1 = d_pre.t().dot(&cache.block_inputs[i]);
            gb.q = d_pre.t().dot(&cache.e);
            d_e = d_e + d_pre.dot(&blk.q);
            d_h = d_h + d_pre.dot(&blk.w1);
        }

        // h0 = z w_in^T + b_in + e p_e^T
        g.w_in = d_h.t().dot(&cache.z_flat);
        g.b_in = d_h.sum_axis(Axis(0));
        g.p_e = d_h.t().dot(&cache.e);
        d_e = d_e + d_h.dot(&p.p_e);

        // e = lam_hidden lam_w2^T + lam_b2 + class_emb[row]
        for (i, &row) in cache.cond_rows.iter().enumerate() {
            let mut er = g.class_emb.row_mut(row);
            er += &d_e.row(i);
        }
        g.lam_w2 = d_e.t().dot(&cache.lam_hidden);
        g.lam_b2 = d_e.sum_axis(Axis(0));
        let d_lh = d_e.dot(&p.lam_w2);
        let d_lpre = &d_lh * &cache.lam_pre.mapv(silu_deriv);
        g.lam_w1 = d_lpre.t().dot(&cache.lam_feats);
        g.lam_b1 = d_lpre.sum_axis(Axis(0));
        g
    }

    /// x-space prediction via x = alpha z - sigma v, per-sample lambda and
    /// condition.
    pub fn denoise_flat(
        &self,
        z_flat: &Array2<f64>,
        lambdas: &[f64],
        conditions: &[Condition],
    ) -> Result<Array2<f64>> {
        let (v, _) = self.forward_v(z_flat, lambdas, conditions)?;
        let mut x = Array2::zeros(z_flat.dim());
        for i in 0..z_flat.dim().0 {
            let (alpha, sigma) = alpha_sigma(lambdas[i]);
            let zr = z_flat.row(i);
            let vr = v.row(i);
            let mut xr = x.row_mut(i);
            for j in 0..z_flat.dim().1 {
                xr[j] = alpha * zr[j] - sigma * vr[j];
            }
        }
        Ok(x)
    }
}

impl Denoiser for TinyDenoiser {
    fn contract(&self) -> DenoiserContract {
        DenoiserContract {
            num_classes: self.num_classes,
            supports_null_condition: true,
            input_shape: self.input_shape,
        }
    }

    fn denoise_batch(&self, z: &Array4<f64>, lambdas: &[f64], condition: Condition) -> Result<Array4<f64>> {
        self.contract().validate_condition(condition)?;
        let (b, c, h, w) = z.dim();
        if (c, h, w) != self.input_shape {
            return Err(Error::ShapeMismatch {
                expected: vec![self.input_shape.0, self.input_shape.1, self.input_shape.2],
                got: vec![c, h, w],
            });
        }
        let z_flat = z.to_shape((b, self.dim())).unwrap().to_owned();
        let conds = vec![condition; b];
        let x = self.denoise_flat(&z_flat, lambdas, &conds)?;
        Ok(x.into_shape((b, c, h, w)).unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> TinyDenoiser {
        let spec = TinyDenoiserSpec { hidden_dim: 16, depth: 2, embedding_dim: 8, lambda_embedding_dim: 8 };
        TinyDenoiser::new(spec, 2, (1, 2, 2), 42)
    }

    #[test]
    fn untrained_output_finite_and_shaped() {
        let net = tiny();
        let z = Array4::from_shape_fn((3, 1, 2, 2), |(i, _, y, x)| (i + y + x) as f64 * 0.1);
        let out = net.denoise_batch(&z, &[0.0, 1.0, -1.0], Condition::Class(0)).unwrap();
        assert_eq!(out.dim(), z.dim());
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn invalid_condition_rejected() {
        let net = tiny();
        let z = Array4::zeros((1, 1, 2, 2));
        assert!(net.denoise_batch(&z, &[0.0], Condition::Class(5)).is_err());
    }

    #[test]
    fn null_condition_differs_from_every_class() {
        let net = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Array4::from_shape_fn((1, 1, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let null = net.denoise_batch(&z, &[0.3], Condition::Null).unwrap();
        for c in 0..2 {
            let cls = net.denoise_batch(&z, &[0.3], Condition::Class(c)).unwrap();
            let diff: f64 = (&null - &cls).iter().map(|v| v.abs()).sum();
            assert!(diff > 1e-9, "null embedding collides with class {c}");
        }
    }

    #[test]
    fn batch_order_invariance() {
        let net = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let z = Array4::from_shape_fn((4, 1, 2, 2), |_| rng.gen_range(-1.0..1.0));
        let lam = [0.1, -0.4, 2.0, 0.7];
        let out = net.denoise_batch(&z, &lam, Condition::Class(1)).unwrap();
        // Reverse the batch and compare per-sample outputs.
        let mut z_rev = Array4::zeros(z.dim());
        for i in 0..4 {
            z_rev.index_axis_mut(ndarray::Axis(0), i).assign(&z.index_axis(ndarray::Axis(0), 3 - i));
        }
        let lam_rev = [0.7, 2.0, -0.4, 0.1];
        let out_rev = net.denoise_batch(&z_rev, &lam_rev, Condition::Class(1)).unwrap();
        for i in 0..4 {
            let a = out.index_axis(ndarray::Axis(0), i);
            let b = out_rev.index_axis(ndarray::Axis(0), 3 - i);
            let d: f64 = (&a.to_owned() - &b).iter().map(|v| v.abs()).sum();
            assert!(d < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let net = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = 3;
        let dim = net.dim();
        let z = Array2::from_shape_fn((b, dim), |_| rng.gen_range(-1.0..1.0));
        let lambdas = [0.2, -1.0, 1.5];
        let conds = [Condition::Class(0), Condition::Class(1), Condition::Null];
        let target = Array2::from_shape_fn((b, dim), |_| rng.gen_range(-1.0..1.0));

        let loss_of = |net: &TinyDenoiser| -> f64 {
            let (v, _) = net.forward_v(&z, &lambdas, &conds).unwrap();
            (&v - &target).mapv(|d| d * d).sum() / (b * dim) as f64
        };

        let (v, cache) = net.forward_v(&z, &lambdas, &conds).unwrap();
        let d_v = (&v - &target) * (2.0 / (b * dim) as f64);
        let grads = net.backward(&d_v, &cache);

        // Probe a handful of coordinates in every parameter tensor.
        let eps = 1e-6;
        let g_slices = grads.slices();
        for (pi, gs) in g_slices.iter().enumerate() {
            let probes = [0usize, gs.len() / 2, gs.len().saturating_sub(1)];
            for &j in &probes {
                let mut plus = net.clone();
                plus.params.slices_mut()[pi][j] += eps;
                let mut minus = net.clone();
                minus.params.slices_mut()[pi][j] -= eps;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let an = gs[j];
                assert!(
                    (fd - an).abs() < 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "param {pi} coord {j}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn deterministic_init() {
        let a = tiny();
        let b = tiny();
        assert_eq!(a.params, b.params);
    }
}
