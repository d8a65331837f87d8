//! The mixture-prior VAE: encoder, learnable Gaussian-mixture prior, decoder,
//! one training step with hand-derived gradients, and evaluation estimators.
//!
//! The encoder trunk maps `x` to `[μ_φ | log σ²_φ | logits_1 | ... | logits_M]`;
//! `q(c|x)` is the per-block softmax of the logits. The latent vector is
//! partitioned across M blocks, each with K learnable Gaussian components
//! stored as mean and log-variance.
//!
//! `q(c|x)` enters the regularizers through its soft probabilities — the
//! expectation over a K-way discrete variable is exact and cheap — so the
//! discrete path needs no sampling during training. Gradients flow: through
//! the reparameterized z into the encoder; analytically through the softmax
//! into `R_c`, the averaged KL, the dispersion term and the mutual-information
//! term; and through the natural-parameter map into the prior means and
//! log-variances.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::GaussianMeanParams;
use crate::mixture::{
    weighted_variance, CategoricalPosterior, MixtureBlock, MixturePrior,
};
use crate::nn::{
    adam_step, Activation, AdamState, DenseNet, LOG_VAR_CLAMP,
};
use crate::numeric::{ln_clamped, log_sum_exp, sigmoid, softmax, PROB_FLOOR};
use crate::objective::{anneal_weight, LossReport, ObjectiveConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObsFamily {
    /// Gaussian observation model with fixed unit variance; the decoder
    /// outputs the mean.
    GaussianFixedVariance,
    /// Bernoulli observation model; the decoder outputs logits.
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub z_dim: usize,
    /// Number of independent discrete variables (mixture blocks).
    pub n_blocks: usize,
    /// Components per block.
    pub n_components: usize,
    /// Width of the two tanh hidden layers in encoder and decoder.
    pub hidden_dim: usize,
    pub obs_family: ObsFamily,
    pub objective: ObjectiveConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.z_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("dimensions must be >= 1".into()));
        }
        if self.n_blocks == 0 || self.n_components == 0 {
            return Err(Error::InvalidArgument("counts must be >= 1".into()));
        }
        if self.n_blocks > self.z_dim {
            return Err(Error::InvalidArgument(format!(
                "{} blocks cannot partition {} latent dims",
                self.n_blocks, self.z_dim
            )));
        }
        self.objective.validate()
    }

    /// Latent dims per block: as even a split as possible.
    pub fn block_dims(&self) -> Vec<usize> {
        let base = self.z_dim / self.n_blocks;
        let rem = self.z_dim % self.n_blocks;
        (0..self.n_blocks)
            .map(|b| base + usize::from(b < rem))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: u64,
    pub seed: u64,
    pub n_z_samples: usize,
    pub nll_is_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 30,
            lr: 0.001,
            steps: 10_000,
            seed: 0,
            n_z_samples: 20,
            nll_is_samples: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_z_samples == 0 || self.nll_is_samples == 0 {
            return Err(Error::InvalidArgument("counts must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidArgument(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Per-sample reparameterization noise: `noise[i]` holds `n_z_samples · z_dim`
/// standard-normal draws for batch element `i`.
pub type NoiseBank = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
pub struct DemVaeModel {
    cfg: ModelConfig,
    encoder: DenseNet,
    decoder: DenseNet,
    /// `[block][component][block_dim]`
    prior_means: Vec<Vec<Vec<f64>>>,
    prior_log_vars: Vec<Vec<Vec<f64>>>,
    grad_prior_means: Vec<Vec<Vec<f64>>>,
    grad_prior_log_vars: Vec<Vec<Vec<f64>>>,
    block_dims: Vec<usize>,
    block_offsets: Vec<usize>,
}

/// One draw from the generative model.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    /// Chosen component per block.
    pub labels: Vec<usize>,
    pub z: Vec<f64>,
    /// Decoder mean (Gaussian) or probabilities (Bernoulli).
    pub x_hat: Vec<f64>,
}

// Gaussian A(η) and ∇A(η) on raw interleaved [η1, η2] slices; the training
// loop avoids constructing NaturalParams values per sample. Consistency with
// the expfam path is covered by tests.
fn gauss_a(eta: &[f64]) -> f64 {
    eta.chunks_exact(2)
        .map(|p| -p[0] * p[0] / (4.0 * p[1]) - 0.5 * (-2.0 * p[1]).ln())
        .sum()
}

fn gauss_grad_a(eta: &[f64], out: &mut [f64]) {
    for (d, p) in eta.chunks_exact(2).enumerate() {
        let var = -1.0 / (2.0 * p[1]);
        let mu = p[0] * var;
        out[2 * d] = mu;
        out[2 * d + 1] = mu * mu + var;
    }
}

struct EncodedSample {
    tape: crate::nn::Tape,
    mean: Vec<f64>,
    log_var_raw: Vec<f64>,
    /// exp(clamped log-var)
    var: Vec<f64>,
    /// per-block softmax probabilities
    q: Vec<Vec<f64>>,
}

impl DemVaeModel {
    pub fn new(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let head_dim = 2 * cfg.z_dim + cfg.n_blocks * cfg.n_components;
        let encoder = DenseNet::new(
            &[cfg.data_dim, cfg.hidden_dim, cfg.hidden_dim, head_dim],
            &[Activation::Tanh, Activation::Tanh, Activation::Identity],
            rng,
        )?;
        let decoder = DenseNet::new(
            &[cfg.z_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.data_dim],
            &[Activation::Tanh, Activation::Tanh, Activation::Identity],
            rng,
        )?;
        let block_dims = cfg.block_dims();
        let mut block_offsets = Vec::with_capacity(block_dims.len());
        let mut off = 0;
        for &d in &block_dims {
            block_offsets.push(off);
            off += d;
        }
        // component means start spread (~N(0,1)); log-variances start at 0
        let prior_means: Vec<Vec<Vec<f64>>> = block_dims
            .iter()
            .map(|&d| {
                (0..cfg.n_components)
                    .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
                    .collect()
            })
            .collect();
        let prior_log_vars: Vec<Vec<Vec<f64>>> = block_dims
            .iter()
            .map(|&d| vec![vec![0.0; d]; cfg.n_components])
            .collect();
        let grad_prior_means = prior_log_vars.clone();
        let grad_prior_log_vars = prior_log_vars.clone();
        Ok(Self {
            cfg,
            encoder,
            decoder,
            prior_means,
            prior_log_vars,
            grad_prior_means,
            grad_prior_log_vars,
            block_dims,
            block_offsets,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    pub fn param_count(&self) -> usize {
        let prior: usize = self
            .block_dims
            .iter()
            .map(|&d| 2 * d * self.cfg.n_components)
            .sum();
        self.encoder.param_count() + self.decoder.param_count() + prior
    }

    /// Natural parameters of one prior component, interleaved `[η1, η2]`.
    fn component_eta(&self, block: usize, comp: usize) -> Vec<f64> {
        let mean = &self.prior_means[block][comp];
        let lv = &self.prior_log_vars[block][comp];
        let mut eta = Vec::with_capacity(2 * mean.len());
        for d in 0..mean.len() {
            let precision = (-lv[d].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)).exp();
            eta.push(mean[d] * precision);
            eta.push(-0.5 * precision);
        }
        eta
    }

    /// The current mixture prior as a value object.
    pub fn prior(&self) -> Result<MixturePrior> {
        let mut blocks = Vec::with_capacity(self.block_dims.len());
        for b in 0..self.block_dims.len() {
            let comps = (0..self.cfg.n_components)
                .map(|k| crate::expfam::NaturalParams::gaussian_diag(self.component_eta(b, k)))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(MixtureBlock::uniform(comps)?);
        }
        MixturePrior::new(blocks)
    }

    fn encode_internal(&self, x: &[f64]) -> Result<EncodedSample> {
        let (out, tape) = self.encoder.forward(x)?;
        let dz = self.cfg.z_dim;
        let mean = out[..dz].to_vec();
        let log_var_raw = out[dz..2 * dz].to_vec();
        let var: Vec<f64> = log_var_raw
            .iter()
            .map(|&v| v.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP).exp())
            .collect();
        let k = self.cfg.n_components;
        let q: Vec<Vec<f64>> = (0..self.cfg.n_blocks)
            .map(|b| {
                let start = 2 * dz + b * k;
                softmax(&out[start..start + k])
            })
            .collect();
        Ok(EncodedSample {
            tape,
            mean,
            log_var_raw,
            var,
            q,
        })
    }

    /// Posterior parameters `q(z|x)` and `q(c|x)` for one data vector.
    pub fn encode(&self, x: &[f64]) -> Result<(GaussianMeanParams, CategoricalPosterior)> {
        let enc = self.encode_internal(x)?;
        Ok((
            GaussianMeanParams::new(enc.mean, enc.var)?,
            CategoricalPosterior::new(enc.q)?,
        ))
    }

    fn decoder_loglik(&self, x: &[f64], dec_out: &[f64]) -> f64 {
        match self.cfg.obs_family {
            ObsFamily::GaussianFixedVariance => x
                .iter()
                .zip(dec_out)
                .map(|(&xd, &od)| {
                    let r = xd - od;
                    -0.5 * r * r - crate::expfam::HALF_LN_2PI
                })
                .sum(),
            ObsFamily::Bernoulli => x
                .iter()
                .zip(dec_out)
                .map(|(&xd, &od)| xd * od - crate::numeric::softplus(od))
                .sum(),
        }
    }

    fn decoder_loglik_grad(&self, x: &[f64], dec_out: &[f64], out: &mut [f64]) {
        match self.cfg.obs_family {
            ObsFamily::GaussianFixedVariance => {
                for d in 0..x.len() {
                    out[d] = x[d] - dec_out[d];
                }
            }
            ObsFamily::Bernoulli => {
                for d in 0..x.len() {
                    out[d] = x[d] - sigmoid(dec_out[d]);
                }
            }
        }
    }

    /// Mean decoder log-likelihood of `x` over the given z-samples.
    pub fn reconstruction_term(&self, x: &[f64], z_samples: &[Vec<f64>]) -> Result<f64> {
        if z_samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        for z in z_samples {
            let (out, _) = self.decoder.forward(z)?;
            total += self.decoder_loglik(x, &out);
        }
        Ok(total / z_samples.len() as f64)
    }

    pub fn zero_grads(&mut self) {
        self.encoder.zero_grads();
        self.decoder.zero_grads();
        for block in self
            .grad_prior_means
            .iter_mut()
            .chain(self.grad_prior_log_vars.iter_mut())
        {
            for comp in block {
                comp.iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    pub fn draw_noise_bank(&self, batch_len: usize, rng: &mut ChaCha8Rng) -> NoiseBank {
        let per_sample = self.cfg.objective.n_z_samples * self.cfg.z_dim;
        (0..batch_len)
            .map(|_| (0..per_sample).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    /// Batch loss and gradients with explicit reparameterization noise.
    ///
    /// Accumulates the gradient of the *negated* objective (the quantity the
    /// trainer minimizes) into the model's gradient buffers and returns the
    /// per-batch [`LossReport`]. Deterministic given the noise bank.
    pub fn loss_with_noise(
        &mut self,
        batch: &[&[f64]],
        step: u64,
        noise: &NoiseBank,
    ) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if noise.len() != batch.len() {
            return Err(Error::Shape {
                expected: batch.len(),
                got: noise.len(),
            });
        }
        self.zero_grads();

        let cfg = self.cfg.clone();
        let obj = &cfg.objective;
        let dz = cfg.z_dim;
        let n_z = obj.n_z_samples;
        let k = cfg.n_components;
        let n = batch.len();
        let scale = 1.0 / n as f64;
        let w = anneal_weight(step, obj);
        let beta_keep = 1.0 - obj.beta;
        let ln_k = (k as f64).ln();

        // per-step component quantities
        let n_blocks = self.block_dims.len();
        let mut comp_eta = vec![Vec::with_capacity(k); n_blocks];
        let mut comp_a = vec![Vec::with_capacity(k); n_blocks];
        let mut comp_grad_a = vec![Vec::with_capacity(k); n_blocks];
        for b in 0..n_blocks {
            for c in 0..k {
                let eta = self.component_eta(b, c);
                let mut grad = vec![0.0; eta.len()];
                gauss_grad_a(&eta, &mut grad);
                comp_a[b].push(gauss_a(&eta));
                comp_eta[b].push(eta);
                comp_grad_a[b].push(grad);
            }
        }

        // pass 1: encode the whole batch, collect q(c|x)
        let mut encoded = Vec::with_capacity(n);
        for x in batch {
            if x.len() != cfg.data_dim {
                return Err(Error::Shape {
                    expected: cfg.data_dim,
                    got: x.len(),
                });
            }
            encoded.push(self.encode_internal(x)?);
        }
        let mut q_marginal = vec![vec![0.0; k]; n_blocks];
        for enc in &encoded {
            for b in 0..n_blocks {
                for (m, &q) in q_marginal[b].iter_mut().zip(&enc.q[b]) {
                    *m += q * scale;
                }
            }
        }

        // batch mutual information H(c) − H(c|x), blocks summed
        let mut l_mi = 0.0;
        for b in 0..n_blocks {
            let mut h_cond = 0.0;
            for enc in &encoded {
                h_cond += crate::numeric::entropy(&enc.q[b]) * scale;
            }
            l_mi += crate::numeric::entropy(&q_marginal[b]) - h_cond;
        }

        let prior_value = self.prior()?;
        let mut sum_r_rec = 0.0;
        let mut sum_r_c = 0.0;
        let mut sum_kl = 0.0;
        let mut sum_l_d = 0.0;
        let mut sum_wvar = 0.0;

        // pass 2: per-sample terms and gradients
        let mut dec_out_grad = vec![0.0; cfg.data_dim];
        for (i, (x, enc)) in batch.iter().zip(&encoded).enumerate() {
            let mut g_mean = vec![0.0; dz];
            let mut g_lv_raw = vec![0.0; dz];
            let mut g_logits = vec![vec![0.0; k]; n_blocks];

            // reconstruction: average decoder log-likelihood over z-samples
            let std: Vec<f64> = enc.var.iter().map(|v| v.sqrt()).collect();
            let mut r_rec = 0.0;
            for s in 0..n_z {
                let eps = &noise[i][s * dz..(s + 1) * dz];
                let z: Vec<f64> = (0..dz).map(|d| enc.mean[d] + std[d] * eps[d]).collect();
                let (out, dec_tape) = self.decoder.forward(&z)?;
                r_rec += self.decoder_loglik(x, &out) / n_z as f64;
                self.decoder_loglik_grad(x, &out, &mut dec_out_grad);
                let coeff = -scale / n_z as f64; // gradient of the minimized loss
                let upstream: Vec<f64> = dec_out_grad.iter().map(|g| g * coeff).collect();
                let g_z = self.decoder.backward(&dec_tape, &upstream)?;
                for d in 0..dz {
                    g_mean[d] += g_z[d];
                    if enc.log_var_raw[d].abs() < LOG_VAR_CLAMP {
                        g_lv_raw[d] += g_z[d] * 0.5 * std[d] * eps[d];
                    }
                }
            }
            sum_r_rec += r_rec;

            // blockwise regularizers
            for b in 0..n_blocks {
                let (off, bd) = (self.block_offsets[b], self.block_dims[b]);
                let q = &enc.q[b];
                let mean = &enc.mean[off..off + bd];
                let var = &enc.var[off..off + bd];

                // η̄ = Σ_c q_c η_c and its log-partition data
                let mut eta_bar = vec![0.0; 2 * bd];
                for (qc, eta) in q.iter().zip(&comp_eta[b]) {
                    for (acc, v) in eta_bar.iter_mut().zip(eta) {
                        *acc += qc * v;
                    }
                }
                let a_bar = gauss_a(&eta_bar);
                let mut grad_a_bar = vec![0.0; 2 * bd];
                gauss_grad_a(&eta_bar, &mut grad_a_bar);

                // KL(q(z|x) ‖ p̂_η̄) in natural form:
                // Σ_d [−½·ln σ² − ½ − η̄1·m − η̄2·(m² + σ²)] + A(η̄)
                let mut kl = a_bar;
                for d in 0..bd {
                    kl += -0.5 * var[d].ln() - 0.5
                        - eta_bar[2 * d] * mean[d]
                        - eta_bar[2 * d + 1] * (mean[d] * mean[d] + var[d]);
                }
                sum_kl += kl;

                // L_d = Σ_c q_c A(η_c) − A(η̄)
                let mean_a: f64 = q.iter().zip(&comp_a[b]).map(|(qc, a)| qc * a).sum();
                sum_l_d += mean_a - a_bar;

                // R_c = Σ_c q_c(−ln K − ln q_c)
                let r_c: f64 = q.iter().map(|&qc| qc * (-ln_k - ln_clamped(qc))).sum();
                sum_r_c += r_c;

                // ∂KL/∂η̄ = ∇A(η̄) − E_q φ(z)
                let mut kl_eta_bar = grad_a_bar.clone();
                for d in 0..bd {
                    kl_eta_bar[2 * d] -= mean[d];
                    kl_eta_bar[2 * d + 1] -= mean[d] * mean[d] + var[d];
                }

                // encoder-side KL gradients (loss = minimized objective)
                for d in 0..bd {
                    g_mean[off + d] +=
                        scale * w * (-eta_bar[2 * d] - 2.0 * eta_bar[2 * d + 1] * mean[d]);
                    if enc.log_var_raw[off + d].abs() < LOG_VAR_CLAMP {
                        g_lv_raw[off + d] +=
                            scale * w * (-0.5 - eta_bar[2 * d + 1] * var[d]);
                    }
                }

                // gradients into q (collected before the softmax backward)
                let mut g_q = vec![0.0; k];
                for c in 0..k {
                    let eta = &comp_eta[b][c];
                    // KL path: ∂KL/∂q_c = <η_c, ∂KL/∂η̄>
                    let dot_kl: f64 = eta.iter().zip(&kl_eta_bar).map(|(e, g)| e * g).sum();
                    g_q[c] += scale * w * dot_kl;
                    // dispersion path: ∂L_d/∂q_c = A(η_c) − <η_c, ∇A(η̄)>
                    let dot_bar: f64 = eta.iter().zip(&grad_a_bar).map(|(e, g)| e * g).sum();
                    g_q[c] += scale * w * beta_keep * (comp_a[b][c] - dot_bar);
                    // R_c path (gain): ∂R_c/∂q_c = −ln K − ln q_c − 1
                    let indicator = if q[c] > PROB_FLOOR { 1.0 } else { 0.0 };
                    g_q[c] -= scale * w * (-ln_k - ln_clamped(q[c]) - indicator);
                    // MI path (gain): (1/N)(ln q_c − ln q̄_c) with clamp indicators
                    let ind_m = if q_marginal[b][c] > PROB_FLOOR { 1.0 } else { 0.0 };
                    let d_mi = scale
                        * ((-ln_clamped(q_marginal[b][c]) - ind_m)
                            - (-ln_clamped(q[c]) - indicator));
                    g_q[c] -= obj.mi_weight * d_mi;
                }

                // softmax backward into the block logits
                let weighted: f64 = q.iter().zip(&g_q).map(|(qc, g)| qc * g).sum();
                for c in 0..k {
                    g_logits[b][c] = q[c] * (g_q[c] - weighted);
                }

                // prior-side gradients through η_c
                for c in 0..k {
                    let eta = &comp_eta[b][c];
                    let grad_a_c = &comp_grad_a[b][c];
                    let lv = &self.prior_log_vars[b][c];
                    let mean_c = &self.prior_means[b][c];
                    for d in 0..bd {
                        // loss gradients wrt η1, η2 of this component
                        let g_eta1 = scale
                            * w
                            * (q[c] * kl_eta_bar[2 * d]
                                + beta_keep * q[c] * (grad_a_c[2 * d] - grad_a_bar[2 * d]));
                        let g_eta2 = scale
                            * w
                            * (q[c] * kl_eta_bar[2 * d + 1]
                                + beta_keep
                                    * q[c]
                                    * (grad_a_c[2 * d + 1] - grad_a_bar[2 * d + 1]));
                        let clamped = lv[d].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP);
                        let precision = (-clamped).exp();
                        self.grad_prior_means[b][c][d] += g_eta1 * precision;
                        if lv[d].abs() < LOG_VAR_CLAMP {
                            self.grad_prior_log_vars[b][c][d] += -g_eta1 * mean_c[d] * precision
                                + g_eta2 * 0.5 * precision;
                        }
                    }
                }
            }

            // encoder backward over the concatenated head gradient
            let mut head_grad = Vec::with_capacity(2 * dz + n_blocks * k);
            head_grad.extend_from_slice(&g_mean);
            head_grad.extend_from_slice(&g_lv_raw);
            for g in &g_logits {
                head_grad.extend_from_slice(g);
            }
            self.encoder.backward(&enc.tape, &head_grad)?;

            let qc_value = CategoricalPosterior::new(enc.q.clone())?;
            sum_wvar += weighted_variance(&prior_value, &qc_value)?;
        }

        let r_rec = sum_r_rec * scale;
        let r_c = sum_r_c * scale;
        let avg_kl = sum_kl * scale;
        let l_d = sum_l_d * scale;
        let weighted_var = sum_wvar * scale;

        for (value, term) in [
            (r_rec, "r_rec"),
            (r_c, "r_c"),
            (avg_kl, "avg_kl"),
            (l_d, "l_d"),
            (l_mi, "l_mi"),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFinite { term });
            }
        }

        let total = crate::objective::total_loss(r_rec, r_c, avg_kl, l_d, l_mi, step, obj);
        Ok(LossReport {
            r_rec,
            r_c,
            r_z: -avg_kl - l_d,
            // Property 1 guarantees L_d ≥ 0; truncate accumulated roundoff
            l_d: l_d.max(0.0),
            l_mi,
            weighted_var,
            anneal_weight: w,
            total,
        })
    }

    /// One optimization step: draw reparameterization noise, accumulate
    /// gradients of the negated objective, apply Adam to every parameter.
    pub fn train_step(
        &mut self,
        batch: &[&[f64]],
        opt: &mut AdamState,
        step: u64,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossReport> {
        let noise = self.draw_noise_bank(batch.len(), rng);
        let report = self.loss_with_noise(batch, step, &noise)?;
        let mut params = Vec::with_capacity(self.param_count());
        self.append_params(&mut params);
        let mut grads = Vec::with_capacity(self.param_count());
        self.append_grads(&mut grads);
        adam_step(opt, &mut params, &grads)?;
        self.load_params(&params);
        Ok(report)
    }

    pub fn append_params(&self, out: &mut Vec<f64>) {
        self.encoder.append_params(out);
        self.decoder.append_params(out);
        for block in &self.prior_means {
            for comp in block {
                out.extend_from_slice(comp);
            }
        }
        for block in &self.prior_log_vars {
            for comp in block {
                out.extend_from_slice(comp);
            }
        }
    }

    pub fn append_grads(&self, out: &mut Vec<f64>) {
        self.encoder.append_grads(out);
        self.decoder.append_grads(out);
        for block in &self.grad_prior_means {
            for comp in block {
                out.extend_from_slice(comp);
            }
        }
        for block in &self.grad_prior_log_vars {
            for comp in block {
                out.extend_from_slice(comp);
            }
        }
    }

    pub fn load_params(&mut self, src: &[f64]) {
        let mut cursor = 0;
        self.encoder.load_params(src, &mut cursor);
        self.decoder.load_params(src, &mut cursor);
        for block in &mut self.prior_means {
            for comp in block {
                comp.copy_from_slice(&src[cursor..cursor + comp.len()]);
                cursor += comp.len();
            }
        }
        for block in &mut self.prior_log_vars {
            for comp in block {
                comp.copy_from_slice(&src[cursor..cursor + comp.len()]);
                cursor += comp.len();
            }
        }
        debug_assert_eq!(cursor, src.len());
    }

    /// Importance-sampling estimate of `−log p(x)` with proposal `q(z|x)`
    /// and the component-marginalized mixture density in the numerator.
    pub fn importance_sampling_nll(&self, x: &[f64], n_samples: usize, seed: u64) -> Result<f64> {
        if n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        let (qz, _) = self.encode(x)?;
        let prior = self.prior()?;
        let std: Vec<f64> = qz.variance.iter().map(|v| v.sqrt()).collect();
        let ln_k = (self.cfg.n_components as f64).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut log_weights = Vec::with_capacity(n_samples);
        let mut comp_lls = Vec::with_capacity(self.cfg.n_components);
        for _ in 0..n_samples {
            let z: Vec<f64> = (0..self.cfg.z_dim)
                .map(|d| {
                    let e: f64 = rng.sample(StandardNormal);
                    qz.mean[d] + std[d] * e
                })
                .collect();
            let (out, _) = self.decoder.forward(&z)?;
            let mut log_w = self.decoder_loglik(x, &out) - qz.log_pdf(&z)?;
            for (b, blk) in prior.blocks().iter().enumerate() {
                let off = self.block_offsets[b];
                let zb = &z[off..off + self.block_dims[b]];
                comp_lls.clear();
                for comp in blk.components() {
                    comp_lls.push(comp.log_density(zb)?);
                }
                log_w += log_sum_exp(&comp_lls) - ln_k;
            }
            log_weights.push(log_w);
        }
        Ok(-(log_sum_exp(&log_weights) - (n_samples as f64).ln()))
    }

    /// Ancestral sampling: `c ~ Uniform(K)` per block, `z ~ p_η(z|c)`,
    /// `x̂` the decoder mean/probabilities.
    pub fn sample_generation(&self, n: usize, seed: u64) -> Result<Vec<GeneratedSample>> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut labels = Vec::with_capacity(self.cfg.n_blocks);
            let mut z = vec![0.0; self.cfg.z_dim];
            for b in 0..self.cfg.n_blocks {
                let c = rng.random_range(0..self.cfg.n_components);
                labels.push(c);
                let off = self.block_offsets[b];
                for d in 0..self.block_dims[b] {
                    let sd =
                        (0.5 * self.prior_log_vars[b][c][d].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP))
                            .exp();
                    let e: f64 = rng.sample(StandardNormal);
                    z[off + d] = self.prior_means[b][c][d] + sd * e;
                }
            }
            let (dec_out, _) = self.decoder.forward(&z)?;
            let x_hat = match self.cfg.obs_family {
                ObsFamily::GaussianFixedVariance => dec_out,
                ObsFamily::Bernoulli => dec_out.into_iter().map(sigmoid).collect(),
            };
            out.push(GeneratedSample { labels, z, x_hat });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: u128,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    encoder: DenseNet,
    decoder: DenseNet,
    prior_means: Vec<Vec<Vec<f64>>>,
    prior_log_vars: Vec<Vec<Vec<f64>>>,
    adam: AdamState,
    rng: RngState,
    step: u64,
}

/// Owns a model, its optimizer state and the training RNG; one `step()` call
/// draws a batch with replacement and applies one update.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: DemVaeModel,
    pub opt: AdamState,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub train_cfg: TrainConfig,
}

impl Trainer {
    pub fn new(mut model: DemVaeModel, train_cfg: TrainConfig) -> Result<Self> {
        train_cfg.validate()?;
        model.cfg.objective.n_z_samples = train_cfg.n_z_samples;
        let opt = AdamState::new(model.param_count(), train_cfg.lr);
        let rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        Ok(Self {
            model,
            opt,
            rng,
            step: 0,
            train_cfg,
        })
    }

    /// Build the model from a config and seed the parameter initialization
    /// from `train_cfg.seed`.
    pub fn from_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        let model = DemVaeModel::new(model_cfg, &mut init_rng)?;
        Self::new(model, train_cfg)
    }

    pub fn step(&mut self, data: &crate::data::LabeledDataset) -> Result<LossReport> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let batch: Vec<&[f64]> = (0..self.train_cfg.batch_size)
            .map(|_| {
                let idx = self.rng.random_range(0..data.len());
                data.points[idx].as_slice()
            })
            .collect();
        let report = self
            .model
            .train_step(&batch, &mut self.opt, self.step, &mut self.rng)?;
        self.step += 1;
        Ok(report)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let ckpt = Checkpoint {
            version: CHECKPOINT_VERSION,
            model_cfg: self.model.cfg.clone(),
            train_cfg: self.train_cfg,
            encoder: self.model.encoder.clone(),
            decoder: self.model.decoder.clone(),
            prior_means: self.model.prior_means.clone(),
            prior_log_vars: self.model.prior_log_vars.clone(),
            adam: self.opt.clone(),
            rng: RngState::capture(&self.rng),
            step: self.step,
        };
        let json = serde_json::to_string(&ckpt)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let found = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Checkpoint("missing version field".into()))?
            as u32;
        if found != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut encoder = ckpt.encoder;
        encoder.ensure_grad_buffers();
        let mut decoder = ckpt.decoder;
        decoder.ensure_grad_buffers();
        let cfg = ckpt.model_cfg;
        cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let block_dims = cfg.block_dims();
        let mut block_offsets = Vec::with_capacity(block_dims.len());
        let mut off = 0;
        for &d in &block_dims {
            block_offsets.push(off);
            off += d;
        }
        let grad_prior_means: Vec<Vec<Vec<f64>>> = ckpt
            .prior_means
            .iter()
            .map(|b| b.iter().map(|c| vec![0.0; c.len()]).collect())
            .collect();
        let grad_prior_log_vars = grad_prior_means.clone();
        let model = DemVaeModel {
            cfg,
            encoder,
            decoder,
            prior_means: ckpt.prior_means,
            prior_log_vars: ckpt.prior_log_vars,
            grad_prior_means,
            grad_prior_log_vars,
            block_dims,
            block_offsets,
        };
        Ok(Self {
            model,
            opt: ckpt.adam,
            rng: ckpt.rng.restore(),
            step: ckpt.step,
            train_cfg: ckpt.train_cfg,
        })
    }
}
