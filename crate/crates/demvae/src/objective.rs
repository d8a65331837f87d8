//! Training losses.
//!
//! Everything here is expressed as a *gain* to maximize; the trainer minimizes
//! the negation. With `beta = 0`, `mi_weight = 0` and annealing weight 1 the
//! total reduces exactly to the ELBO `r_rec + r_c + r_z` where
//! `r_z = −avg_kl − l_d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::CategoricalPosterior;
use crate::numeric::{entropy, ln_clamped};

/// Per-batch loss terms, serialized as one JSON line per logging step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Reconstruction gain `E log p(x|z)`.
    pub r_rec: f64,
    /// `−KL(q(c|x) ‖ uniform)`, summed over blocks.
    pub r_c: f64,
    /// `−avg_kl − l_d`.
    pub r_z: f64,
    /// Dispersion term, ≥ 0.
    pub l_d: f64,
    /// Batch-estimated mutual information `H(c) − H(c|x)`.
    pub l_mi: f64,
    /// Weighted variance of prior natural parameters (collapse diagnostic).
    pub weighted_var: f64,
    /// Logistic annealing weight at this step.
    pub anneal_weight: f64,
    /// The maximized objective value.
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Dispersion retention in [0, 1]: the objective keeps `−(1−β)·L_d`.
    pub beta: f64,
    /// Weight of the mutual-information term (0 disables it).
    pub mi_weight: f64,
    /// Slope of the logistic annealing schedule.
    pub anneal_slope: f64,
    /// Step at which the annealing weight reaches 0.5.
    pub anneal_midpoint: f64,
    /// Number of posterior z-samples averaged for the reconstruction term.
    pub n_z_samples: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            beta: 0.0,
            mi_weight: 0.0,
            anneal_slope: 0.0025,
            anneal_midpoint: 2500.0,
            n_z_samples: 20,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "beta {} outside [0, 1]",
                self.beta
            )));
        }
        if !self.mi_weight.is_finite() || self.mi_weight < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "mi_weight {} must be >= 0",
                self.mi_weight
            )));
        }
        if self.n_z_samples == 0 {
            return Err(Error::InvalidArgument("n_z_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// `R_c = E[log p(c) − log q(c|x)] = −KL(q(c|x) ‖ Uniform(K))`, summed over
/// blocks. Always ≤ 0; zero iff q(c|x) is uniform.
pub fn r_c_term(qc: &CategoricalPosterior) -> f64 {
    qc.probs()
        .iter()
        .map(|block| {
            let ln_k = (block.len() as f64).ln();
            block.iter().map(|&q| q * (-ln_k - ln_clamped(q))).sum::<f64>()
        })
        .sum()
}

/// Minibatch mutual information `H(c) − H(c|x)` with `q(c)` estimated by the
/// batch average of `q(c|x)`, summed over blocks.
pub fn mutual_information(batch_qc: &[CategoricalPosterior]) -> Result<f64> {
    let first = batch_qc.first().ok_or(Error::EmptyBatch)?;
    let n_blocks = first.n_blocks();
    for qc in batch_qc {
        if qc.n_blocks() != n_blocks {
            return Err(Error::Shape {
                expected: n_blocks,
                got: qc.n_blocks(),
            });
        }
    }
    let n = batch_qc.len() as f64;
    let mut mi = 0.0;
    for b in 0..n_blocks {
        let k = first.block(b).len();
        let mut marginal = vec![0.0; k];
        let mut mean_cond_entropy = 0.0;
        for qc in batch_qc {
            let block = qc.block(b);
            if block.len() != k {
                return Err(Error::Shape {
                    expected: k,
                    got: block.len(),
                });
            }
            for (m, &q) in marginal.iter_mut().zip(block) {
                *m += q / n;
            }
            mean_cond_entropy += entropy(block) / n;
        }
        mi += entropy(&marginal) - mean_cond_entropy;
    }
    Ok(mi)
}

/// Logistic KL-annealing weight `1/(1 + exp(−slope·(step − midpoint)))`.
pub fn anneal_weight(step: u64, cfg: &ObjectiveConfig) -> f64 {
    1.0 / (1.0 + (-cfg.anneal_slope * (step as f64 - cfg.anneal_midpoint)).exp())
}

/// The full objective, as a gain:
/// `r_rec + w(step)·(r_c − avg_kl − (1−β)·l_d) + mi_weight·l_mi`.
///
/// The annealing weight multiplies the whole KL-derived group, dispersion
/// included, since `l_d` is algebraically part of `R_z`.
pub fn total_loss(
    r_rec: f64,
    r_c: f64,
    avg_kl: f64,
    l_d: f64,
    l_mi: f64,
    step: u64,
    cfg: &ObjectiveConfig,
) -> f64 {
    let w = anneal_weight(step, cfg);
    r_rec + w * (r_c - avg_kl - (1.0 - cfg.beta) * l_d) + cfg.mi_weight * l_mi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::{gaussian_to_natural, GaussianMeanParams};
    use crate::mixture::{r_z_closed_form, MixtureBlock, MixturePrior};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qc(blocks: Vec<Vec<f64>>) -> CategoricalPosterior {
        CategoricalPosterior::new(blocks).unwrap()
    }

    #[test]
    fn r_c_uniform_is_zero() {
        let v = qc(vec![vec![0.2; 5]]);
        assert!(r_c_term(&v).abs() < 1e-12);
    }

    #[test]
    fn r_c_one_hot_is_minus_log_k() {
        let v = qc(vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]]);
        assert!((r_c_term(&v) + 5f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn r_c_half_support() {
        let v = qc(vec![vec![0.5, 0.5, 0.0, 0.0]]);
        assert!((r_c_term(&v) + 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn r_c_sums_over_blocks_and_stays_nonpositive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let blocks: Vec<Vec<f64>> = (0..rng.random_range(1..4))
                .map(|_| {
                    let k = rng.random_range(2..6);
                    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / s).collect()
                })
                .collect();
            assert!(r_c_term(&qc(blocks)) <= 1e-12);
        }
    }

    #[test]
    fn mutual_information_identical_posteriors_is_zero() {
        let one = qc(vec![vec![0.3, 0.7]]);
        let batch = vec![one.clone(), one.clone(), one];
        assert!(mutual_information(&batch).unwrap().abs() < 1e-12);
    }

    #[test]
    fn mutual_information_distinct_one_hots_is_log_k() {
        let k = 4;
        let batch: Vec<CategoricalPosterior> = (0..k)
            .map(|i| {
                let mut p = vec![0.0; k];
                p[i] = 1.0;
                qc(vec![p])
            })
            .collect();
        let mi = mutual_information(&batch).unwrap();
        assert!((mi - (k as f64).ln()).abs() < 1e-6, "mi = {mi}");
    }

    #[test]
    fn mutual_information_hand_computed_pair() {
        let batch = vec![qc(vec![vec![0.9, 0.1]]), qc(vec![vec![0.1, 0.9]])];
        let mi = mutual_information(&batch).unwrap();
        let h_cond = -(0.9f64.ln() * 0.9 + 0.1f64.ln() * 0.1);
        let expect = 2f64.ln() - h_cond; // ≈ 0.368064
        assert!((mi - expect).abs() < 1e-12, "mi = {mi}");
        assert!((expect - 0.368_064).abs() < 1e-6);
    }

    #[test]
    fn mutual_information_empty_batch_errors() {
        assert!(matches!(mutual_information(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn mutual_information_bounds_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let n_blocks = rng.random_range(1..3);
            let ks: Vec<usize> = (0..n_blocks).map(|_| rng.random_range(2..5)).collect();
            let batch: Vec<CategoricalPosterior> = (0..rng.random_range(1..10))
                .map(|_| {
                    qc(ks
                        .iter()
                        .map(|&k| {
                            let raw: Vec<f64> =
                                (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                            let s: f64 = raw.iter().sum();
                            raw.into_iter().map(|x| x / s).collect()
                        })
                        .collect())
                })
                .collect();
            let mi = mutual_information(&batch).unwrap();
            let cap: f64 = ks.iter().map(|&k| (k as f64).ln()).sum();
            assert!(mi >= -1e-9, "mi = {mi}");
            assert!(mi <= cap + 1e-9, "mi = {mi}, cap = {cap}");
        }
    }

    #[test]
    fn anneal_weight_schedule() {
        let cfg = ObjectiveConfig::default();
        assert_eq!(anneal_weight(2500, &cfg), 0.5);
        let w0 = anneal_weight(0, &cfg);
        assert!((w0 - 1.0 / (1.0 + 6.25f64.exp())).abs() < 1e-12);
        assert!((w0 - 0.001_927).abs() < 1e-6);
        assert!((anneal_weight(1_000_000, &cfg) - 1.0).abs() < 1e-9);
        // strictly increasing until f64 saturation, monotone after
        let mut prev = anneal_weight(0, &cfg);
        for step in (100..15_000).step_by(100) {
            let w = anneal_weight(step, &cfg);
            assert!(w > prev, "not strictly increasing at {step}");
            assert!(w > 0.0 && w <= 1.0);
            prev = w;
        }
        for step in (15_000..40_000).step_by(500) {
            let w = anneal_weight(step, &cfg);
            assert!(w >= prev);
            prev = w;
        }
    }

    #[test]
    fn total_loss_beta_one_drops_dispersion() {
        let cfg = ObjectiveConfig {
            beta: 1.0,
            ..Default::default()
        };
        let with = total_loss(-10.0, -1.0, 2.0, 5.0, 0.0, 2500, &cfg);
        let without = total_loss(-10.0, -1.0, 2.0, 0.0, 0.0, 2500, &cfg);
        assert_eq!(with, without);
    }

    #[test]
    fn total_loss_worked_example() {
        let cfg = ObjectiveConfig {
            beta: 0.8,
            ..Default::default()
        };
        let v = total_loss(-10.0, -1.0, 2.0, 0.5, 0.0, 2500, &cfg);
        assert!((v + 11.55).abs() < 1e-12, "total = {v}");
    }

    #[test]
    fn total_loss_reduces_to_elbo() {
        // β = 0, mi = 0, w ≡ 1 (midpoint far in the past): r_rec + r_c + r_z
        let cfg = ObjectiveConfig {
            beta: 0.0,
            mi_weight: 0.0,
            anneal_slope: 0.0025,
            anneal_midpoint: -1e9,
            n_z_samples: 20,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let qz = GaussianMeanParams::new(
                vec![rng.random_range(-2.0..2.0)],
                vec![rng.random_range(0.2..3.0)],
            )
            .unwrap();
            let comps = (0..2)
                .map(|_| {
                    gaussian_to_natural(
                        &GaussianMeanParams::new(
                            vec![rng.random_range(-2.0..2.0)],
                            vec![rng.random_range(0.2..3.0)],
                        )
                        .unwrap(),
                    )
                    .unwrap()
                })
                .collect();
            let prior = MixturePrior::new(vec![MixtureBlock::uniform(comps).unwrap()]).unwrap();
            let w = rng.random_range(0.05..0.95);
            let post = qc(vec![vec![w, 1.0 - w]]);
            let rz = r_z_closed_form(&qz, &prior, &post).unwrap();
            let r_rec = rng.random_range(-20.0..0.0);
            let r_c = r_c_term(&post);
            let total = total_loss(r_rec, r_c, rz.avg_kl, rz.l_d, 0.0, 12345, &cfg);
            let elbo = r_rec + r_c + rz.r_z;
            assert!(
                (total - elbo).abs() <= 1e-12,
                "total {total} != elbo {elbo}"
            );
        }
    }

    #[test]
    fn total_loss_nondecreasing_in_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..500 {
            let l_d = rng.random_range(0.0..5.0);
            let args = (
                rng.random_range(-20.0..0.0),
                rng.random_range(-3.0..0.0),
                rng.random_range(0.0..5.0),
            );
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=10 {
                let cfg = ObjectiveConfig {
                    beta: i as f64 / 10.0,
                    ..Default::default()
                };
                let v = total_loss(args.0, args.1, args.2, l_d, 0.0, 4000, &cfg);
                assert!(v >= prev - 1e-12);
                prev = v;
            }
        }
    }

    #[test]
    fn loss_report_serializes_with_field_names() {
        let report = LossReport {
            r_rec: -1.0,
            r_c: -0.5,
            r_z: -0.25,
            l_d: 0.1,
            l_mi: 0.2,
            weighted_var: 3.0,
            anneal_weight: 0.5,
            total: -1.5,
        };
        let line = serde_json::to_string(&report).unwrap();
        for key in [
            "r_rec",
            "r_c",
            "r_z",
            "l_d",
            "l_mi",
            "weighted_var",
            "anneal_weight",
            "total",
        ] {
            assert!(line.contains(key), "missing `{key}` in {line}");
        }
    }
}
