//! Mixture-prior machinery.
//!
//! A [`MixturePrior`] holds M independent blocks; block b has K_b components,
//! each an exponential-family distribution over that block's slice of the
//! latent vector, with a uniform component prior. Given a per-block posterior
//! q(c|x), this module computes
//!
//! * the averaged natural parameters `η̄ = Σ_c q(c|x)·η_c`,
//! * the dispersion term `L_d = E_{q(c|x)} A(η_c) − A(η̄) ≥ 0`,
//! * the weighted variance `Var_{q(c|x)} η_c` of the component parameters
//!   (the mode-collapse diagnostic), and
//! * the exact decomposition `R_z = −KL(q(z|x) ‖ p̂_η̄) − L_d`, together with a
//!   seeded Monte-Carlo estimator of R_z that serves as an independent
//!   cross-check of the closed form.
//!
//! The closed-form gradients of `L_d` and of the weighted variance are exposed
//! so the gradient-alignment inequality
//! `(∇_{η_c} L_d)ᵀ·(∇_{η_c} Var) ≥ 0` can be tested directly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::expfam::{
    bernoulli_to_natural, gaussian_to_natural, kl_gaussian, natural_to_gaussian,
    BernoulliMeanParams, Family, GaussianMeanParams, NaturalParams,
};

/// One mixture block: K components sharing family and dimensionality, with a
/// uniform prior over components.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureBlock {
    components: Vec<NaturalParams>,
    component_prior: Vec<f64>,
}

impl MixtureBlock {
    /// Build a block with uniform p(c) = 1/K.
    pub fn uniform(components: Vec<NaturalParams>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("block needs at least one component".into()));
        }
        let family = components[0].family();
        let len = components[0].len();
        for c in &components[1..] {
            if c.family() != family {
                return Err(Error::InvalidArgument(
                    "all components in a block must share a family".into(),
                ));
            }
            if c.len() != len {
                return Err(Error::Shape {
                    expected: len,
                    got: c.len(),
                });
            }
        }
        let k = components.len();
        Ok(Self {
            components,
            component_prior: vec![1.0 / k as f64; k],
        })
    }

    pub fn components(&self) -> &[NaturalParams] {
        &self.components
    }

    pub fn component_prior(&self) -> &[f64] {
        &self.component_prior
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn family(&self) -> Family {
        self.components[0].family()
    }

    /// Length of a latent slice for this block.
    pub fn sample_len(&self) -> usize {
        self.components[0].sample_len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrior {
    blocks: Vec<MixtureBlock>,
}

impl MixturePrior {
    pub fn new(blocks: Vec<MixtureBlock>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("prior needs at least one block".into()));
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[MixtureBlock] {
        &self.blocks
    }

    /// Total latent dimensionality across blocks.
    pub fn sample_len(&self) -> usize {
        self.blocks.iter().map(|b| b.sample_len()).sum()
    }
}

/// Per-block posterior probabilities q(c|x).
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalPosterior {
    probs: Vec<Vec<f64>>,
}

impl CategoricalPosterior {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("posterior needs at least one block".into()));
        }
        for block in &probs {
            if block.is_empty() {
                return Err(Error::InvalidArgument("empty posterior block".into()));
            }
            if block.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
                return Err(Error::Domain("posterior probability outside [0, 1]".into()));
            }
            let sum: f64 = block.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!(
                    "posterior block sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self { probs })
    }

    /// Uniform posterior matching a prior's block structure.
    pub fn uniform_for(prior: &MixturePrior) -> Self {
        Self {
            probs: prior
                .blocks()
                .iter()
                .map(|b| vec![1.0 / b.n_components() as f64; b.n_components()])
                .collect(),
        }
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn n_blocks(&self) -> usize {
        self.probs.len()
    }

    pub fn block(&self, b: usize) -> &[f64] {
        &self.probs[b]
    }
}

fn validate_pair(prior: &MixturePrior, qc: &CategoricalPosterior) -> Result<()> {
    if prior.blocks().len() != qc.n_blocks() {
        return Err(Error::Shape {
            expected: prior.blocks().len(),
            got: qc.n_blocks(),
        });
    }
    for (b, block) in prior.blocks().iter().enumerate() {
        if qc.block(b).len() != block.n_components() {
            return Err(Error::Shape {
                expected: block.n_components(),
                got: qc.block(b).len(),
            });
        }
    }
    Ok(())
}

/// `η̄ = Σ_c q(c|x)·η_c` for one block. The family domain is convex, so the
/// result is a valid parameter vector.
pub fn averaged_params(
    prior: &MixturePrior,
    qc: &CategoricalPosterior,
    block: usize,
) -> Result<NaturalParams> {
    validate_pair(prior, qc)?;
    if block >= prior.blocks().len() {
        return Err(Error::BlockIndex {
            index: block,
            blocks: prior.blocks().len(),
        });
    }
    let blk = &prior.blocks()[block];
    let weights = qc.block(block);
    let mut avg = vec![0.0; blk.components()[0].len()];
    for (w, comp) in weights.iter().zip(blk.components()) {
        for (a, v) in avg.iter_mut().zip(comp.values()) {
            *a += w * v;
        }
    }
    NaturalParams::new(blk.family(), avg)
}

/// Dispersion term `L_d = Σ_blocks [E_{q(c|x)} A(η_c) − A(η̄)]`.
///
/// Nonnegative by convexity of A; zero when the components of every block
/// coincide or when q(c|x) is one-hot.
pub fn dispersion_term(prior: &MixturePrior, qc: &CategoricalPosterior) -> Result<f64> {
    validate_pair(prior, qc)?;
    let mut total = 0.0;
    for (b, blk) in prior.blocks().iter().enumerate() {
        let weights = qc.block(b);
        let mean_a: f64 = weights
            .iter()
            .zip(blk.components())
            .map(|(w, c)| w * c.log_partition())
            .sum();
        let avg = averaged_params(prior, qc, b)?;
        total += mean_a - avg.log_partition();
    }
    Ok(total)
}

/// Trace of the q(c|x)-weighted covariance of component natural parameters,
/// summed over blocks: `Σ_d E(η_c^d)² − (E η_c^d)²`.
pub fn weighted_variance(prior: &MixturePrior, qc: &CategoricalPosterior) -> Result<f64> {
    validate_pair(prior, qc)?;
    let mut total = 0.0;
    for (b, blk) in prior.blocks().iter().enumerate() {
        let weights = qc.block(b);
        let dim = blk.components()[0].len();
        for d in 0..dim {
            let mut first = 0.0;
            let mut second = 0.0;
            for (w, comp) in weights.iter().zip(blk.components()) {
                let v = comp.values()[d];
                first += w * v;
                second += w * v * v;
            }
            total += (second - first * first).max(0.0);
        }
    }
    Ok(total)
}

/// `∇_{η_c} L_d = q(c|x)·(∇A|_{η_c} − ∇A|_{η̄})` for one component of one block.
pub fn grad_dispersion(
    prior: &MixturePrior,
    qc: &CategoricalPosterior,
    block: usize,
    component: usize,
) -> Result<Vec<f64>> {
    validate_pair(prior, qc)?;
    if block >= prior.blocks().len() {
        return Err(Error::BlockIndex {
            index: block,
            blocks: prior.blocks().len(),
        });
    }
    let blk = &prior.blocks()[block];
    if component >= blk.n_components() {
        return Err(Error::BlockIndex {
            index: component,
            blocks: blk.n_components(),
        });
    }
    let w = qc.block(block)[component];
    let grad_c = blk.components()[component].grad_log_partition();
    let grad_avg = averaged_params(prior, qc, block)?.grad_log_partition();
    Ok(grad_c
        .iter()
        .zip(&grad_avg)
        .map(|(gc, ga)| w * (gc - ga))
        .collect())
}

/// `∇_{η_c} Var_{q(c|x)} η_c = 2·q(c|x)·(η_c − η̄)` for one component.
pub fn grad_weighted_variance(
    prior: &MixturePrior,
    qc: &CategoricalPosterior,
    block: usize,
    component: usize,
) -> Result<Vec<f64>> {
    validate_pair(prior, qc)?;
    if block >= prior.blocks().len() {
        return Err(Error::BlockIndex {
            index: block,
            blocks: prior.blocks().len(),
        });
    }
    let blk = &prior.blocks()[block];
    if component >= blk.n_components() {
        return Err(Error::BlockIndex {
            index: component,
            blocks: blk.n_components(),
        });
    }
    let w = qc.block(block)[component];
    let avg = averaged_params(prior, qc, block)?;
    Ok(blk.components()[component]
        .values()
        .iter()
        .zip(avg.values())
        .map(|(v, a)| 2.0 * w * (v - a))
        .collect())
}

/// The exact split of the z-regularizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RzDecomposition {
    /// `R_z = −avg_kl − l_d`.
    pub r_z: f64,
    /// `KL(q(z|x) ‖ p̂_η̄)`, summed over blocks.
    pub avg_kl: f64,
    /// Dispersion term, summed over blocks.
    pub l_d: f64,
}

fn gaussian_blocks_only(prior: &MixturePrior) -> Result<()> {
    for blk in prior.blocks() {
        if blk.family() != Family::GaussianDiag {
            return Err(Error::UnsupportedFamily(blk.family().name()));
        }
    }
    Ok(())
}

fn check_qz_dims(qz: &GaussianMeanParams, prior: &MixturePrior) -> Result<()> {
    if qz.dim() != prior.sample_len() {
        return Err(Error::Shape {
            expected: prior.sample_len(),
            got: qz.dim(),
        });
    }
    Ok(())
}

fn block_slice(qz: &GaussianMeanParams, offset: usize, len: usize) -> GaussianMeanParams {
    GaussianMeanParams {
        mean: qz.mean[offset..offset + len].to_vec(),
        variance: qz.variance[offset..offset + len].to_vec(),
    }
}

/// Closed-form `R_z = −KL(q(z|x) ‖ p̂_η̄) − L_d` for Gaussian blocks.
pub fn r_z_closed_form(
    qz: &GaussianMeanParams,
    prior: &MixturePrior,
    qc: &CategoricalPosterior,
) -> Result<RzDecomposition> {
    validate_pair(prior, qc)?;
    gaussian_blocks_only(prior)?;
    check_qz_dims(qz, prior)?;

    let mut avg_kl = 0.0;
    let mut offset = 0;
    for (b, blk) in prior.blocks().iter().enumerate() {
        let avg = averaged_params(prior, qc, b)?;
        let avg_gaussian = natural_to_gaussian(&avg)?;
        let q_block = block_slice(qz, offset, blk.sample_len());
        avg_kl += kl_gaussian(&q_block, &avg_gaussian)?;
        offset += blk.sample_len();
    }
    let l_d = dispersion_term(prior, qc)?;
    Ok(RzDecomposition {
        r_z: -avg_kl - l_d,
        avg_kl,
        l_d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloEstimate {
    pub estimate: f64,
    /// Sample standard deviation divided by √n; 0 when n = 1.
    pub std_error: f64,
}

/// Seeded Monte-Carlo estimate of
/// `R_z = E_{q(z|x)q(c|x)}[log p_η(z|c) − log q(z|x)]`.
///
/// Unbiased, deterministic given the seed, and independent of the closed-form
/// path: it evaluates component log-densities directly rather than going
/// through the averaged parameters.
pub fn r_z_monte_carlo(
    qz: &GaussianMeanParams,
    prior: &MixturePrior,
    qc: &CategoricalPosterior,
    n_samples: usize,
    seed: u64,
) -> Result<MonteCarloEstimate> {
    validate_pair(prior, qc)?;
    gaussian_blocks_only(prior)?;
    check_qz_dims(qz, prior)?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = qz.dim();
    let std: Vec<f64> = qz.variance.iter().map(|v| v.sqrt()).collect();

    // Welford accumulation keeps the variance estimate stable at large n.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut z = vec![0.0; dim];
    for i in 0..n_samples {
        for d in 0..dim {
            let e: f64 = StandardNormal.sample(&mut rng);
            z[d] = qz.mean[d] + std[d] * e;
        }
        let mut value = -qz.log_pdf(&z)?;
        let mut offset = 0;
        for (b, blk) in prior.blocks().iter().enumerate() {
            let zb = &z[offset..offset + blk.sample_len()];
            for (w, comp) in qc.block(b).iter().zip(blk.components()) {
                if *w > 0.0 {
                    value += w * comp.log_density(zb)?;
                }
            }
            offset += blk.sample_len();
        }
        let delta = value - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (value - mean);
    }
    let std_error = if n_samples > 1 {
        (m2 / (n_samples - 1) as f64).sqrt() / (n_samples as f64).sqrt()
    } else {
        0.0
    };
    Ok(MonteCarloEstimate {
        estimate: mean,
        std_error,
    })
}

/// One cell of a dispersion-surface grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub param1: f64,
    pub param2: f64,
    pub l_d: f64,
    pub var: f64,
}

/// Evaluate `L_d` and the weighted variance over a two-component grid.
///
/// For the Gaussian family the axis values are component means (unit
/// variance); for Bernoulli they are success probabilities. `qc_first` is the
/// posterior weight of the first component.
pub fn dispersion_surface(
    family: Family,
    axis: &[f64],
    qc_first: f64,
) -> Result<Vec<SurfacePoint>> {
    if !(0.0..=1.0).contains(&qc_first) {
        return Err(Error::Domain(format!(
            "qc weight {qc_first} outside [0, 1]"
        )));
    }
    let qc = CategoricalPosterior::new(vec![vec![qc_first, 1.0 - qc_first]])?;
    let mut out = Vec::with_capacity(axis.len() * axis.len());
    for &p1 in axis {
        for &p2 in axis {
            let components = match family {
                Family::GaussianDiag => vec![
                    gaussian_to_natural(&GaussianMeanParams::new(vec![p1], vec![1.0])?)?,
                    gaussian_to_natural(&GaussianMeanParams::new(vec![p2], vec![1.0])?)?,
                ],
                Family::Bernoulli => vec![
                    bernoulli_to_natural(&BernoulliMeanParams::new(vec![p1])?)?,
                    bernoulli_to_natural(&BernoulliMeanParams::new(vec![p2])?)?,
                ],
                Family::Categorical => {
                    return Err(Error::UnsupportedFamily(family.name()));
                }
            };
            let prior = MixturePrior::new(vec![MixtureBlock::uniform(components)?])?;
            out.push(SurfacePoint {
                param1: p1,
                param2: p2,
                l_d: dispersion_term(&prior, &qc)?,
                var: weighted_variance(&prior, &qc)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn gaussian_comp(mu: f64, var: f64) -> NaturalParams {
        gaussian_to_natural(&GaussianMeanParams::new(vec![mu], vec![var]).unwrap()).unwrap()
    }

    fn two_gaussian_prior(mu1: f64, mu2: f64, var: f64) -> MixturePrior {
        MixturePrior::new(vec![MixtureBlock::uniform(vec![
            gaussian_comp(mu1, var),
            gaussian_comp(mu2, var),
        ])
        .unwrap()])
        .unwrap()
    }

    fn qc1(weights: Vec<f64>) -> CategoricalPosterior {
        CategoricalPosterior::new(vec![weights]).unwrap()
    }

    #[test]
    fn averaged_params_identical_components() {
        let prior = two_gaussian_prior(1.3, 1.3, 0.7);
        let avg = averaged_params(&prior, &qc1(vec![0.5, 0.5]), 0).unwrap();
        for (a, b) in avg.values().iter().zip(prior.blocks()[0].components()[0].values()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn averaged_params_uniform_mean() {
        let prior = MixturePrior::new(vec![MixtureBlock::uniform(vec![
            NaturalParams::gaussian_diag(vec![-1.0, -0.5]).unwrap(),
            NaturalParams::gaussian_diag(vec![1.0, -0.5]).unwrap(),
        ])
        .unwrap()])
        .unwrap();
        let avg = averaged_params(&prior, &qc1(vec![0.5, 0.5]), 0).unwrap();
        assert_eq!(avg.values(), &[0.0, -0.5]);
    }

    #[test]
    fn averaged_params_one_hot_selects_component() {
        let prior = two_gaussian_prior(-2.0, 3.0, 1.5);
        let avg = averaged_params(&prior, &qc1(vec![0.0, 1.0]), 0).unwrap();
        assert_eq!(avg.values(), prior.blocks()[0].components()[1].values());
    }

    #[test]
    fn averaged_params_block_out_of_range() {
        let prior = two_gaussian_prior(0.0, 1.0, 1.0);
        assert!(matches!(
            averaged_params(&prior, &qc1(vec![0.5, 0.5]), 1),
            Err(Error::BlockIndex { index: 1, blocks: 1 })
        ));
    }

    #[test]
    fn dispersion_zero_for_equal_components() {
        let prior = two_gaussian_prior(0.8, 0.8, 2.0);
        let l_d = dispersion_term(&prior, &qc1(vec![0.5, 0.5])).unwrap();
        assert!(l_d.abs() < 1e-10);
    }

    #[test]
    fn dispersion_known_gaussian_value() {
        // unit variance, means ±1, uniform weights: (1/2σ²)[Eμ² − (Eμ)²] = 1/2
        let prior = two_gaussian_prior(-1.0, 1.0, 1.0);
        let l_d = dispersion_term(&prior, &qc1(vec![0.5, 0.5])).unwrap();
        assert!((l_d - 0.5).abs() < 1e-12, "l_d = {l_d}");
    }

    #[test]
    fn dispersion_known_bernoulli_value() {
        let prior = MixturePrior::new(vec![MixtureBlock::uniform(vec![
            bernoulli_to_natural(&BernoulliMeanParams::new(vec![0.2]).unwrap()).unwrap(),
            bernoulli_to_natural(&BernoulliMeanParams::new(vec![0.8]).unwrap()).unwrap(),
        ])
        .unwrap()])
        .unwrap();
        let l_d = dispersion_term(&prior, &qc1(vec![0.5, 0.5])).unwrap();
        let expect = -(0.8f64.ln()); // −ln(√(0.2·0.8) + √(0.8·0.2))
        assert!((l_d - expect).abs() < 1e-10, "l_d = {l_d}");
    }

    #[test]
    fn weighted_variance_cases() {
        let prior = two_gaussian_prior(1.0, 1.0, 1.0);
        assert!(weighted_variance(&prior, &qc1(vec![0.5, 0.5])).unwrap() < 1e-15);

        // scalar η ∈ {0, 2}: E η² − (Eη)² = 2 − 1 = 1
        let prior = MixturePrior::new(vec![MixtureBlock::uniform(vec![
            NaturalParams::bernoulli(vec![0.0]).unwrap(),
            NaturalParams::bernoulli(vec![2.0]).unwrap(),
        ])
        .unwrap()])
        .unwrap();
        let var = weighted_variance(&prior, &qc1(vec![0.5, 0.5])).unwrap();
        assert!((var - 1.0).abs() < 1e-12);

        // one-hot posterior: zero regardless of components
        let prior = two_gaussian_prior(-5.0, 9.0, 0.3);
        assert!(weighted_variance(&prior, &qc1(vec![1.0, 0.0])).unwrap() < 1e-15);
    }

    #[test]
    fn one_hot_posterior_kills_both_terms() {
        let prior = two_gaussian_prior(-3.0, 4.0, 0.5);
        let qc = qc1(vec![0.0, 1.0]);
        assert!(dispersion_term(&prior, &qc).unwrap().abs() < 1e-10);
        assert!(weighted_variance(&prior, &qc).unwrap().abs() < 1e-15);
    }

    #[test]
    fn unbalanced_posterior_shrinks_dispersion() {
        let prior = two_gaussian_prior(-1.0, 1.5, 1.0);
        let balanced = dispersion_term(&prior, &qc1(vec![0.5, 0.5])).unwrap();
        let unbalanced = dispersion_term(&prior, &qc1(vec![0.2, 0.8])).unwrap();
        assert!(
            unbalanced < balanced,
            "expected {unbalanced} < {balanced}"
        );
    }

    #[test]
    fn grad_dispersion_trivial_cases() {
        let prior = two_gaussian_prior(1.1, 1.1, 0.9);
        let g = grad_dispersion(&prior, &qc1(vec![0.5, 0.5]), 0, 0).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));

        // zero posterior weight → zero gradient
        let prior = two_gaussian_prior(-2.0, 2.0, 1.0);
        let g = grad_dispersion(&prior, &qc1(vec![0.0, 1.0]), 0, 0).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn grad_weighted_variance_known_value() {
        let prior = MixturePrior::new(vec![MixtureBlock::uniform(vec![
            NaturalParams::bernoulli(vec![0.0]).unwrap(),
            NaturalParams::bernoulli(vec![2.0]).unwrap(),
        ])
        .unwrap()])
        .unwrap();
        let g = grad_weighted_variance(&prior, &qc1(vec![0.5, 0.5]), 0, 1).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-12); // 2·0.5·(2−1)

        let prior = two_gaussian_prior(0.4, 0.4, 1.2);
        let g = grad_weighted_variance(&prior, &qc1(vec![0.5, 0.5]), 0, 0).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    /// Random two-block Gaussian/Bernoulli configuration with full-support qc.
    fn random_config(rng: &mut ChaCha8Rng) -> (MixturePrior, CategoricalPosterior) {
        let n_blocks = rng.random_range(1..3);
        let mut blocks = Vec::new();
        let mut probs = Vec::new();
        for _ in 0..n_blocks {
            let k = rng.random_range(2..5);
            let dim = rng.random_range(1..4);
            let gaussian = rng.random::<bool>();
            let comps: Vec<NaturalParams> = (0..k)
                .map(|_| {
                    if gaussian {
                        let mut v = Vec::new();
                        for _ in 0..dim {
                            v.push(rng.random_range(-3.0..3.0));
                            v.push(rng.random_range(-4.0..-0.15));
                        }
                        NaturalParams::gaussian_diag(v).unwrap()
                    } else {
                        NaturalParams::bernoulli(
                            (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect(),
                        )
                        .unwrap()
                    }
                })
                .collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            probs.push(raw.into_iter().map(|w| w / total).collect());
            blocks.push(MixtureBlock::uniform(comps).unwrap());
        }
        (
            MixturePrior::new(blocks).unwrap(),
            CategoricalPosterior::new(probs).unwrap(),
        )
    }

    #[test]
    fn dispersion_nonnegative_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..2000 {
            let (prior, qc) = random_config(&mut rng);
            let l_d = dispersion_term(&prior, &qc).unwrap();
            assert!(l_d >= -1e-12, "negative dispersion {l_d}");
        }
    }

    fn fd_grad(
        prior: &MixturePrior,
        qc: &CategoricalPosterior,
        block: usize,
        comp: usize,
        f: impl Fn(&MixturePrior, &CategoricalPosterior) -> f64,
        h: f64,
    ) -> Vec<f64> {
        let base = prior.blocks()[block].components()[comp].clone();
        let mut out = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let perturb = |delta: f64| {
                let mut vals = base.values().to_vec();
                vals[i] += delta;
                let mut blocks = prior.blocks().to_vec();
                let mut comps = blocks[block].components().to_vec();
                comps[comp] = NaturalParams::new(base.family(), vals).unwrap();
                blocks[block] = MixtureBlock::uniform(comps).unwrap();
                MixturePrior::new(blocks).unwrap()
            };
            let hi = f(&perturb(h), qc);
            let lo = f(&perturb(-h), qc);
            out.push((hi - lo) / (2.0 * h));
        }
        out
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..100 {
            let (prior, qc) = random_config(&mut rng);
            for (b, blk) in prior.blocks().iter().enumerate() {
                for c in 0..blk.n_components() {
                    let an_d = grad_dispersion(&prior, &qc, b, c).unwrap();
                    let fd_d = fd_grad(&prior, &qc, b, c, |p, q| dispersion_term(p, q).unwrap(), 1e-5);
                    for (a, n) in an_d.iter().zip(&fd_d) {
                        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
                        assert!(rel <= 1e-6, "dispersion grad mismatch {a} vs {n}");
                    }
                    let an_v = grad_weighted_variance(&prior, &qc, b, c).unwrap();
                    let fd_v =
                        fd_grad(&prior, &qc, b, c, |p, q| weighted_variance(p, q).unwrap(), 1e-5);
                    for (a, n) in an_v.iter().zip(&fd_v) {
                        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
                        assert!(rel <= 1e-6, "variance grad mismatch {a} vs {n}");
                    }
                }
            }
        }
    }

    #[test]
    fn gradient_alignment_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..2000 {
            let (prior, qc) = random_config(&mut rng);
            for (b, blk) in prior.blocks().iter().enumerate() {
                for c in 0..blk.n_components() {
                    let gd = grad_dispersion(&prior, &qc, b, c).unwrap();
                    let gv = grad_weighted_variance(&prior, &qc, b, c).unwrap();
                    let dot: f64 = gd.iter().zip(&gv).map(|(a, b)| a * b).sum();
                    assert!(dot >= -1e-12, "alignment violated: {dot}");
                }
            }
        }
    }

    #[test]
    fn r_z_closed_form_trivial_cases() {
        let qz = GaussianMeanParams::new(vec![0.0], vec![1.0]).unwrap();
        let prior = two_gaussian_prior(0.0, 0.0, 1.0);
        let rz = r_z_closed_form(&qz, &prior, &qc1(vec![0.5, 0.5])).unwrap();
        assert!(rz.r_z.abs() < 1e-12 && rz.avg_kl.abs() < 1e-12 && rz.l_d.abs() < 1e-12);

        let prior = two_gaussian_prior(-1.0, 1.0, 1.0);
        let rz = r_z_closed_form(&qz, &prior, &qc1(vec![0.5, 0.5])).unwrap();
        assert!((rz.r_z + 0.5).abs() < 1e-12);
        assert!(rz.avg_kl.abs() < 1e-12);
        assert!((rz.l_d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn r_z_closed_form_rejects_bernoulli_blocks() {
        let qz = GaussianMeanParams::new(vec![0.0], vec![1.0]).unwrap();
        let prior = MixturePrior::new(vec![MixtureBlock::uniform(vec![
            NaturalParams::bernoulli(vec![0.0]).unwrap(),
            NaturalParams::bernoulli(vec![1.0]).unwrap(),
        ])
        .unwrap()])
        .unwrap();
        assert!(matches!(
            r_z_closed_form(&qz, &prior, &qc1(vec![0.5, 0.5])),
            Err(Error::UnsupportedFamily("bernoulli"))
        ));
    }

    fn random_gaussian_config(
        rng: &mut ChaCha8Rng,
    ) -> (GaussianMeanParams, MixturePrior, CategoricalPosterior) {
        let n_blocks = rng.random_range(1..3);
        let mut blocks = Vec::new();
        let mut probs = Vec::new();
        let mut total_dim = 0;
        for _ in 0..n_blocks {
            let k = rng.random_range(2..4);
            let dim = rng.random_range(1..3);
            total_dim += dim;
            let comps: Vec<NaturalParams> = (0..k)
                .map(|_| {
                    let mean: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let var: Vec<f64> = (0..dim).map(|_| rng.random_range(0.3..3.0)).collect();
                    gaussian_to_natural(&GaussianMeanParams::new(mean, var).unwrap()).unwrap()
                })
                .collect();
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            probs.push(raw.into_iter().map(|w| w / total).collect());
            blocks.push(MixtureBlock::uniform(comps).unwrap());
        }
        let qz = GaussianMeanParams::new(
            (0..total_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            (0..total_dim).map(|_| rng.random_range(0.3..3.0)).collect(),
        )
        .unwrap();
        (
            qz,
            MixturePrior::new(blocks).unwrap(),
            CategoricalPosterior::new(probs).unwrap(),
        )
    }

    #[test]
    fn monte_carlo_agrees_with_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for trial in 0..10 {
            let (qz, prior, qc) = random_gaussian_config(&mut rng);
            let closed = r_z_closed_form(&qz, &prior, &qc).unwrap();
            let mc = r_z_monte_carlo(&qz, &prior, &qc, 200_000, 1000 + trial).unwrap();
            let gap = (mc.estimate - closed.r_z).abs();
            assert!(
                gap <= 3.0 * mc.std_error.max(1e-9),
                "MC {} vs closed {} (se {})",
                mc.estimate,
                closed.r_z,
                mc.std_error
            );
        }
    }

    #[test]
    fn monte_carlo_zero_when_prior_matches_posterior() {
        let qz = GaussianMeanParams::new(vec![0.3, -0.7], vec![1.1, 0.8]).unwrap();
        let comp = gaussian_to_natural(&qz).unwrap();
        let prior = MixturePrior::new(vec![MixtureBlock::uniform(vec![
            comp.clone(),
            comp,
        ])
        .unwrap()])
        .unwrap();
        let mc = r_z_monte_carlo(&qz, &prior, &CategoricalPosterior::uniform_for(&prior), 50_000, 9)
            .unwrap();
        assert!(mc.estimate.abs() <= 3.0 * mc.std_error.max(1e-9));
    }

    #[test]
    fn monte_carlo_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let (qz, prior, qc) = random_gaussian_config(&mut rng);
        let a = r_z_monte_carlo(&qz, &prior, &qc, 10_000, 5).unwrap();
        let b = r_z_monte_carlo(&qz, &prior, &qc, 10_000, 5).unwrap();
        assert_eq!(a.estimate.to_bits(), b.estimate.to_bits());
        assert_eq!(a.std_error.to_bits(), b.std_error.to_bits());
    }

    #[test]
    fn surface_diagonal_is_zero() {
        let axis: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
        let pts = dispersion_surface(Family::GaussianDiag, &axis, 0.5).unwrap();
        for p in pts.iter().filter(|p| p.param1 == p.param2) {
            assert!(p.l_d.abs() < 1e-10);
            assert!(p.var.abs() < 1e-15);
        }
        let bern = dispersion_surface(Family::Bernoulli, &[0.2, 0.8], 0.5).unwrap();
        let cell = bern
            .iter()
            .find(|p| p.param1 == 0.2 && p.param2 == 0.8)
            .unwrap();
        assert!((cell.l_d + 0.8f64.ln()).abs() < 1e-10);
    }
}
