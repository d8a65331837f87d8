//! Exponential-family kernel.
//!
//! Densities are handled in natural form, `p_η(z) = h(z)·exp(<η, φ(z)> − A(η))`,
//! with the log-partition function `A` and its gradient available in closed
//! form for the three supported families:
//!
//! * diagonal Gaussian — per dimension `φ(z) = [z, z²]`,
//!   `η = [μ/σ², −1/(2σ²)]`, `A = −η₁²/(4η₂) − ½ln(−2η₂)`;
//! * Bernoulli — per dimension `η = ln(p/(1−p))`, `A = ln(1+e^η)`;
//! * categorical in minimal representation — K−1 parameters
//!   `η_i = ln(p_i/p_0)`, `A = ln(1 + Σ e^{η_i})`.
//!
//! The minimal categorical representation keeps `A` strictly convex, which the
//! dispersion-term nonnegativity argument relies on. Unlike the bare natural
//! form, `log_density` includes the base measure (−½ln2π per Gaussian
//! dimension) so values agree with textbook densities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, sigmoid, softplus};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Clamp applied to Bernoulli success probabilities on construction.
pub const BERNOULLI_PROB_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    /// Diagonal-covariance Gaussian; 2 natural parameters per dimension.
    GaussianDiag,
    /// Product of independent Bernoullis; 1 natural parameter per dimension.
    Bernoulli,
    /// Single categorical over K outcomes; K−1 natural parameters.
    Categorical,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianDiag => "gaussian-diag",
            Family::Bernoulli => "bernoulli",
            Family::Categorical => "categorical",
        }
    }
}

/// Natural parameters η of one exponential-family distribution.
///
/// For `GaussianDiag` the layout is interleaved per dimension:
/// `[η1_0, η2_0, η1_1, η2_1, ...]` with every `η2 < 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalParams {
    family: Family,
    values: Vec<f64>,
}

impl NaturalParams {
    pub fn new(family: Family, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("empty natural parameter vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite natural parameter".into()));
        }
        if family == Family::GaussianDiag {
            if values.len() % 2 != 0 {
                return Err(Error::Domain(
                    "gaussian-diag needs an even number of natural parameters".into(),
                ));
            }
            if values.iter().skip(1).step_by(2).any(|&n2| n2 >= 0.0) {
                return Err(Error::Domain(
                    "gaussian-diag second natural parameter must be negative".into(),
                ));
            }
        }
        Ok(Self { family, values })
    }

    pub fn gaussian_diag(values: Vec<f64>) -> Result<Self> {
        Self::new(Family::GaussianDiag, values)
    }

    pub fn bernoulli(values: Vec<f64>) -> Result<Self> {
        Self::new(Family::Bernoulli, values)
    }

    /// Minimal representation over K outcomes: pass the K−1 parameters
    /// `ln(p_i/p_0)` for i = 1..K.
    pub fn categorical(values: Vec<f64>) -> Result<Self> {
        Self::new(Family::Categorical, values)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of natural parameters (= number of sufficient statistics).
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Length of a sample point `z` for this distribution.
    pub fn sample_len(&self) -> usize {
        match self.family {
            Family::GaussianDiag => self.values.len() / 2,
            Family::Bernoulli | Family::Categorical => self.values.len(),
        }
    }

    /// Log-partition function A(η), summed over dimensions.
    pub fn log_partition(&self) -> f64 {
        match self.family {
            Family::GaussianDiag => self
                .values
                .chunks_exact(2)
                .map(|p| {
                    let (n1, n2) = (p[0], p[1]);
                    -n1 * n1 / (4.0 * n2) - 0.5 * (-2.0 * n2).ln()
                })
                .sum(),
            Family::Bernoulli => self.values.iter().map(|&n| softplus(n)).sum(),
            Family::Categorical => {
                // ln(1 + Σ e^{η_i}); include the reference outcome's e^0.
                let mut terms = Vec::with_capacity(self.values.len() + 1);
                terms.push(0.0);
                terms.extend_from_slice(&self.values);
                log_sum_exp(&terms)
            }
        }
    }

    /// ∇A(η): the expected sufficient statistics.
    ///
    /// Gaussian per dimension: `[μ, μ² + σ²]`; Bernoulli: `sigmoid(η)`;
    /// categorical: the non-reference outcome probabilities.
    pub fn grad_log_partition(&self) -> Vec<f64> {
        match self.family {
            Family::GaussianDiag => {
                let mut g = Vec::with_capacity(self.values.len());
                for p in self.values.chunks_exact(2) {
                    let var = -1.0 / (2.0 * p[1]);
                    let mu = p[0] * var;
                    g.push(mu);
                    g.push(mu * mu + var);
                }
                g
            }
            Family::Bernoulli => self.values.iter().map(|&n| sigmoid(n)).collect(),
            Family::Categorical => {
                let a = self.log_partition();
                self.values.iter().map(|&n| (n - a).exp()).collect()
            }
        }
    }

    /// Log-density at `z`, base measure included.
    ///
    /// For the Gaussian family this equals the usual diagonal-normal log-pdf;
    /// for Bernoulli/categorical the base measure is the counting measure, so
    /// the value is `<η, φ(z)> − A(η)` with `φ(z) = z`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.sample_len() {
            return Err(Error::Shape {
                expected: self.sample_len(),
                got: z.len(),
            });
        }
        let a = self.log_partition();
        match self.family {
            Family::GaussianDiag => {
                let mut dot = 0.0;
                for (d, p) in self.values.chunks_exact(2).enumerate() {
                    dot += p[0] * z[d] + p[1] * z[d] * z[d];
                }
                Ok(dot - a - HALF_LN_2PI * z.len() as f64)
            }
            Family::Bernoulli | Family::Categorical => {
                let dot: f64 = self.values.iter().zip(z).map(|(n, zi)| n * zi).sum();
                Ok(dot - a)
            }
        }
    }
}

/// Mean parameterization of a diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMeanParams {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianMeanParams {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::Shape {
                expected: mean.len(),
                got: variance.len(),
            });
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Domain("non-finite mean".into()));
        }
        if variance.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Domain("variance must be positive".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log-pdf of the diagonal Gaussian at `z`.
    pub fn log_pdf(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                got: z.len(),
            });
        }
        let mut ll = 0.0;
        for d in 0..self.dim() {
            let r = z[d] - self.mean[d];
            ll += -0.5 * r * r / self.variance[d] - 0.5 * self.variance[d].ln() - HALF_LN_2PI;
        }
        Ok(ll)
    }
}

/// Mean parameterization of a product of Bernoullis; probabilities are
/// clamped to `[1e-10, 1 - 1e-10]` on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliMeanParams {
    p: Vec<f64>,
}

impl BernoulliMeanParams {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Domain("empty probability vector".into()));
        }
        if p.iter().any(|x| !x.is_finite() || *x < 0.0 || *x > 1.0) {
            return Err(Error::Domain("probability outside [0, 1]".into()));
        }
        let p = p
            .into_iter()
            .map(|x| x.clamp(BERNOULLI_PROB_CLAMP, 1.0 - BERNOULLI_PROB_CLAMP))
            .collect();
        Ok(Self { p })
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }
}

/// `[μ/σ², −1/(2σ²)]` per dimension, interleaved.
pub fn gaussian_to_natural(m: &GaussianMeanParams) -> Result<NaturalParams> {
    if m.variance.iter().any(|v| *v <= 0.0) {
        return Err(Error::Domain("variance must be positive".into()));
    }
    let mut values = Vec::with_capacity(2 * m.dim());
    for d in 0..m.dim() {
        values.push(m.mean[d] / m.variance[d]);
        values.push(-1.0 / (2.0 * m.variance[d]));
    }
    NaturalParams::gaussian_diag(values)
}

/// Inverse of [`gaussian_to_natural`]: `σ² = −1/(2η₂)`, `μ = η₁σ²`.
pub fn natural_to_gaussian(n: &NaturalParams) -> Result<GaussianMeanParams> {
    if n.family() != Family::GaussianDiag {
        return Err(Error::UnsupportedFamily(n.family().name()));
    }
    let dim = n.sample_len();
    let mut mean = Vec::with_capacity(dim);
    let mut variance = Vec::with_capacity(dim);
    for p in n.values().chunks_exact(2) {
        if p[1] >= 0.0 {
            return Err(Error::Domain(
                "gaussian-diag second natural parameter must be negative".into(),
            ));
        }
        let var = -1.0 / (2.0 * p[1]);
        variance.push(var);
        mean.push(p[0] * var);
    }
    GaussianMeanParams::new(mean, variance)
}

/// `η = ln(p/(1−p))` per dimension.
pub fn bernoulli_to_natural(m: &BernoulliMeanParams) -> Result<NaturalParams> {
    NaturalParams::bernoulli(m.p().iter().map(|&p| (p / (1.0 - p)).ln()).collect())
}

pub fn natural_to_bernoulli(n: &NaturalParams) -> Result<BernoulliMeanParams> {
    if n.family() != Family::Bernoulli {
        return Err(Error::UnsupportedFamily(n.family().name()));
    }
    BernoulliMeanParams::new(n.values().iter().map(|&e| sigmoid(e)).collect())
}

/// Closed-form KL divergence between diagonal Gaussians, summed over
/// dimensions. Zero iff `q` and `p` coincide elementwise.
pub fn kl_gaussian(q: &GaussianMeanParams, p: &GaussianMeanParams) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Shape {
            expected: q.dim(),
            got: p.dim(),
        });
    }
    if q.variance.iter().chain(&p.variance).any(|v| *v <= 0.0) {
        return Err(Error::Domain("variance must be positive".into()));
    }
    let mut kl = 0.0;
    for d in 0..q.dim() {
        let (vq, vp) = (q.variance[d], p.variance[d]);
        let dm = q.mean[d] - p.mean[d];
        kl += 0.5 * ((vp / vq).ln() + (vq + dm * dm) / vp - 1.0);
    }
    Ok(kl)
}

/// Reparameterized sample `μ + σ·noise`; deterministic given the noise.
pub fn sample_gaussian(m: &GaussianMeanParams, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != m.dim() {
        return Err(Error::Shape {
            expected: m.dim(),
            got: noise.len(),
        });
    }
    Ok((0..m.dim())
        .map(|d| m.mean[d] + m.variance[d].sqrt() * noise[d])
        .collect())
}
