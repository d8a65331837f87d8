//! Small shared numeric helpers.

/// Probabilities are clamped to this floor before taking logs.
pub(crate) const PROB_FLOOR: f64 = 1e-10;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow at large |x|.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// ln(max(p, PROB_FLOOR)); keeps entropy-style sums finite at p = 0.
pub(crate) fn ln_clamped(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Shannon entropy in nats with clamped logs.
pub(crate) fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().map(|&p| p * ln_clamped(p)).sum::<f64>()
}
