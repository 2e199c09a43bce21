//! Softmax gate probabilities, binary-gate sampling, the architecture
//! gradient, post-update rescaling, and the latency-augmented loss.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

const SIMPLEX_TOL: f64 = 1e-9;
const MASS_CLAMP: f64 = 1e-6;

/// Softmax of the architecture parameters with max-subtraction.
pub fn compute_probs(alpha: &[f64]) -> Result<Vec<f64>> {
    if alpha.is_empty() {
        return Err(Error::Invalid("empty architecture vector".into()));
    }
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite { context: format!("architecture parameters {alpha:?}") });
    }
    let max = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = alpha.iter().map(|a| (a - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

fn check_simplex(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || (sum - 1.0).abs() > SIMPLEX_TOL || p.iter().any(|v| !(*v >= -SIMPLEX_TOL)) {
        return Err(Error::Invalid(format!("probabilities off the simplex (sum {sum}): {p:?}")));
    }
    Ok(())
}

/// Inverse-CDF draw of an index from `p` (assumed on the simplex).
fn draw(p: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = p.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // u landed in rounding slack; return the last index with mass.
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

/// Samples a one-hot binary gate with `P(index n) = p[n]`.
pub fn sample_gate(p: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    check_simplex(p)?;
    let mut gate = vec![0.0; p.len()];
    gate[draw(p, rng)] = 1.0;
    Ok(gate)
}

/// Index of the hot entry of a one-hot gate.
pub fn gate_index(gate: &[f64]) -> usize {
    gate.iter().position(|&g| g == 1.0).expect("one-hot gate")
}

/// Two distinct candidates drawn without replacement proportionally to `p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActivePair {
    /// Smaller index.
    pub i: usize,
    /// Larger index.
    pub j: usize,
    /// `(p_i, p_j) / (p_i + p_j)`.
    pub q: [f64; 2],
}

pub fn sample_active_pair(p: &[f64], rng: &mut Rng) -> Result<ActivePair> {
    if p.len() < 2 {
        return Err(Error::Invalid(format!("pair sampling needs at least two candidates, got {}", p.len())));
    }
    check_simplex(p)?;
    let first = draw(p, rng);
    let mut rest = p.to_vec();
    rest[first] = 0.0;
    let second = if rest.iter().sum::<f64>() > 0.0 {
        draw(&rest, rng)
    } else {
        // All mass on one candidate: pick the partner uniformly.
        let k = rng.random_range(0..p.len() - 1);
        if k >= first {
            k + 1
        } else {
            k
        }
    };
    let (i, j) = if first < second { (first, second) } else { (second, first) };
    let mass = p[i] + p[j];
    let q = if mass > 0.0 { [p[i] / mass, p[j] / mass] } else { [0.5, 0.5] };
    Ok(ActivePair { i, j, q })
}

/// Gradient with respect to the architecture parameters from gate gradients:
/// `∂L/∂α_n = Σ_{n'} ∂L/∂b_{n'} · p_{n'} · (δ_{n n'} − p_n)`.
pub fn arch_gradient(dl_db: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    if dl_db.len() != p.len() {
        return Err(Error::shape("arch_gradient", format!("{} gate grads for {} probabilities", dl_db.len(), p.len())));
    }
    check_simplex(p)?;
    let weighted: f64 = dl_db.iter().zip(p).map(|(g, q)| g * q).sum();
    Ok(p.iter().zip(dl_db).map(|(pn, gn)| pn * gn - pn * weighted).collect())
}

/// How architecture parameters are adjusted after a two-path update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleRule {
    /// Shift the sampled pair so its total probability matches the
    /// pre-update mass, leaving the unsampled candidates untouched.
    #[default]
    PairMass,
    /// Normalize every entry so that `logsumexp(α) = 0`.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RescaleOutcome {
    pub shift: f64,
    /// The requested mass was degenerate and had to be clamped.
    pub clamped: bool,
}

/// Adds one constant to `alpha[i]` and `alpha[j]` such that, under softmax
/// over every entry, `p_i + p_j == pre_update_pair_mass`. The ratios among
/// the other candidates are untouched since their α do not move.
pub fn rescale_alphas(alpha: &mut [f64], pair: (usize, usize), pre_update_pair_mass: f64) -> Result<RescaleOutcome> {
    let (i, j) = pair;
    if i == j || i >= alpha.len() || j >= alpha.len() {
        return Err(Error::Invalid(format!("bad pair ({i}, {j}) for {} candidates", alpha.len())));
    }
    if alpha.len() == 2 {
        // The pair carries all the mass; any common shift leaves p unchanged.
        return Ok(RescaleOutcome { shift: 0.0, clamped: false });
    }
    let mut mass = pre_update_pair_mass;
    let mut clamped = false;
    if !(MASS_CLAMP..=1.0 - MASS_CLAMP).contains(&mass) {
        mass = mass.clamp(MASS_CLAMP, 1.0 - MASS_CLAMP);
        clamped = true;
    }
    let max = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut pair_sum = 0.0;
    let mut other_sum = 0.0;
    for (n, a) in alpha.iter().enumerate() {
        let e = (a - max).exp();
        if n == i || n == j {
            pair_sum += e;
        } else {
            other_sum += e;
        }
    }
    let shift = (mass / (1.0 - mass)).ln() + other_sum.ln() - pair_sum.ln();
    if !shift.is_finite() {
        return Err(Error::NonFinite { context: "rescale shift".into() });
    }
    alpha[i] += shift;
    alpha[j] += shift;
    Ok(RescaleOutcome { shift, clamped })
}

/// Shifts every entry by `-logsumexp(α)`; probabilities are unchanged.
pub fn normalize_alphas(alpha: &mut [f64]) -> f64 {
    let max = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + alpha.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
    alpha.iter_mut().for_each(|a| *a -= lse);
    -lse
}

/// Expected latency of one layer, `Σ p_n F_n`.
pub fn expected_layer_latency(p: &[f64], latencies: &[f64]) -> Result<f64> {
    if p.len() != latencies.len() {
        return Err(Error::shape(
            "expected_layer_latency",
            format!("{} probabilities, {} latencies", p.len(), latencies.len()),
        ));
    }
    Ok(p.iter().zip(latencies).map(|(a, b)| a * b).sum())
}

/// Gradient of `λ2 · Σ_n p_n(α) F_n` with respect to α.
pub fn latency_alpha_gradient(p: &[f64], latencies: &[f64], lambda2: f64) -> Result<Vec<f64>> {
    let scaled: Vec<f64> = latencies.iter().map(|f| lambda2 * f).collect();
    arch_gradient(&scaled, p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub weight_term: f64,
    pub latency_term: f64,
    pub total: f64,
}

/// Cross-entropy plus `λ1 · Σ‖w‖²` plus `λ2 · Σ_layers E[latency]`.
///
/// The weight term is reported for logging; training realizes it through
/// optimizer weight decay.
pub fn total_loss(
    ce: f64,
    weight_sq_norm: f64,
    layer_latencies: &[f64],
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown> {
    if ce < 0.0 || !ce.is_finite() {
        return Err(Error::Invalid(format!("cross-entropy must be finite and non-negative, got {ce}")));
    }
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::Invalid("loss coefficients must be non-negative".into()));
    }
    let weight_term = lambda1 * weight_sq_norm;
    let latency_term = lambda2 * layer_latencies.iter().sum::<f64>();
    Ok(LossBreakdown { ce, weight_term, latency_term, total: ce + weight_term + latency_term })
}
