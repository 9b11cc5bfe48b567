//! Wonham-filter algebra: belief drift and diffusion between signal
//! arrivals, the Bayes update applied when a signal is observed, and the
//! full state jump map for a purchase.

use crate::model::{CostModel, ModelError, ModelParams, NoiseModel, SIMPLEX_TOL};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Conditional regime probabilities; a point of the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    p: Vec<f64>,
}

impl Belief {
    /// Validating constructor; rejects vectors off the simplex.
    pub fn new(p: Vec<f64>) -> Result<Self, ModelError> {
        let sum: f64 = p.iter().sum();
        let err = (sum - 1.0).abs();
        if p.iter().any(|&x| !(0.0..=1.0 + SIMPLEX_TOL).contains(&x)) || err > SIMPLEX_TOL {
            return Err(ModelError::NotASimplexPoint(err.max(0.0)));
        }
        Ok(Self { p })
    }

    /// Projects a raw vector back onto the simplex: clamps negatives at
    /// zero and renormalizes. Restores the invariant after floating-point
    /// drift in SDE steps.
    pub fn project(mut p: Vec<f64>) -> Self {
        let mut sum = 0.0;
        for x in p.iter_mut() {
            if *x < 0.0 || !x.is_finite() {
                *x = 0.0;
            }
            sum += *x;
        }
        if sum <= 0.0 {
            let n = p.len() as f64;
            for x in p.iter_mut() {
                *x = 1.0 / n;
            }
        } else {
            for x in p.iter_mut() {
                *x /= sum;
            }
        }
        Self { p }
    }

    /// Point mass on regime `n`.
    pub fn certain(n_regimes: usize, n: usize) -> Self {
        let mut p = vec![0.0; n_regimes];
        p[n] = 1.0;
        Self { p }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.p
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    fn single_support(&self) -> Option<usize> {
        let mut found = None;
        for (i, &x) in self.p.iter().enumerate() {
            if x > 0.0 {
                if found.is_some() {
                    return None;
                }
                found = Some(i);
            }
        }
        found
    }
}

/// Full filtered state `x = (w, p)`: wealth plus belief.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub w: f64,
    pub p: Belief,
}

impl State {
    pub fn new(w: f64, p: Belief) -> Result<Self, ModelError> {
        if w < 0.0 {
            return Err(ModelError::NegativeWealth(w));
        }
        Ok(Self { w, p })
    }
}

/// Belief drift `Qᵀp`; tangent to the simplex (components sum to zero).
pub fn belief_drift(params: &ModelParams, p: &Belief) -> Vec<f64> {
    params.generator_transpose_apply(p.as_slice())
}

/// Belief diffusion: component `n` equals `(μⁿ - μᵀp) pⁿ / σ`; tangent to
/// the simplex.
pub fn belief_diffusion(params: &ModelParams, p: &Belief) -> Vec<f64> {
    let m = params.filtered_drift(p.as_slice());
    p.as_slice()
        .iter()
        .zip(&params.mu)
        .map(|(&pn, &mun)| (mun - m) * pn / params.sigma)
        .collect()
}

/// Per-regime unnormalized log-likelihoods of observing signal value `z`
/// at quality `q`: `log φ((z - q μⁿ)/(1-q))` up to an additive constant.
fn signal_log_likelihoods(params: &ModelParams, noise: &NoiseModel, z: f64, q: f64) -> Vec<f64> {
    let scale = 1.0 - q;
    params
        .mu
        .iter()
        .map(|&mun| noise.log_density_unnormalized((z - q * mun) / scale))
        .collect()
}

/// Bayes update of the belief after observing a signal of value `z` and
/// quality `q`. Evaluated in log space with a max shift so that extreme
/// qualities (arguments blowing up as `q ↑ 1`) cannot underflow the
/// likelihoods all at once. Zero components stay zero; the output is
/// renormalized exactly.
pub fn bayes_update(
    params: &ModelParams,
    noise: &NoiseModel,
    z: f64,
    p: &Belief,
    q: f64,
) -> Result<Belief, ModelError> {
    if !(0.0..1.0).contains(&q) {
        return Err(ModelError::QualityOutOfRange(q));
    }
    if q == 0.0 {
        // the density factor cancels: pure noise carries no information
        return Ok(p.clone());
    }
    if p.single_support().is_some() {
        return Ok(p.clone());
    }
    let logl = signal_log_likelihoods(params, noise, z, q);
    let shift = logl
        .iter()
        .zip(p.as_slice())
        .filter(|(_, &pn)| pn > 0.0)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logl
        .iter()
        .zip(p.as_slice())
        .map(|(&l, &pn)| if pn > 0.0 { pn * (l - shift).exp() } else { 0.0 })
        .collect();
    Ok(Belief::project(raw))
}

/// Multiplicative form of the Bayes update: `Ξⁿ - pⁿ = ζⁿ pⁿ` with
/// `ζⁿ = φₙ / Σₘ φₘ pᵐ - 1`.
pub fn zeta(
    params: &ModelParams,
    noise: &NoiseModel,
    z: f64,
    p: &Belief,
    q: f64,
) -> Result<Vec<f64>, ModelError> {
    if !(0.0..1.0).contains(&q) {
        return Err(ModelError::QualityOutOfRange(q));
    }
    let n = p.len();
    if q == 0.0 || p.single_support().is_some() {
        return Ok(vec![0.0; n]);
    }
    let logl = signal_log_likelihoods(params, noise, z, q);
    let shift = logl
        .iter()
        .zip(p.as_slice())
        .filter(|(_, &pn)| pn > 0.0)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let den: f64 = logl
        .iter()
        .zip(p.as_slice())
        .map(|(&l, &pn)| if pn > 0.0 { pn * (l - shift).exp() } else { 0.0 })
        .sum();
    Ok(logl.iter().map(|&l| (l - shift).exp() / den - 1.0).collect())
}

/// State jump for a purchase of quality `q` at signal value `z`: wealth
/// drops by the cost, the belief takes the Bayes update.
pub fn jump_map(
    params: &ModelParams,
    cost: &CostModel,
    noise: &NoiseModel,
    z: f64,
    t: f64,
    x: &State,
    q: f64,
) -> Result<State, ModelError> {
    let k = cost.cost(t, q)?;
    if x.w < k {
        return Err(ModelError::InfeasiblePurchase { quality: q, cost: k, wealth: x.w });
    }
    let p = bayes_update(params, noise, z, &x.p, q)?;
    Ok(State { w: x.w - k, p })
}

/// Draws a signal value `Z = q μⁿ + (1-q) ε` for the true regime `n`.
pub fn sample_opinion<R: Rng + ?Sized>(
    params: &ModelParams,
    noise: &NoiseModel,
    q: f64,
    regime: usize,
    rng: &mut R,
) -> f64 {
    let normal = Normal::new(0.0, noise.std_dev).unwrap();
    let eps: f64 = normal.sample(rng);
    q * params.mu[regime] + (1.0 - q) * eps
}
