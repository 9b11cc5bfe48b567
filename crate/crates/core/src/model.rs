//! Problem data: market/chain/preference parameters, the power utility,
//! the signal cost family with its closed-form inverse, and the Gaussian
//! signal-noise model with its quadrature rule.

use thiserror::Error;

/// Tolerance for "sums to one" checks on probability vectors and weights.
pub const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("utility undefined for negative wealth {0}")]
    NegativeWealth(f64),
    #[error("signal quality must lie in [0,1), got {0}")]
    QualityOutOfRange(f64),
    #[error("purchase of quality {quality} costs {cost} but wealth is only {wealth}")]
    InfeasiblePurchase { quality: f64, cost: f64, wealth: f64 },
    #[error("probability vector must be non-negative and sum to 1 (err {0:e})")]
    NotASimplexPoint(f64),
}

fn check(cond: bool, name: &'static str, reason: String) -> Result<(), ModelError> {
    if cond {
        Ok(())
    } else {
        Err(ModelError::InvalidParameter { name, reason })
    }
}

/// Market, chain and preference parameters. Immutable after construction;
/// all validation happens in [`ModelParams::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Per-regime drift of the risky asset (1/time), one entry per regime.
    pub mu: Vec<f64>,
    /// Volatility of the risky asset (1/sqrt(time)), strictly positive.
    pub sigma: f64,
    /// Generator matrix of the hidden chain, row-major N x N. Rows sum to
    /// zero, off-diagonal entries are non-negative.
    pub q_matrix: Vec<f64>,
    /// Investment horizon (time), strictly positive.
    pub horizon: f64,
    /// Relative risk aversion of the power utility, in (0,1).
    pub risk_aversion: f64,
    /// Lower bound of the admissible trading fraction, `pi_lo <= 0`.
    pub pi_lo: f64,
    /// Upper bound of the admissible trading fraction, `pi_hi >= 0`.
    pub pi_hi: f64,
    /// Initial regime law, a point of the probability simplex.
    pub p0: Vec<f64>,
}

impl ModelParams {
    pub fn new(
        mu: Vec<f64>,
        sigma: f64,
        q_matrix: Vec<f64>,
        horizon: f64,
        risk_aversion: f64,
        pi_lo: f64,
        pi_hi: f64,
        p0: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let n = mu.len();
        check(n >= 1, "mu", "need at least one regime".into())?;
        check(sigma > 0.0, "sigma", format!("must be > 0, got {sigma}"))?;
        check(horizon > 0.0, "horizon", format!("must be > 0, got {horizon}"))?;
        check(
            risk_aversion > 0.0 && risk_aversion < 1.0,
            "risk_aversion",
            format!("must lie in (0,1), got {risk_aversion}"),
        )?;
        check(
            q_matrix.len() == n * n,
            "q_matrix",
            format!("expected {n}x{n} entries, got {}", q_matrix.len()),
        )?;
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..n {
                let v = q_matrix[i * n + j];
                if i != j {
                    check(v >= 0.0, "q_matrix", format!("off-diagonal entry ({i},{j}) = {v} < 0"))?;
                }
                row_sum += v;
            }
            check(
                row_sum.abs() <= 1e-10,
                "q_matrix",
                format!("row {i} sums to {row_sum:e}, expected 0"),
            )?;
        }
        check(
            pi_lo < pi_hi && pi_lo <= 0.0 && pi_hi >= 0.0,
            "pi_bounds",
            format!("need pi_lo < pi_hi with 0 in [pi_lo, pi_hi], got [{pi_lo}, {pi_hi}]"),
        )?;
        check(p0.len() == n, "p0", format!("expected {n} entries, got {}", p0.len()))?;
        let p0_sum: f64 = p0.iter().sum();
        check(
            p0.iter().all(|&x| x >= 0.0) && (p0_sum - 1.0).abs() <= SIMPLEX_TOL,
            "p0",
            format!("must be a simplex point, sum = {p0_sum}"),
        )?;
        Ok(Self { mu, sigma, q_matrix, horizon, risk_aversion, pi_lo, pi_hi, p0 })
    }

    pub fn n_regimes(&self) -> usize {
        self.mu.len()
    }

    /// Filtered drift `μᵀp`.
    pub fn filtered_drift(&self, p: &[f64]) -> f64 {
        self.mu.iter().zip(p).map(|(m, q)| m * q).sum()
    }

    /// `Qᵀp`, the drift of the belief process.
    pub fn generator_transpose_apply(&self, p: &[f64]) -> Vec<f64> {
        let n = self.n_regimes();
        let mut out = vec![0.0; n];
        for (j, o) in out.iter_mut().enumerate() {
            for i in 0..n {
                *o += self.q_matrix[i * n + j] * p[i];
            }
        }
        out
    }

    pub fn pi_abs_max(&self) -> f64 {
        self.pi_lo.abs().max(self.pi_hi.abs())
    }

    pub fn mu_abs_max(&self) -> f64 {
        self.mu.iter().fold(0.0_f64, |a, &m| a.max(m.abs()))
    }

    pub fn clamp_pi(&self, pi: f64) -> f64 {
        pi.clamp(self.pi_lo, self.pi_hi)
    }

    pub fn utility(&self) -> Utility {
        Utility { alpha: self.risk_aversion }
    }
}

/// Power utility `U(w) = w^(1-α) / (1-α)` on `[0, ∞)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Utility {
    pub alpha: f64,
}

impl Utility {
    /// Evaluates the utility; negative wealth is a domain error.
    pub fn eval(&self, w: f64) -> Result<f64, ModelError> {
        if w < 0.0 {
            return Err(ModelError::NegativeWealth(w));
        }
        Ok(self.eval_unchecked(w))
    }

    /// Evaluation for callers that already guarantee `w >= 0`.
    pub fn eval_unchecked(&self, w: f64) -> f64 {
        debug_assert!(w >= 0.0);
        w.powf(1.0 - self.alpha) / (1.0 - self.alpha)
    }
}

/// Signal cost family `K(t,q) = k0 + k1 · q/(1-q)`: time-independent,
/// strictly increasing and continuous in quality, bounded below by the
/// base fee `k0`, and diverging as `q ↑ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Base fee `k0 > 0` (wealth units); the cheapest possible purchase.
    pub k0: f64,
    /// Quality slope `k1 > 0` (wealth units).
    pub k1: f64,
}

impl CostModel {
    pub fn new(k0: f64, k1: f64) -> Result<Self, ModelError> {
        check(k0 > 0.0, "k0", format!("base fee must be > 0, got {k0}"))?;
        check(k1 > 0.0, "k1", format!("quality slope must be > 0, got {k1}"))?;
        Ok(Self { k0, k1 })
    }

    /// The minimum purchase cost `K(t,0) = k0`.
    pub fn k_min(&self) -> f64 {
        self.k0
    }

    /// `K(t,q)`. The time argument is kept for interface stability; this
    /// family is time-independent.
    pub fn cost(&self, _t: f64, q: f64) -> Result<f64, ModelError> {
        if !(0.0..1.0).contains(&q) {
            return Err(ModelError::QualityOutOfRange(q));
        }
        Ok(self.cost_unchecked(q))
    }

    pub fn cost_unchecked(&self, q: f64) -> f64 {
        debug_assert!((0.0..1.0).contains(&q));
        self.k0 + self.k1 * q / (1.0 - q)
    }

    /// The largest affordable quality `χ(t,w)`, i.e. the unique root of
    /// `K(t,·) = w`. Returns `None` when no purchase is affordable
    /// (`w < k0`: the feasible-quality set is empty).
    pub fn chi(&self, _t: f64, w: f64) -> Option<f64> {
        if w < self.k0 {
            return None;
        }
        let excess = w - self.k0;
        Some((excess / (excess + self.k1)).clamp(0.0, 1.0 - f64::EPSILON))
    }
}

/// Gaussian signal-noise model: centered normal density with scale
/// `std_dev` and a Gauss-Hermite quadrature rule for expectations of the
/// form `E[f(ε)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub std_dev: f64,
    /// Quadrature abscissae in noise units (ascending, symmetric about 0).
    pub quad_nodes: Vec<f64>,
    /// Quadrature weights, normalized to sum to 1.
    pub quad_weights: Vec<f64>,
}

impl NoiseModel {
    pub fn new(std_dev: f64, n_quad: usize) -> Result<Self, ModelError> {
        check(std_dev > 0.0, "std_dev", format!("must be > 0, got {std_dev}"))?;
        check(n_quad >= 1, "n_quad", "need at least one node".into())?;
        let (x, w) = gauss_hermite(n_quad);
        let scale = std::f64::consts::SQRT_2 * std_dev;
        let quad_nodes: Vec<f64> = x.iter().map(|&xi| scale * xi).collect();
        let total: f64 = w.iter().sum();
        let quad_weights: Vec<f64> = w.iter().map(|&wi| wi / total).collect();
        Ok(Self { std_dev, quad_nodes, quad_weights })
    }

    pub fn n_quad(&self) -> usize {
        self.quad_nodes.len()
    }

    /// `E[f(ε)]` by the stored rule.
    pub fn expectation(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.quad_nodes
            .iter()
            .zip(&self.quad_weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// Unnormalized log-density `-z²/(2·std²)`; additive constants cancel
    /// everywhere this is used (likelihood ratios).
    pub fn log_density_unnormalized(&self, z: f64) -> f64 {
        let u = z / self.std_dev;
        -0.5 * u * u
    }
}

/// Physicists' Gauss-Hermite rule: nodes and weights for
/// `∫ e^{-x²} f(x) dx ≈ Σ w_i f(x_i)`, nodes ascending.
///
/// Nodes are the eigenvalues of the Jacobi matrix (implicit-shift QL on the
/// symmetric tridiagonal with off-diagonals `sqrt(k/2)`), polished by a
/// Newton step on the orthonormal recurrence, which also yields the weights
/// `w_i = 2 / p'_n(x_i)²` without overflow at large `n`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut diag = vec![0.0_f64; n];
    let mut sub = vec![0.0_f64; n];
    for (k, s) in sub.iter_mut().enumerate().skip(1) {
        *s = (k as f64 / 2.0).sqrt();
    }
    tridiag_eigenvalues(&mut diag, &mut sub);
    diag.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut nodes = diag;
    let mut weights = vec![0.0_f64; n];
    for i in 0..n {
        let mut z = nodes[i];
        for _ in 0..10 {
            let (p1, d) = ortho_hermite(n, z);
            let dz = p1 / d;
            z -= dz;
            if dz.abs() <= 1e-15 * (1.0 + z.abs()) {
                break;
            }
        }
        let (_, pp) = ortho_hermite(n, z);
        nodes[i] = z;
        weights[i] = 2.0 / (pp * pp);
    }
    // enforce exact symmetry of the rule
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let a = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -a;
        nodes[j] = a;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Orthonormal Hermite polynomial (weight `e^{-x²}`) and its derivative at
/// `z`, evaluated by the normalized three-term recurrence, which keeps the
/// iterates O(1) even for large degree.
fn ortho_hermite(n: usize, z: f64) -> (f64, f64) {
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut p1 = pim4;
    let mut p2 = 0.0;
    for j in 0..n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}

/// Eigenvalues of a symmetric tridiagonal matrix (implicit-shift QL).
/// `diag` is overwritten with the eigenvalues; `sub[k]` is the entry
/// between rows k-1 and k (sub[0] unused).
fn tridiag_eigenvalues(diag: &mut [f64], sub: &mut [f64]) {
    let n = diag.len();
    if n == 1 {
        return;
    }
    // shift to e[i] = coupling between i and i+1
    let mut e = vec![0.0_f64; n];
    e[..n - 1].copy_from_slice(&sub[1..]);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = diag[m].abs() + diag[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter <= 64, "tridiagonal QL failed to converge");
            let mut g = (diag[l + 1] - diag[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = diag[m] - diag[l] + e[l] / (g + if g >= 0.0 { r } else { -r });
            let (mut s, mut c) = (1.0_f64, 1.0_f64);
            let mut p = 0.0_f64;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    diag[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = diag[i + 1] - p;
                f = (diag[i] - g) * s + 2.0 * c * b;
                p = s * f;
                diag[i + 1] = g + p;
                g = c * f - b;
            }
            if underflow {
                continue;
            }
            diag[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
}
