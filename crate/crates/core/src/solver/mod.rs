//! Backward finite-difference solution of the dynamic-programming
//! quasi-variational inequality on a (t, w, p) grid for two regimes.
//!
//! The equation is `min{ -V_t - max_π H(x,π,DV,D²V), V - M[V] } = 0` with
//! terminal data `V(T,w,p) = U(w)` and boundary `V(t,0,p) = 0`, where `M`
//! is the non-local intervention operator (best expected post-purchase
//! value over affordable signal qualities). The scheme is explicit in
//! time: a continuation update with upwind first derivatives, central
//! second derivatives and a sign-keyed seven-point cross stencil, followed
//! by obstacle sweeps at the same time level that iterate
//! `V <- max(V, M[V])` to a fixed point.

mod intervention;
mod scheme;
mod verify;

pub use intervention::{intervention_value, InterventionKernel};
pub use scheme::SchemeCoef;
pub use verify::{verify_solution, InvariantReport, VerifyLevels};

use crate::model::{CostModel, ModelError, ModelParams, NoiseModel, Utility};
use crate::policy::{Policy, Region};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum SolverError {
    #[error("the grid solver supports exactly two regimes, got {0}")]
    UnsupportedRegimes(usize),
    #[error(
        "CFL violation: grid dt {dt:.6e} exceeds the stable explicit step {dt_max:.6e}; \
         need n_t >= {required_n_t}"
    )]
    CflViolation { dt: f64, dt_max: f64, required_n_t: usize },
    #[error(
        "obstacle sweep did not converge at time level {level} after {sweeps} sweeps \
         (last change {change:.3e})"
    )]
    ObstacleDiverged { level: usize, sweeps: usize, change: f64 },
    #[error("non-finite value at time level {level}, node (iw={iw}, ip={ip})")]
    NumericalBlowup { level: usize, iw: usize, ip: usize },
    #[error("grid spec: {0}")]
    BadGrid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Uniform axis `lo + i*step`, `i = 0..n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformAxis {
    pub lo: f64,
    pub step: f64,
    pub n: usize,
}

impl UniformAxis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        assert!(n >= 2 && hi > lo);
        Self { lo, step: (hi - lo) / (n - 1) as f64, n }
    }

    pub fn value(&self, i: usize) -> f64 {
        self.lo + self.step * i as f64
    }

    pub fn hi(&self) -> f64 {
        self.value(self.n - 1)
    }

    /// Cell index and fraction for interpolation; clamps to the domain and
    /// reports whether clamping moved the query.
    pub fn locate(&self, x: f64) -> (usize, f64, bool) {
        let u = (x - self.lo) / self.step;
        if u <= 0.0 {
            return (0, 0.0, u < -1e-12);
        }
        let max_u = (self.n - 1) as f64;
        if u >= max_u {
            return (self.n - 2, 1.0, u > max_u + 1e-12);
        }
        let k = (u.floor() as usize).min(self.n - 2);
        (k, u - k as f64, false)
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.value(i)).collect()
    }
}

/// Grid dimensions and extents for the solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub n_t: usize,
    pub n_w: usize,
    pub n_p: usize,
    pub horizon: f64,
    pub w_max: f64,
}

impl GridSpec {
    pub fn new(
        n_t: usize,
        n_w: usize,
        n_p: usize,
        horizon: f64,
        w_max: f64,
    ) -> Result<Self, SolverError> {
        if n_t < 2 || n_w < 3 || n_p < 2 {
            return Err(SolverError::BadGrid(format!(
                "need n_t >= 2, n_w >= 3, n_p >= 2; got {n_t}x{n_w}x{n_p}"
            )));
        }
        if !(horizon > 0.0) || !(w_max > 0.0) {
            return Err(SolverError::BadGrid(format!(
                "horizon and w_max must be positive, got {horizon}, {w_max}"
            )));
        }
        Ok(Self { n_t, n_w, n_p, horizon, w_max })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / (self.n_t - 1) as f64
    }

    pub fn t_axis(&self) -> UniformAxis {
        UniformAxis::new(0.0, self.horizon, self.n_t)
    }

    pub fn w_axis(&self) -> UniformAxis {
        UniformAxis::new(0.0, self.w_max, self.n_w)
    }

    pub fn p_axis(&self) -> UniformAxis {
        UniformAxis::new(0.0, 1.0, self.n_p)
    }

    pub fn level_len(&self) -> usize {
        self.n_w * self.n_p
    }
}

/// Discretized value function over (t, w, p), row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    /// Canonical hash of the generating configuration; set before
    /// persisting, empty for in-memory grids.
    pub params_hash: String,
}

impl ValueGrid {
    pub fn level(&self, it: usize) -> &[f64] {
        let len = self.spec.level_len();
        &self.values[it * len..(it + 1) * len]
    }

    pub fn at(&self, it: usize, iw: usize, ip: usize) -> f64 {
        self.values[(it * self.spec.n_w + iw) * self.spec.n_p + ip]
    }

    /// Trilinear interpolation; clamps out-of-domain queries to the nearest
    /// face and reports the clamp.
    pub fn interp(&self, t: f64, w: f64, p: f64) -> (f64, bool) {
        let (it, ft, c1) = self.spec.t_axis().locate(t);
        let (iw, fw, c2) = self.spec.w_axis().locate(w);
        let (ip, fp, c3) = self.spec.p_axis().locate(p);
        let mut acc = 0.0;
        for (dt_, wt_) in [(0, 1.0 - ft), (1, ft)] {
            for (dw_, ww_) in [(0, 1.0 - fw), (1, fw)] {
                for (dp_, wp_) in [(0, 1.0 - fp), (1, fp)] {
                    acc += wt_ * ww_ * wp_ * self.at(it + dt_, iw + dw_, ip + dp_);
                }
            }
        }
        (acc, c1 || c2 || c3)
    }
}

/// Closed-form bound `ψ(t,w) = (A + w^(1-β)/(1-β)) e^{C(T-t)}` dominating
/// the value function. Requires `C > (1-β)·π_max·μ_max`, `β ∈ (0, α]`, and
/// `ψ(T,·) ≥ U`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupersolutionBound {
    pub a_shift: f64,
    pub rate: f64,
    pub beta: f64,
    pub horizon: f64,
}

impl SupersolutionBound {
    /// Canonical member: `β = α`, `A = 0`, rate just above the
    /// Hamiltonian-inequality threshold.
    pub fn for_params(params: &ModelParams) -> Self {
        let threshold = (1.0 - params.risk_aversion) * params.pi_abs_max() * params.mu_abs_max();
        Self {
            a_shift: 0.0,
            rate: threshold * (1.0 + 1e-6) + 1e-12,
            beta: params.risk_aversion,
            horizon: params.horizon,
        }
    }

    pub fn validate(&self, params: &ModelParams) -> Result<(), ModelError> {
        let threshold = (1.0 - self.beta) * params.pi_abs_max() * params.mu_abs_max();
        if !(self.rate > threshold) {
            return Err(ModelError::InvalidParameter {
                name: "supersolution rate",
                reason: format!("need C > {threshold}, got {}", self.rate),
            });
        }
        if !(self.beta > 0.0 && self.beta <= params.risk_aversion) {
            return Err(ModelError::InvalidParameter {
                name: "supersolution beta",
                reason: format!("need beta in (0, alpha], got {}", self.beta),
            });
        }
        if self.beta == params.risk_aversion && self.a_shift < 0.0 {
            return Err(ModelError::InvalidParameter {
                name: "supersolution shift",
                reason: "need A >= 0 when beta = alpha".into(),
            });
        }
        Ok(())
    }

    pub fn psi(&self, t: f64, w: f64) -> f64 {
        (self.a_shift + w.powf(1.0 - self.beta) / (1.0 - self.beta))
            * (self.rate * (self.horizon - t)).exp()
    }
}

/// Hamiltonian of the full (1+N)-dimensional state: `f·r + ½ tr[ΣΣᵀ M]`
/// with drift `f = (πwμᵀp, Qᵀp)` and one-dimensional noise loading
/// `Σ = (πwσ, σ^p(p))`, so the trace collapses to `ΣᵀMΣ`.
pub fn hamiltonian(
    params: &ModelParams,
    w: f64,
    p: &[f64],
    pi: f64,
    grad: &[f64],
    hess: &[f64],
) -> f64 {
    let n = params.n_regimes();
    debug_assert_eq!(p.len(), n);
    debug_assert_eq!(grad.len(), 1 + n);
    debug_assert_eq!(hess.len(), (1 + n) * (1 + n));
    let m = params.filtered_drift(p);
    let fp = params.generator_transpose_apply(p);
    let sig_w = pi * w * params.sigma;
    let mut sig = Vec::with_capacity(1 + n);
    sig.push(sig_w);
    for i in 0..n {
        sig.push((params.mu[i] - m) * p[i] / params.sigma);
    }
    let mut h = pi * w * m * grad[0];
    for i in 0..n {
        h += fp[i] * grad[1 + i];
    }
    let d = 1 + n;
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            quad += sig[i] * sig[j] * hess[i * d + j];
        }
    }
    h + 0.5 * quad
}

/// Maximizes the Hamiltonian over the trading constraint. `H` is quadratic
/// in π; the maximum is attained at an endpoint or, when the quadratic
/// coefficient is negative, at the clamped stationary point. Ties resolve
/// to the smaller |π|.
pub fn maximize_hamiltonian(
    params: &ModelParams,
    w: f64,
    p: &[f64],
    grad: &[f64],
    hess: &[f64],
) -> (f64, f64) {
    let h0 = hamiltonian(params, w, p, 0.0, grad, hess);
    let h1 = hamiltonian(params, w, p, 1.0, grad, hess);
    let hm1 = hamiltonian(params, w, p, -1.0, grad, hess);
    // h(pi) = h0 + a*pi + b*pi^2
    let b = 0.5 * (h1 + hm1) - h0;
    let a = 0.5 * (h1 - hm1);
    let mut cands = vec![params.pi_lo, params.pi_hi];
    if b < 0.0 {
        cands.push(params.clamp_pi(-a / (2.0 * b)));
    }
    let eval = |pi: f64| h0 + a * pi + b * pi * pi;
    let mut best_pi = cands[0];
    let mut best_h = eval(best_pi);
    for &pi in &cands[1..] {
        let h = eval(pi);
        if h > best_h || (h == best_h && better_tie(pi, best_pi)) {
            best_h = h;
            best_pi = pi;
        }
    }
    (best_pi, best_h)
}

/// Deterministic tie rule for π argmaxes: smaller |π|, then smaller π.
pub(crate) fn better_tie(candidate: f64, incumbent: f64) -> bool {
    let (ca, ia) = (candidate.abs(), incumbent.abs());
    ca < ia || (ca == ia && candidate < incumbent)
}

/// Solver knobs. Tolerances are pinned by configuration, not hard-coded in
/// the kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveSettings {
    pub n_q: usize,
    pub obstacle_tol: f64,
    pub cfl_safety: f64,
    pub region_tol: f64,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self { n_q: 41, obstacle_tol: 1e-9, cfl_safety: 0.9, region_tol: 1e-8 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    pub dt: f64,
    pub dt_max: f64,
    pub total_sweeps: usize,
    pub max_sweeps_per_level: usize,
    /// Node updates where the obstacle strictly raised the value.
    pub lifted_nodes: u64,
    /// Nodes where the cross-term stencil failed its positive-coefficient
    /// inclusion test and was dropped.
    pub cross_dropped: u64,
    pub wall_ms: u128,
}

pub struct Solution {
    pub grid: ValueGrid,
    pub policy: Policy,
    pub stats: SolveStats,
}

/// Solves the quasi-variational inequality backward from the terminal
/// condition and extracts the feedback policy.
pub fn solve_hjbqvi(
    params: &ModelParams,
    cost: &CostModel,
    noise: &NoiseModel,
    spec: GridSpec,
    settings: &SolveSettings,
) -> Result<Solution, SolverError> {
    let start = std::time::Instant::now();
    if params.n_regimes() != 2 {
        return Err(SolverError::UnsupportedRegimes(params.n_regimes()));
    }
    let coef = SchemeCoef::new(params, &spec);
    let dt = spec.dt();
    let dt_max = settings.cfl_safety / coef.max_rate();
    if dt > dt_max {
        let required_n_t = (spec.horizon / dt_max).ceil() as usize + 1;
        return Err(SolverError::CflViolation { dt, dt_max, required_n_t });
    }
    let kernel = InterventionKernel::new(params, cost, noise, &spec, settings.n_q);

    let level_len = spec.level_len();
    let mut values = vec![0.0_f64; spec.n_t * level_len];
    let util = Utility { alpha: params.risk_aversion };
    let w_axis = spec.w_axis();
    {
        let terminal = &mut values[(spec.n_t - 1) * level_len..];
        for iw in 0..spec.n_w {
            let u = util.eval_unchecked(w_axis.value(iw));
            for ip in 0..spec.n_p {
                terminal[iw * spec.n_p + ip] = u;
            }
        }
    }

    let mut stats = SolveStats { dt, dt_max, ..Default::default() };
    let sweep_cap = (spec.w_max / cost.k_min()).ceil() as usize + 4;
    let internal_tol = 0.5 * settings.obstacle_tol;

    let mut tilde = vec![0.0_f64; level_len];
    let mut cross_dropped = 0u64;

    for it in (0..spec.n_t - 1).rev() {
        let (head, tail) = values.split_at_mut((it + 1) * level_len);
        let next = &tail[..level_len];
        let cur = &mut head[it * level_len..];

        cross_dropped += coef.continuation_step(next, &mut tilde, dt, None);

        cur.copy_from_slice(&tilde);
        let mut sweeps = 0usize;
        loop {
            let change = kernel.sweep_once(cur, &mut stats.lifted_nodes);
            sweeps += 1;
            if change <= internal_tol {
                break;
            }
            if sweeps > sweep_cap {
                return Err(SolverError::ObstacleDiverged { level: it, sweeps, change });
            }
        }
        stats.total_sweeps += sweeps;
        stats.max_sweeps_per_level = stats.max_sweeps_per_level.max(sweeps);

        for ip in 0..spec.n_p {
            cur[ip] = 0.0;
        }
        if let Some(bad) = cur.iter().position(|v| !v.is_finite()) {
            return Err(SolverError::NumericalBlowup {
                level: it,
                iw: bad / spec.n_p,
                ip: bad % spec.n_p,
            });
        }
    }
    stats.cross_dropped = cross_dropped;

    let grid = ValueGrid { spec, values, params_hash: String::new() };
    let policy = extract_policy(params, cost, noise, &grid, settings);
    stats.wall_ms = start.elapsed().as_millis();
    Ok(Solution { grid, policy, stats })
}

/// Recomputes the feedback maps from a solved grid: per node the
/// Hamiltonian argmax, the intervention value with its argmax quality, the
/// obstacle gap, and the region label.
pub fn extract_policy(
    params: &ModelParams,
    cost: &CostModel,
    noise: &NoiseModel,
    grid: &ValueGrid,
    settings: &SolveSettings,
) -> Policy {
    let spec = grid.spec;
    let coef = SchemeCoef::new(params, &spec);
    let kernel = InterventionKernel::new(params, cost, noise, &spec, settings.n_q);
    let level_len = spec.level_len();
    let n_nodes = spec.n_t * level_len;

    let mut pi_hat = vec![0.0_f64; n_nodes];
    let mut q_hat = vec![0.0_f64; n_nodes];
    let mut gap = vec![0.0_f64; n_nodes];
    let mut region = vec![Region::Continue; n_nodes];

    pi_hat
        .par_chunks_mut(level_len)
        .zip(q_hat.par_chunks_mut(level_len))
        .zip(gap.par_chunks_mut(level_len))
        .zip(region.par_chunks_mut(level_len))
        .enumerate()
        .for_each(|(it, (((pi_l, q_l), gap_l), reg_l))| {
            let v = grid.level(it);
            let mut scratch = vec![0.0_f64; level_len];
            coef.continuation_step(v, &mut scratch, 0.0, Some(pi_l));
            let mut m_l = vec![0.0_f64; level_len];
            kernel.eval_full(v, &mut m_l, q_l);
            for i in 0..level_len {
                gap_l[i] = v[i] - m_l[i];
                reg_l[i] =
                    if gap_l[i] <= settings.region_tol { Region::Purchase } else { Region::Continue };
            }
        });

    Policy {
        spec,
        region,
        pi_hat,
        q_hat,
        gap,
        cost: *cost,
        pi_lo: params.pi_lo,
        pi_hi: params.pi_hi,
        region_tol: settings.region_tol,
        params_hash: grid.params_hash.clone(),
    }
}
