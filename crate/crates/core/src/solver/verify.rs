//! Post-solve verification of the solved grid against the invariants the
//! scheme promises: exact terminal and zero-wealth data, non-negativity,
//! monotonicity in wealth, domination by the closed-form bound ψ, the
//! discrete equation residual, and the obstacle inequality re-checked with
//! fresh intervention evaluations.

use super::{
    GridSpec, InterventionKernel, SchemeCoef, SolveSettings, SupersolutionBound, ValueGrid,
};
use crate::model::{CostModel, ModelParams, NoiseModel, Utility};
use rayon::prelude::*;

/// Which time levels get a fresh full-grid intervention re-evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyLevels {
    All,
    /// Every k-th level plus both endpoints.
    Sampled(usize),
}

#[derive(Debug, Clone)]
pub struct InvariantReport {
    pub terminal_exact: bool,
    pub boundary_zero_exact: bool,
    /// Smallest grid value (must be >= 0).
    pub min_value: f64,
    /// Largest decrease of V along increasing w at fixed (t, p).
    pub max_w_decrease: f64,
    /// Largest V - ψ over the grid (must be <= slack).
    pub max_psi_excess: f64,
    /// Smallest discrete-equation residual `(V - tilde)/dt` over interior
    /// levels; non-negative up to rounding by construction.
    pub min_scheme_residual: f64,
    /// Smallest `V - M[V]` over the checked levels, fresh evaluation.
    pub min_obstacle_gap: f64,
    /// Largest min{scheme residual, obstacle gap} (complementarity: the
    /// equation should bind somewhere at every checked level).
    pub max_complementarity: f64,
    pub levels_checked: usize,
    pub obstacle_tol: f64,
    pub scheme_tol: f64,
    pub psi_slack: f64,
    pub monotone_slack: f64,
}

impl InvariantReport {
    /// Hard invariants only; the residual statistics are reported for the
    /// acceptance gate to judge at its own tolerances.
    pub fn pass(&self) -> bool {
        self.terminal_exact
            && self.boundary_zero_exact
            && self.min_value >= 0.0
            && self.max_w_decrease <= self.monotone_slack
            && self.max_psi_excess <= self.psi_slack
            && self.min_scheme_residual >= -self.scheme_tol
            && self.min_obstacle_gap >= -self.obstacle_tol
    }

    pub fn summary(&self) -> String {
        format!(
            "terminal_exact = {}\nboundary_zero_exact = {}\nmin_value = {:e}\n\
             max_w_decrease = {:e}\nmax_psi_excess = {:e}\nmin_scheme_residual = {:e}\n\
             min_obstacle_gap = {:e}\nmax_complementarity = {:e}\nlevels_checked = {}\npass = {}\n",
            self.terminal_exact,
            self.boundary_zero_exact,
            self.min_value,
            self.max_w_decrease,
            self.max_psi_excess,
            self.min_scheme_residual,
            self.min_obstacle_gap,
            self.max_complementarity,
            self.levels_checked,
            self.pass()
        )
    }
}

/// Scheme tolerance `O(dt + dw² + dp²)` with unit constant; the explicit
/// scheme's own residual is rounding-level, so this is generous.
pub fn scheme_tol(spec: &GridSpec) -> f64 {
    let dw = spec.w_axis().step;
    let dp = spec.p_axis().step;
    spec.dt() + dw * dw + dp * dp
}

pub fn verify_solution(
    params: &ModelParams,
    cost: &CostModel,
    noise: &NoiseModel,
    grid: &ValueGrid,
    settings: &SolveSettings,
    levels: VerifyLevels,
) -> InvariantReport {
    let spec = grid.spec;
    let level_len = spec.level_len();
    let util = Utility { alpha: params.risk_aversion };
    let w_axis = spec.w_axis();
    let scale = grid.values.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));

    // terminal and boundary data must hold exactly
    let terminal = grid.level(spec.n_t - 1);
    let mut terminal_exact = true;
    for iw in 0..spec.n_w {
        let u = util.eval_unchecked(w_axis.value(iw));
        for ip in 0..spec.n_p {
            if terminal[iw * spec.n_p + ip] != u {
                terminal_exact = false;
            }
        }
    }
    let mut boundary_zero_exact = true;
    for it in 0..spec.n_t {
        let lvl = grid.level(it);
        if lvl[..spec.n_p].iter().any(|&v| v != 0.0) {
            boundary_zero_exact = false;
        }
    }

    let min_value = grid.values.iter().fold(f64::INFINITY, |a, &b| a.min(b));

    let mut max_w_decrease = 0.0_f64;
    for it in 0..spec.n_t {
        let lvl = grid.level(it);
        for iw in 1..spec.n_w {
            for ip in 0..spec.n_p {
                let d = lvl[(iw - 1) * spec.n_p + ip] - lvl[iw * spec.n_p + ip];
                max_w_decrease = max_w_decrease.max(d);
            }
        }
    }

    let bound = SupersolutionBound::for_params(params);
    let t_axis = spec.t_axis();
    let mut max_psi_excess = f64::NEG_INFINITY;
    for it in 0..spec.n_t {
        let lvl = grid.level(it);
        let t = t_axis.value(it);
        for iw in 0..spec.n_w {
            let psi = bound.psi(t, w_axis.value(iw));
            for ip in 0..spec.n_p {
                max_psi_excess = max_psi_excess.max(lvl[iw * spec.n_p + ip] - psi);
            }
        }
    }

    // discrete residual: recompute the continuation update from the next
    // level and compare with the stored one
    let coef = SchemeCoef::new(params, &spec);
    let dt = spec.dt();
    let min_scheme_residual = (0..spec.n_t - 1)
        .into_par_iter()
        .map(|it| {
            let mut tilde = vec![0.0_f64; level_len];
            coef.continuation_step(grid.level(it + 1), &mut tilde, dt, None);
            let cur = grid.level(it);
            let mut worst = f64::INFINITY;
            // interior nodes only: w rows 1..n_w-1 (row 0 is pinned data,
            // the last row is the closure row)
            for iw in 1..spec.n_w - 1 {
                for ip in 0..spec.n_p {
                    let i = iw * spec.n_p + ip;
                    worst = worst.min((cur[i] - tilde[i]) / dt);
                }
            }
            worst
        })
        .reduce(|| f64::INFINITY, f64::min);

    // obstacle gap with fresh intervention evaluations
    let kernel = InterventionKernel::new(params, cost, noise, &spec, settings.n_q);
    let picked: Vec<usize> = match levels {
        VerifyLevels::All => (0..spec.n_t).collect(),
        VerifyLevels::Sampled(k) => {
            let k = k.max(1);
            let mut v: Vec<usize> = (0..spec.n_t).step_by(k).collect();
            if *v.last().unwrap() != spec.n_t - 1 {
                v.push(spec.n_t - 1);
            }
            v
        }
    };
    let per_level: Vec<(f64, f64)> = picked
        .par_iter()
        .map(|&it| {
            let lvl = grid.level(it);
            let mut m = vec![0.0_f64; level_len];
            let mut q = vec![0.0_f64; level_len];
            kernel.eval_full(lvl, &mut m, &mut q);
            let mut min_gap = f64::INFINITY;
            let mut tilde = vec![0.0_f64; level_len];
            let mut min_of_min = f64::INFINITY;
            let have_resid = it + 1 < spec.n_t;
            if have_resid {
                coef.continuation_step(grid.level(it + 1), &mut tilde, dt, None);
            }
            for iw in 0..spec.n_w {
                for ip in 0..spec.n_p {
                    let i = iw * spec.n_p + ip;
                    let gap = lvl[i] - m[i];
                    min_gap = min_gap.min(gap);
                    if have_resid && iw > 0 && iw + 1 < spec.n_w {
                        let f = (lvl[i] - tilde[i]) / dt;
                        min_of_min = min_of_min.min(f.min(gap).abs());
                    }
                }
            }
            (min_gap, min_of_min)
        })
        .collect();
    let min_obstacle_gap = per_level.iter().map(|x| x.0).fold(f64::INFINITY, f64::min);
    let max_complementarity =
        per_level.iter().map(|x| x.1).filter(|x| x.is_finite()).fold(0.0_f64, f64::max);

    InvariantReport {
        terminal_exact,
        boundary_zero_exact,
        min_value,
        max_w_decrease,
        max_psi_excess,
        min_scheme_residual,
        min_obstacle_gap,
        max_complementarity,
        levels_checked: picked.len(),
        obstacle_tol: settings.obstacle_tol,
        scheme_tol: scheme_tol(&spec),
        psi_slack: 1e-9 * scale.max(1.0),
        monotone_slack: 1e-9 * scale.max(1.0),
    }
}
