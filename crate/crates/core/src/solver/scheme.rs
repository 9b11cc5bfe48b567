//! Continuation-step kernel in reduced coordinates (w, ρ) with ρ the
//! probability of regime 1: upwind first derivatives keyed to drift sign,
//! central second derivatives, a sign-keyed seven-point cross stencil, and
//! a power-law closure row at w = w_max.
//!
//! The diffusion is rank one (a single Brownian motion drives both wealth
//! and belief), so the cross coefficient always sits exactly on the
//! positive-coefficient boundary |c| = 2√(ab); the inclusion test below
//! admits it with a tolerance and counts any node where it fails.

use super::{better_tie, GridSpec};
use crate::model::ModelParams;
use rayon::prelude::*;

/// Frozen per-node scheme coefficients for a two-regime model.
pub struct SchemeCoef {
    n_w: usize,
    n_p: usize,
    dw: f64,
    dp: f64,
    sigma: f64,
    alpha: f64,
    pi_lo: f64,
    pi_hi: f64,
    dmu_sign: f64,
    w: Vec<f64>,
    /// Filtered drift μᵀp per ρ-node.
    m_rho: Vec<f64>,
    /// Belief drift (Qᵀp)₁ per ρ-node.
    f_rho: Vec<f64>,
    /// Belief diffusion loading per ρ-node.
    s_rho: Vec<f64>,
}

impl SchemeCoef {
    pub fn new(params: &ModelParams, spec: &GridSpec) -> Self {
        assert_eq!(params.n_regimes(), 2);
        let (mu1, mu2) = (params.mu[0], params.mu[1]);
        let lam12 = params.q_matrix[1];
        let lam21 = params.q_matrix[2];
        let w_axis = spec.w_axis();
        let p_axis = spec.p_axis();
        let mut m_rho = Vec::with_capacity(spec.n_p);
        let mut f_rho = Vec::with_capacity(spec.n_p);
        let mut s_rho = Vec::with_capacity(spec.n_p);
        for ip in 0..spec.n_p {
            let rho = p_axis.value(ip);
            m_rho.push(mu1 * rho + mu2 * (1.0 - rho));
            f_rho.push(-lam12 * rho + lam21 * (1.0 - rho));
            s_rho.push((mu1 - mu2) * rho * (1.0 - rho) / params.sigma);
        }
        Self {
            n_w: spec.n_w,
            n_p: spec.n_p,
            dw: w_axis.step,
            dp: p_axis.step,
            sigma: params.sigma,
            alpha: params.risk_aversion,
            pi_lo: params.pi_lo,
            pi_hi: params.pi_hi,
            dmu_sign: (mu1 - mu2).signum(),
            w: w_axis.values(),
            m_rho,
            f_rho,
            s_rho,
        }
    }

    /// Largest explicit-step rate over the grid: the stable step is
    /// `cfl_safety / max_rate()`. The diffusion part uses the sharp
    /// rank-one bound (σ_w/dw + σ_p/dp)².
    pub fn max_rate(&self) -> f64 {
        let pi_abs = self.pi_lo.abs().max(self.pi_hi.abs());
        let mut worst: f64 = 0.0;
        for iw in 0..self.n_w {
            let wv = self.w[iw];
            for ip in 0..self.n_p {
                let sw = pi_abs * self.sigma * wv / self.dw;
                let sp = self.s_rho[ip].abs() / self.dp;
                let fw = pi_abs * self.m_rho[ip].abs() * wv / self.dw;
                let fp = self.f_rho[ip].abs() / self.dp;
                let diff = sw + sp;
                worst = worst.max(diff * diff + fw + fp);
            }
        }
        worst.max(f64::MIN_POSITIVE)
    }

    /// One explicit continuation update: `out = v + dt·max_π H[v]` per
    /// node. With `dt = 0` this evaluates the argmax only, which is how
    /// policy extraction reuses the kernel; `pi_out` then receives the
    /// maximizer per node. Returns the number of nodes where the cross
    /// stencil was dropped.
    pub fn continuation_step(
        &self,
        v: &[f64],
        out: &mut [f64],
        dt: f64,
        pi_out: Option<&mut [f64]>,
    ) -> u64 {
        let np = self.n_p;
        match pi_out {
            Some(pi) => out
                .par_chunks_mut(np)
                .zip(pi.par_chunks_mut(np))
                .enumerate()
                .map(|(iw, (orow, prow))| self.row_update(v, iw, orow, Some(prow), dt))
                .sum(),
            None => out
                .par_chunks_mut(np)
                .enumerate()
                .map(|(iw, orow)| self.row_update(v, iw, orow, None, dt))
                .sum(),
        }
    }

    fn row_update(
        &self,
        v: &[f64],
        iw: usize,
        out_row: &mut [f64],
        mut pi_row: Option<&mut [f64]>,
        dt: f64,
    ) -> u64 {
        let mut dropped = 0u64;
        for ip in 0..self.n_p {
            let (h, pi, drop) = self.node_max(v, iw, ip);
            out_row[ip] = v[iw * self.n_p + ip] + dt * h;
            if let Some(prow) = pi_row.as_deref_mut() {
                prow[ip] = pi;
            }
            if drop {
                dropped += 1;
            }
        }
        dropped
    }

    /// max over π of the discretized Hamiltonian at one node, with its
    /// argmax (tie: smaller |π|) and whether the cross term was dropped.
    fn node_max(&self, v: &[f64], iw: usize, ip: usize) -> (f64, f64, bool) {
        let np = self.n_p;
        let (dw, dp) = (self.dw, self.dp);
        let idx = iw * np + ip;
        let v0 = v[idx];

        let vpf = if ip + 1 < np { (v[idx + 1] - v0) / dp } else { 0.0 };
        let vpb = if ip > 0 { (v0 - v[idx - 1]) / dp } else { 0.0 };
        let fr = self.f_rho[ip];
        let vp_up = if ip == 0 {
            vpf
        } else if ip + 1 == np {
            vpb
        } else if fr >= 0.0 {
            vpf
        } else {
            vpb
        };
        let vpp = if ip > 0 && ip + 1 < np {
            (v[idx + 1] - 2.0 * v0 + v[idx - 1]) / (dp * dp)
        } else {
            0.0
        };
        let sr = self.s_rho[ip];
        let base = fr * vp_up + 0.5 * sr * sr * vpp;

        if iw == 0 {
            // wealth rows vanish: H is independent of π
            return (base, 0.0, false);
        }
        if iw + 1 == self.n_w {
            return self.boundary_row_max(v0, vpf, vpb, vpp, ip);
        }

        let wv = self.w[iw];
        let vww = (v[idx + np] - 2.0 * v0 + v[idx - np]) / (dw * dw);
        let dwf = (v[idx + np] - v0) / dw;
        let dwb = (v0 - v[idx - np]) / dw;

        let has_cross = ip > 0 && ip + 1 < np && sr != 0.0;
        let (vwp_pos, vwp_neg, cross_ok) = if has_cross {
            let edges = v[idx + np] + v[idx - np] + v[idx + 1] + v[idx - 1];
            let pos = (2.0 * v0 + v[idx + np + 1] + v[idx - np - 1] - edges) / (2.0 * dw * dp);
            let neg = -(2.0 * v0 + v[idx + np - 1] + v[idx - np + 1] - edges) / (2.0 * dw * dp);
            // |c| vs the geometric mean of the diagonal diffusion entries;
            // rank-one diffusion sits exactly on the boundary, admitted
            // with tolerance
            let c_abs = (wv * self.sigma * sr).abs();
            let gm = (wv * self.sigma).abs() * sr.abs();
            (pos, neg, c_abs <= gm * (1.0 + 1e-9))
        } else {
            (0.0, 0.0, true)
        };
        let dropped = has_cross && !cross_ok;

        let mm = self.m_rho[ip];
        let mut best_h = f64::NEG_INFINITY;
        let mut best_pi = 0.0;
        let branches =
            [(0.0_f64.max(self.pi_lo), self.pi_hi, 1.0), (self.pi_lo, 0.0_f64.min(self.pi_hi), -1.0)];
        for (lo, hi, sgn) in branches {
            if lo > hi {
                continue;
            }
            let dwu = if sgn * mm >= 0.0 { dwf } else { dwb };
            let vwp = if !has_cross || dropped {
                0.0
            } else if sgn * self.dmu_sign >= 0.0 {
                vwp_pos
            } else {
                vwp_neg
            };
            let a = wv * mm * dwu + wv * self.sigma * sr * vwp;
            let b = 0.5 * wv * wv * self.sigma * self.sigma * vww;
            let mut consider = |pi: f64| {
                let h = base + a * pi + b * pi * pi;
                if h > best_h || (h == best_h && better_tie(pi, best_pi)) {
                    best_h = h;
                    best_pi = pi;
                }
            };
            consider(lo);
            consider(hi);
            if b < 0.0 {
                consider((-a / (2.0 * b)).clamp(lo, hi));
            }
        }
        (best_h, best_pi, dropped)
    }

    /// w_max row: wealth derivatives replaced by the local power-law
    /// closure V_w = (1-α)V/w, V_ww = -α(1-α)V/w², V_wρ = (1-α)V_ρ/w,
    /// which is exact for the utility's asymptotic growth and keeps the
    /// row free of outflow differencing. Candidates are evaluated with the
    /// ρ-advection upwinded by their own total effective drift.
    fn boundary_row_max(
        &self,
        v0: f64,
        vpf: f64,
        vpb: f64,
        vpp: f64,
        ip: usize,
    ) -> (f64, f64, bool) {
        let np = self.n_p;
        let alpha = self.alpha;
        let one_ma = 1.0 - alpha;
        let fr = self.f_rho[ip];
        let sr = self.s_rho[ip];
        let mm = self.m_rho[ip];
        let sig = self.sigma;

        let upwind = |drift: f64| -> f64 {
            if ip == 0 {
                vpf
            } else if ip + 1 == np {
                vpb
            } else if drift >= 0.0 {
                vpf
            } else {
                vpb
            }
        };
        let eval = |pi: f64| -> f64 {
            let f_eff = fr + pi * sig * sr * one_ma;
            one_ma * (pi * mm - 0.5 * alpha * pi * pi * sig * sig) * v0
                + f_eff * upwind(f_eff)
                + 0.5 * sr * sr * vpp
        };

        let mut cands = [self.pi_lo, self.pi_hi, f64::NAN, f64::NAN];
        if v0 > 0.0 {
            let denom = alpha * sig * sig * v0;
            cands[2] = ((mm * v0 + sig * sr * vpf) / denom).clamp(self.pi_lo, self.pi_hi);
            cands[3] = ((mm * v0 + sig * sr * vpb) / denom).clamp(self.pi_lo, self.pi_hi);
        }
        let mut best_h = f64::NEG_INFINITY;
        let mut best_pi = 0.0;
        for pi in cands {
            if !pi.is_finite() {
                continue;
            }
            let h = eval(pi);
            if h > best_h || (h == best_h && better_tie(pi, best_pi)) {
                best_h = h;
                best_pi = pi;
            }
        }
        (best_h, best_pi, false)
    }
}
