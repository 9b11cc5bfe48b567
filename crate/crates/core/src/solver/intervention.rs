//! The intervention operator `M[v](t,x)`: best expected value just after a
//! signal purchase, maximized over affordable qualities.
//!
//! `M[v](t,w,p) = sup_{q ∈ [0,χ(t,w)]} Σₙ pⁿ E_ε[ v(t, w-K(t,q), Ξ(qμⁿ+(1-q)ε, p, q)) ]`
//! with the empty-feasible-set convention `M = -1` for `w < K(t,0)`.
//!
//! The expectation is the noise quadrature composed with bilinear
//! interpolation of the grid slice. For two regimes the post-update belief
//! depends on the likelihood ratio only, `Ξ¹ = rρ/(rρ + 1-ρ)`, so the
//! kernel precomputes, once per solve, the interpolation targets for every
//! (wealth node, quality index, regime, quadrature node, belief node); the
//! per-level evaluation is then pure gather/fma work.

use super::{GridSpec, UniformAxis};
use crate::model::{CostModel, ModelParams, NoiseModel};
use rayon::prelude::*;

/// Value (and convention) returned on the infeasible set.
pub const EMPTY_SUP: f64 = -1.0;

pub struct InterventionKernel {
    n_w: usize,
    n_p: usize,
    n_q: usize,
    n_quad: usize,
    /// First wealth node with a non-empty feasible set.
    feasible_from: usize,
    /// Per (iw, jq): scanned quality.
    q_val: Vec<f64>,
    /// Per (iw, jq): lower w-node of the post-purchase wealth and the
    /// interpolation fraction.
    post_idx: Vec<u32>,
    post_frac: Vec<f64>,
    /// Per (iw, jq, n, j, ip): lower ρ-node of the post-update belief and
    /// the fraction.
    tgt_idx: Vec<u32>,
    tgt_frac: Vec<f64>,
    /// Quadrature weights (normalized).
    quad_w: Vec<f64>,
    /// ρ-axis values (prior probability of regime 1).
    rho: Vec<f64>,
}

impl InterventionKernel {
    pub fn new(
        params: &ModelParams,
        cost: &CostModel,
        noise: &NoiseModel,
        spec: &GridSpec,
        n_q: usize,
    ) -> Self {
        assert_eq!(params.n_regimes(), 2);
        assert!(n_q >= 1);
        let w_axis = spec.w_axis();
        let p_axis = spec.p_axis();
        let (n_w, n_p) = (spec.n_w, spec.n_p);
        let n_quad = noise.n_quad();
        let rho = p_axis.values();

        let mut feasible_from = n_w;
        let mut q_val = vec![0.0; n_w * n_q];
        let mut post_idx = vec![0u32; n_w * n_q];
        let mut post_frac = vec![0.0; n_w * n_q];
        let mut tgt_idx = vec![0u32; n_w * n_q * 2 * n_quad * n_p];
        let mut tgt_frac = vec![0.0; n_w * n_q * 2 * n_quad * n_p];

        for iw in 0..n_w {
            let w = w_axis.value(iw);
            let chi = match cost.chi(0.0, w) {
                Some(c) => c,
                None => continue,
            };
            feasible_from = feasible_from.min(iw);
            for jq in 0..n_q {
                let q = if n_q == 1 { 0.0 } else { chi * jq as f64 / (n_q - 1) as f64 };
                let k = cost.cost_unchecked(q);
                let post_w = (w - k).max(0.0);
                let (pi_, pf_, _) = w_axis.locate(post_w);
                let flat = iw * n_q + jq;
                q_val[flat] = q;
                post_idx[flat] = pi_ as u32;
                post_frac[flat] = pf_;
                for n in 0..2usize {
                    for j in 0..n_quad {
                        let z = q * params.mu[n] + (1.0 - q) * noise.quad_nodes[j];
                        let scale = 1.0 - q;
                        let logr = noise.log_density_unnormalized((z - q * params.mu[0]) / scale)
                            - noise.log_density_unnormalized((z - q * params.mu[1]) / scale);
                        let base = ((flat * 2 + n) * n_quad + j) * n_p;
                        for (ip, &r0) in rho.iter().enumerate() {
                            let xi = posterior_rho(logr, r0);
                            let (ti, tf, _) = p_axis.locate(xi);
                            tgt_idx[base + ip] = ti as u32;
                            tgt_frac[base + ip] = tf;
                        }
                    }
                }
            }
        }
        Self {
            n_w,
            n_p,
            n_q,
            n_quad,
            feasible_from,
            q_val,
            post_idx,
            post_frac,
            tgt_idx,
            tgt_frac,
            quad_w: noise.quad_weights.clone(),
            rho,
        }
    }

    /// M-value and argmax quality for every node of a time slice.
    /// Infeasible nodes get `(-1, NaN)`.
    pub fn eval_full(&self, v: &[f64], m_out: &mut [f64], q_out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.n_w * self.n_p);
        m_out
            .par_chunks_mut(self.n_p)
            .zip(q_out.par_chunks_mut(self.n_p))
            .enumerate()
            .for_each(|(iw, (m_row, q_row))| {
                if iw < self.feasible_from {
                    m_row.fill(EMPTY_SUP);
                    q_row.fill(f64::NAN);
                } else {
                    self.eval_row(v, iw, m_row, Some(q_row));
                }
            });
    }

    /// One obstacle sweep: `cur <- max(cur, M[cur])` nodewise (a Jacobi
    /// sweep: every M evaluation reads the pre-sweep slice), returning the
    /// largest change. Rows that a rigorous convex-combination bound
    /// (`M[v](w,·) ≤ max_q lerp(rowmax_v, w - K(q))`) proves unliftable
    /// are skipped without evaluation; skipping never alters values, so
    /// results are independent of it.
    pub fn sweep_once(&self, cur: &mut [f64], lifted: &mut u64) -> f64 {
        let np = self.n_p;
        let mut rowmax = vec![f64::NEG_INFINITY; self.n_w];
        for (iw, rm) in rowmax.iter_mut().enumerate() {
            *rm = cur[iw * np..(iw + 1) * np].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        }

        let cur_snapshot: &[f64] = cur;
        let results: Vec<(usize, Vec<f64>, f64, u64)> = (self.feasible_from..self.n_w)
            .into_par_iter()
            .filter_map(|iw| {
                let row = &cur_snapshot[iw * np..(iw + 1) * np];
                let row_min = row.iter().fold(f64::INFINITY, |a, &b| a.min(b));
                let mut bound = f64::NEG_INFINITY;
                for jq in 0..self.n_q {
                    let flat = iw * self.n_q + jq;
                    let (pi_, pf_) = (self.post_idx[flat] as usize, self.post_frac[flat]);
                    bound = bound.max((1.0 - pf_) * rowmax[pi_] + pf_ * rowmax[pi_ + 1]);
                }
                if row_min >= bound {
                    return None;
                }
                let mut m_row = vec![0.0_f64; np];
                self.eval_row(cur_snapshot, iw, &mut m_row, None);
                let mut change = 0.0_f64;
                let mut nlift = 0u64;
                for (ip, &m) in m_row.iter().enumerate() {
                    let delta = m - row[ip];
                    if delta > 0.0 {
                        change = change.max(delta);
                        nlift += 1;
                    }
                }
                if nlift == 0 {
                    None
                } else {
                    Some((iw, m_row, change, nlift))
                }
            })
            .collect();

        let mut max_change = 0.0_f64;
        for (iw, m_row, change, nlift) in results {
            max_change = max_change.max(change);
            *lifted += nlift;
            let dst = &mut cur[iw * np..(iw + 1) * np];
            for (d, &m) in dst.iter_mut().zip(m_row.iter()) {
                if m > *d {
                    *d = m;
                }
            }
        }
        max_change
    }

    /// M-value (and optionally argmax quality) for one wealth row.
    fn eval_row(&self, v: &[f64], iw: usize, m_row: &mut [f64], mut q_row: Option<&mut [f64]>) {
        let np = self.n_p;
        let nq = self.n_quad;
        let mut mixed = vec![0.0_f64; np];
        let mut acc = vec![0.0_f64; np];
        m_row.fill(f64::NEG_INFINITY);
        if let Some(qr) = q_row.as_deref_mut() {
            qr.fill(f64::NAN);
        }
        for jq in 0..self.n_q {
            let flat = iw * self.n_q + jq;
            let (pi_, pf_) = (self.post_idx[flat] as usize, self.post_frac[flat]);
            let lo = &v[pi_ * np..(pi_ + 1) * np];
            let hi = &v[(pi_ + 1) * np..(pi_ + 2) * np];
            for ip in 0..np {
                mixed[ip] = (1.0 - pf_) * lo[ip] + pf_ * hi[ip];
            }
            acc.fill(0.0);
            for n in 0..2usize {
                for j in 0..nq {
                    let wq = self.quad_w[j];
                    let base = ((flat * 2 + n) * nq + j) * np;
                    let t_idx = &self.tgt_idx[base..base + np];
                    let t_frac = &self.tgt_frac[base..base + np];
                    if n == 0 {
                        for ip in 0..np {
                            let k = t_idx[ip] as usize;
                            let f = t_frac[ip];
                            let val = (1.0 - f) * mixed[k] + f * mixed[k + 1];
                            acc[ip] += wq * self.rho[ip] * val;
                        }
                    } else {
                        for ip in 0..np {
                            let k = t_idx[ip] as usize;
                            let f = t_frac[ip];
                            let val = (1.0 - f) * mixed[k] + f * mixed[k + 1];
                            acc[ip] += wq * (1.0 - self.rho[ip]) * val;
                        }
                    }
                }
            }
            let q = self.q_val[flat];
            if let Some(qr) = q_row.as_deref_mut() {
                for ip in 0..np {
                    if acc[ip] > m_row[ip] {
                        m_row[ip] = acc[ip];
                        qr[ip] = q;
                    }
                }
            } else {
                for ip in 0..np {
                    if acc[ip] > m_row[ip] {
                        m_row[ip] = acc[ip];
                    }
                }
            }
        }
    }
}

/// Stable posterior probability of regime 1 from a prior `rho` and a
/// log-likelihood-ratio `logr = log φ₁ - log φ₂`.
pub(crate) fn posterior_rho(logr: f64, rho: f64) -> f64 {
    if rho <= 0.0 {
        return 0.0;
    }
    if rho >= 1.0 {
        return 1.0;
    }
    if logr >= 0.0 {
        let e = (-logr).exp();
        rho / (rho + (1.0 - rho) * e)
    } else {
        let e = logr.exp();
        rho * e / (rho * e + (1.0 - rho))
    }
}

/// Intervention value and argmax quality at an arbitrary in-domain state
/// `(t, w, p)` against one time slice of the grid, scanning `n_q` equally
/// spaced qualities on `[0, χ(t,w)]`. Returns `(-1, None)` when no
/// purchase is affordable. Ties resolve to the smallest quality.
pub fn intervention_value(
    params: &ModelParams,
    cost: &CostModel,
    noise: &NoiseModel,
    w_axis: &UniformAxis,
    p_axis: &UniformAxis,
    v_slice: &[f64],
    t: f64,
    w: f64,
    p: f64,
    n_q: usize,
) -> (f64, Option<f64>) {
    assert_eq!(params.n_regimes(), 2);
    let chi = match cost.chi(t, w) {
        Some(c) => c,
        None => return (EMPTY_SUP, None),
    };
    let np = p_axis.n;
    let mut best = f64::NEG_INFINITY;
    let mut best_q = 0.0;
    for jq in 0..n_q.max(1) {
        let q = if n_q <= 1 { 0.0 } else { chi * jq as f64 / (n_q - 1) as f64 };
        let post_w = (w - cost.cost_unchecked(q)).max(0.0);
        let (kw, fw, _) = w_axis.locate(post_w);
        let lo = &v_slice[kw * np..(kw + 1) * np];
        let hi = &v_slice[(kw + 1) * np..(kw + 2) * np];
        let scale = 1.0 - q;
        let mut total = 0.0;
        for n in 0..2usize {
            let prior = if n == 0 { p } else { 1.0 - p };
            if prior == 0.0 {
                continue;
            }
            for (j, &eps) in noise.quad_nodes.iter().enumerate() {
                let z = q * params.mu[n] + (1.0 - q) * eps;
                let logr = noise.log_density_unnormalized((z - q * params.mu[0]) / scale)
                    - noise.log_density_unnormalized((z - q * params.mu[1]) / scale);
                let xi = posterior_rho(logr, p);
                let (kp, fp, _) = p_axis.locate(xi);
                let val = (1.0 - fw) * ((1.0 - fp) * lo[kp] + fp * lo[kp + 1])
                    + fw * ((1.0 - fp) * hi[kp] + fp * hi[kp + 1]);
                total += prior * noise.quad_weights[j] * val;
            }
        }
        if total > best {
            best = total;
            best_q = q;
        }
    }
    (best, Some(best_q))
}
