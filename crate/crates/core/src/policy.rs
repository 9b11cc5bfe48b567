//! Feedback policy extracted from a solved grid: per-node region label
//! (continue vs purchase), trading fraction, purchase quality and obstacle
//! gap, plus evaluation at arbitrary states.

use crate::model::CostModel;
use crate::solver::GridSpec;

pub use crate::solver::extract_policy;

/// Node classification by the obstacle gap `V - M[V]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Region {
    Continue = 0,
    Purchase = 1,
}

/// Per-node feedback maps on the solver grid. `q_hat` holds the
/// intervention argmax wherever a purchase is affordable (NaN elsewhere);
/// it is only meaningful on PURCHASE nodes and [`Policy::policy_at`] only
/// reads it inside all-PURCHASE cells.
#[derive(Debug, Clone)]
pub struct Policy {
    pub spec: GridSpec,
    pub region: Vec<Region>,
    pub pi_hat: Vec<f64>,
    pub q_hat: Vec<f64>,
    pub gap: Vec<f64>,
    pub cost: CostModel,
    pub pi_lo: f64,
    pub pi_hi: f64,
    pub region_tol: f64,
    pub params_hash: String,
}

/// Action prescribed by the policy at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyAction {
    /// Hold this fraction of wealth in the risky asset.
    Trade(f64),
    /// Buy a signal of this quality (guaranteed affordable).
    Purchase { quality: f64 },
}

impl Policy {
    pub fn node(&self, it: usize, iw: usize, ip: usize) -> usize {
        (it * self.spec.n_w + iw) * self.spec.n_p + ip
    }

    pub fn region_at_node(&self, it: usize, iw: usize, ip: usize) -> Region {
        self.region[self.node(it, iw, ip)]
    }

    /// Evaluates the feedback maps at `(t, w, p)`.
    ///
    /// A state is a purchase state iff all eight nodes of its containing
    /// cell are PURCHASE (a conservative rule: a wrong purchase destroys
    /// at least the base fee irrecoverably, while continuation errors are
    /// O(dt)); the quality is then the interpolated argmax clamped into
    /// the affordable set. Otherwise the action is the interpolated
    /// trading fraction. Out-of-domain queries clamp to the nearest face
    /// and set the flag.
    pub fn policy_at(&self, t: f64, w: f64, p: f64) -> (PolicyAction, bool) {
        let (it, ft, c1) = self.spec.t_axis().locate(t);
        let (iw, fw, c2) = self.spec.w_axis().locate(w);
        let (ip, fp, c3) = self.spec.p_axis().locate(p);
        let clamped = c1 || c2 || c3;

        let mut all_purchase = true;
        'outer: for dt_ in 0..2 {
            for dw_ in 0..2 {
                for dp_ in 0..2 {
                    if self.region_at_node(it + dt_, iw + dw_, ip + dp_) != Region::Purchase {
                        all_purchase = false;
                        break 'outer;
                    }
                }
            }
        }

        let tri = |arr: &[f64]| -> f64 {
            let mut acc = 0.0;
            for (dt_, wt_) in [(0, 1.0 - ft), (1, ft)] {
                for (dw_, ww_) in [(0, 1.0 - fw), (1, fw)] {
                    for (dp_, wp_) in [(0, 1.0 - fp), (1, fp)] {
                        acc += wt_ * ww_ * wp_ * arr[self.node(it + dt_, iw + dw_, ip + dp_)];
                    }
                }
            }
            acc
        };

        if all_purchase {
            if let Some(chi) = self.cost.chi(t, w) {
                let q = tri(&self.q_hat).clamp(0.0, chi);
                return (PolicyAction::Purchase { quality: q }, clamped);
            }
        }
        let pi = tri(&self.pi_hat).clamp(self.pi_lo, self.pi_hi);
        (PolicyAction::Trade(pi), clamped)
    }
}

impl crate::simulate::StrategyRules for Policy {
    fn act(&self, t: f64, state: &crate::filter::State) -> PolicyAction {
        self.policy_at(t, state.w, state.p.as_slice()[0]).0
    }
}

/// The policy's trading map with purchases disabled; the no-signal
/// comparison arm.
pub struct TradingOnly<'a>(pub &'a Policy);

impl crate::simulate::StrategyRules for TradingOnly<'_> {
    fn act(&self, t: f64, state: &crate::filter::State) -> PolicyAction {
        match self.0.policy_at(t, state.w, state.p.as_slice()[0]).0 {
            PolicyAction::Purchase { .. } => {
                // interpolate the trading map instead of buying
                let (_, _) = (t, state);
                PolicyAction::Trade(self.trade_fraction(t, state))
            }
            trade => trade,
        }
    }
}

impl TradingOnly<'_> {
    fn trade_fraction(&self, t: f64, state: &crate::filter::State) -> f64 {
        let p = self.0;
        let (it, ft, _) = p.spec.t_axis().locate(t);
        let (iw, fw, _) = p.spec.w_axis().locate(state.w);
        let (ip, fp, _) = p.spec.p_axis().locate(state.p.as_slice()[0]);
        let mut acc = 0.0;
        for (dt_, wt_) in [(0, 1.0 - ft), (1, ft)] {
            for (dw_, ww_) in [(0, 1.0 - fw), (1, fw)] {
                for (dp_, wp_) in [(0, 1.0 - fp), (1, fp)] {
                    acc += wt_ * ww_ * wp_ * p.pi_hat[p.node(it + dt_, iw + dw_, ip + dp_)];
                }
            }
        }
        acc.clamp(p.pi_lo, p.pi_hi)
    }
}

/// The policy's purchase map with the trading fraction forced to zero; a
/// deliberately suboptimal control used as the martingale diagnostic's
/// power check.
pub struct ZeroTrade<'a>(pub &'a Policy);

impl crate::simulate::StrategyRules for ZeroTrade<'_> {
    fn act(&self, t: f64, state: &crate::filter::State) -> PolicyAction {
        match self.0.policy_at(t, state.w, state.p.as_slice()[0]).0 {
            PolicyAction::Purchase { quality } => PolicyAction::Purchase { quality },
            PolicyAction::Trade(_) => PolicyAction::Trade(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CostModel;

    fn tiny_policy() -> Policy {
        // 2 x 3 x 2 grid, hand-labeled
        let spec = GridSpec::new(2, 3, 2, 1.0, 2.0).unwrap();
        let n = spec.n_t * spec.n_w * spec.n_p;
        Policy {
            spec,
            region: vec![Region::Continue; n],
            pi_hat: vec![0.5; n],
            q_hat: vec![0.3; n],
            gap: vec![1.0; n],
            cost: CostModel::new(0.01, 0.05).unwrap(),
            pi_lo: 0.0,
            pi_hi: 2.0,
            region_tol: 1e-8,
            params_hash: String::new(),
        }
    }

    #[test]
    fn node_query_returns_node_value() {
        let p = tiny_policy();
        let (act, clamped) = p.policy_at(0.0, 1.0, 0.0);
        assert!(!clamped);
        assert_eq!(act, PolicyAction::Trade(0.5));
    }

    #[test]
    fn below_base_fee_never_purchases() {
        let mut p = tiny_policy();
        p.region.fill(Region::Purchase);
        let (act, _) = p.policy_at(0.0, 0.005, 0.5);
        assert!(matches!(act, PolicyAction::Trade(_)));
    }

    #[test]
    fn quality_clamped_to_affordable() {
        let mut p = tiny_policy();
        p.region.fill(Region::Purchase);
        p.q_hat.fill(0.9);
        // chi(0.02) = 0.01/(0.01+0.05) = 1/6 < 0.9
        let (act, _) = p.policy_at(0.0, 0.02, 0.5);
        match act {
            PolicyAction::Purchase { quality } => {
                let chi = p.cost.chi(0.0, 0.02).unwrap();
                assert_eq!(quality, chi);
            }
            other => panic!("expected purchase, got {other:?}"),
        }
    }

    #[test]
    fn mixed_cell_is_conservative() {
        let mut p = tiny_policy();
        p.region.fill(Region::Purchase);
        let node = p.node(0, 1, 0);
        p.region[node] = Region::Continue;
        // query inside a cell touching the continue node
        let (act, _) = p.policy_at(0.2, 0.9, 0.3);
        assert!(matches!(act, PolicyAction::Trade(_)));
    }

    #[test]
    fn out_of_domain_flags_clamp() {
        let p = tiny_policy();
        let (_, clamped) = p.policy_at(0.0, 5.0, 0.5);
        assert!(clamped);
        let (_, clamped) = p.policy_at(0.0, 1.0, 1.5);
        assert!(clamped);
    }
}
