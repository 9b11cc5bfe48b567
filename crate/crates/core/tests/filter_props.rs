//! Property tests for the filter algebra: simplex closure of the Bayes
//! update, the zeta identity, tangency of belief drift/diffusion, the
//! cost/chi inversion, and the tower-property martingale check of the
//! update against its own quadrature.

use merton_experts::filter::{bayes_update, belief_diffusion, belief_drift, zeta, Belief};
use merton_experts::model::{CostModel, ModelParams, NoiseModel};
use proptest::prelude::*;

fn params3() -> ModelParams {
    ModelParams::new(
        vec![0.4, 0.05, -0.2],
        0.25,
        vec![-1.0, 0.6, 0.4, 0.2, -0.5, 0.3, 0.9, 0.1, -1.0],
        1.0,
        0.5,
        -0.5,
        2.0,
        vec![0.3, 0.3, 0.4],
    )
    .unwrap()
}

fn belief3() -> impl Strategy<Value = Belief> {
    (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(a, b, c)| {
        let s = a + b + c;
        if s == 0.0 {
            Belief::new(vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap()
        } else {
            Belief::project(vec![a / s, b / s, c / s])
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn bayes_update_stays_on_simplex(
        p in belief3(),
        z in -5.0..5.0f64,
        q in 0.0..0.999f64,
    ) {
        let params = params3();
        let noise = NoiseModel::new(0.7, 8).unwrap();
        let upd = bayes_update(&params, &noise, z, &p, q).unwrap();
        let sum: f64 = upd.as_slice().iter().sum();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
        prop_assert!(upd.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
        // zero components stay zero
        for (a, b) in p.as_slice().iter().zip(upd.as_slice()) {
            if *a == 0.0 {
                prop_assert_eq!(*b, 0.0);
            }
        }
    }

    #[test]
    fn zeta_identity(
        p in belief3(),
        z in -5.0..5.0f64,
        q in 0.0..0.999f64,
    ) {
        let params = params3();
        let noise = NoiseModel::new(0.7, 8).unwrap();
        let upd = bayes_update(&params, &noise, z, &p, q).unwrap();
        let zs = zeta(&params, &noise, z, &p, q).unwrap();
        for n in 0..3 {
            let recon = p.as_slice()[n] + zs[n] * p.as_slice()[n];
            prop_assert!((recon - upd.as_slice()[n]).abs() <= 1e-12);
        }
    }

    #[test]
    fn drift_and_diffusion_are_simplex_tangent(p in belief3()) {
        let params = params3();
        let d: f64 = belief_drift(&params, &p).iter().sum();
        let s: f64 = belief_diffusion(&params, &p).iter().sum();
        prop_assert!(d.abs() <= 1e-12);
        prop_assert!(s.abs() <= 1e-12);
    }

    #[test]
    fn chi_inverts_cost(q in 0.0..0.99f64, k0 in 1e-4..0.5f64, k1 in 1e-4..0.5f64) {
        let c = CostModel::new(k0, k1).unwrap();
        let w = c.cost_unchecked(q);
        let back = c.chi(0.3, w).unwrap();
        prop_assert!((back - q).abs() <= 1e-10);
        let w2 = c.cost_unchecked(back);
        prop_assert!((w2 - w).abs() <= 1e-10 * w.max(1.0));
    }

    #[test]
    fn cost_monotone(q1 in 0.0..0.995f64, q2 in 0.0..0.995f64) {
        let c = CostModel::new(0.02, 0.03).unwrap();
        if q1 < q2 {
            prop_assert!(c.cost_unchecked(q1) < c.cost_unchecked(q2));
        }
    }
}

/// Tower property: mixing the Bayes update over the signal distribution
/// reproduces the prior. Checked on a two-regime model against a
/// high-order quadrature; the 1e-8 tolerance matches the rule's measured
/// worst-case error near the transition quality.
#[test]
fn tower_property_of_bayes_update() {
    use rand::Rng;
    use rand::SeedableRng;
    let params = ModelParams::new(
        vec![0.4, -0.2],
        0.25,
        vec![-1.0, 1.0, 1.0, -1.0],
        1.0,
        0.5,
        0.0,
        2.0,
        vec![0.5, 0.5],
    )
    .unwrap();
    let noise = NoiseModel::new(1.0, 256).unwrap();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(31);
    for _ in 0..2000 {
        let p1: f64 = rng.random_range(1e-6..1.0 - 1e-6);
        let prior = Belief::new(vec![p1, 1.0 - p1]).unwrap();
        let q: f64 = rng.random_range(0.0..0.999);
        let mut mixed = [0.0_f64; 2];
        for (n, &pn) in prior.as_slice().iter().enumerate() {
            for (&eps, &wq) in noise.quad_nodes.iter().zip(&noise.quad_weights) {
                let z = q * params.mu[n] + (1.0 - q) * eps;
                let upd = bayes_update(&params, &noise, z, &prior, q).unwrap();
                for m in 0..2 {
                    mixed[m] += pn * wq * upd.as_slice()[m];
                }
            }
        }
        for m in 0..2 {
            let err = (mixed[m] - prior.as_slice()[m]).abs();
            assert!(err <= 1e-8, "tower error {err:e} at q={q}, p1={p1}");
        }
    }
}
