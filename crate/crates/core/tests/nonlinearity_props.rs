mod common;

use std::collections::BTreeMap;

use abblab::nonlinearity::{eval_f, eval_f_prime, fixed_point_xi, sigma};
use abblab::{Nonlinearity, VotingRule};
use common::{brute_force_f, random_rule};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

fn weights(max_n: usize) -> impl Strategy<Value = BTreeMap<usize, f64>> {
    prop::collection::vec(0.0f64..1.0, max_n).prop_filter_map("all zero", |w| {
        let s: f64 = w.iter().sum();
        (s > 1e-3).then(|| {
            let mut m: BTreeMap<usize, f64> = w.iter().enumerate().map(|(i, x)| (i + 1, x / s)).collect();
            let last = *m.keys().next_back().unwrap();
            let head: f64 = m.iter().filter(|(&n, _)| n != last).map(|(_, p)| p).sum();
            m.insert(last, 1.0 - head);
            m
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_rules_match_enumeration(seed in any::<u64>(), n_max in 1usize..=6, u in -1.0f64..=1.0) {
        let r = random_rule(&mut StdRng::seed_from_u64(seed), n_max);
        prop_assert!((eval_f(&r, u).unwrap() - brute_force_f(&r, u)).abs() < 1e-12);
    }

    #[test]
    fn f_is_monotone_with_fixed_ends(seed in any::<u64>(), n_max in 1usize..=8) {
        let r = random_rule(&mut StdRng::seed_from_u64(seed), n_max);
        prop_assert!((eval_f(&r, 1.0).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((eval_f(&r, -1.0).unwrap() + 1.0).abs() < 1e-12);
        let mut prev = -1.0;
        for i in 0..=200 {
            let u = -1.0 + 0.01 * i as f64;
            let v = eval_f(&r, u).unwrap();
            prop_assert!(v >= prev - 1e-13);
            prop_assert!(eval_f_prime(&r, u).unwrap() >= -1e-13);
            prev = v;
        }
    }

    #[test]
    fn derivative_matches_central_difference(seed in any::<u64>(), n_max in 1usize..=8, u in -0.99f64..0.99) {
        let r = random_rule(&mut StdRng::seed_from_u64(seed), n_max);
        let h = 1e-5;
        let fd = (eval_f(&r, u + h).unwrap() - eval_f(&r, u - h).unwrap()) / (2.0 * h);
        prop_assert!((fd - eval_f_prime(&r, u).unwrap()).abs() < 1e-7);
    }

    #[test]
    fn majority_is_odd_concave_and_kpp(p in weights(9)) {
        let g = Nonlinearity::majority(&p).unwrap();
        prop_assert!(g.rule.odd_symmetric());
        prop_assert!(g.is_kpp);
        prop_assert!((g.upsilon.value - g.fprime0).abs() < 1e-9);
        let h = 1e-3;
        for i in 0..=1000 {
            let u = i as f64 * h;
            prop_assert!((g.f(-u) + g.f(u)).abs() < 1e-12);
            if i > 0 && i < 1000 {
                prop_assert!(g.f(u + h) - 2.0 * g.f(u) + g.f(u - h) <= 1e-12);
            }
        }
        let p1 = p.get(&1).copied().unwrap_or(0.0);
        let p2 = p.get(&2).copied().unwrap_or(0.0);
        prop_assert!((g.f_prime(1.0) - (p1 + p2)).abs() < 1e-10);
    }

    #[test]
    fn branching_majority_has_unit_fixed_point(p in weights(7)) {
        prop_assume!(p.iter().any(|(&n, &w)| n >= 3 && w > 1e-3));
        let g = Nonlinearity::majority(&p).unwrap();
        prop_assert!(g.fprime0 > 1.0);
        let scan = fixed_point_xi(&g.rule).unwrap();
        prop_assert!((scan.value - 1.0).abs() < 1e-6, "xi = {}", scan.value);
    }

    #[test]
    fn sigma_is_monotone(f in 1.01f64..4.0, df in 0.0f64..2.0, gamma in 1.01f64..10.0, dg in 0.0f64..5.0) {
        let base = sigma(f, gamma).unwrap().value;
        prop_assert!(sigma(f, gamma + dg).unwrap().value >= base - 1e-12);
        prop_assert!(sigma(f + df, gamma).unwrap().value <= base + 1e-12);
    }
}

#[test]
fn sigma_oracle_by_dense_scan() {
    for (f, gamma) in [(1.5, 2.0f64), (1.4, 1.0 / 0.82), (1.875, 1.2), (3.0, 50.0)] {
        let dense = (1..=400_000)
            .map(|i| {
                let w = i as f64 / 400_000.0;
                (1.0 - f * gamma.powf(-w)) / w
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let s = sigma(f, gamma).unwrap().value;
        assert!((s - dense).abs() < 1e-6, "f {f} gamma {gamma}: {s} vs {dense}");
    }
}

#[test]
fn unanimity_is_not_odd() {
    let p = [(3usize, 1.0)].into_iter().collect();
    let t = [(3usize, vec![0.0, 0.0, 1.0])].into_iter().collect();
    let g = Nonlinearity::new(VotingRule::new(&p, &t).unwrap());
    assert!(!g.rule.odd_symmetric());
    assert!(g.xi().is_err());
    assert!((g.f(0.9) - (2.0 * 0.95f64.powi(3) - 1.0)).abs() < 1e-14);
}
