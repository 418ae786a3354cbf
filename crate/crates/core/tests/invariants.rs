use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use u2lab::confidence::{build_confidence_set, ConfidenceParams, ConfidenceSet, ObservationCounts};
use u2lab::fixtures;
use u2lab::mdp::{is_eps_robust_optimal, Policy, TabularMdp};
use u2lab::robust::{inner_linear_opt, q_high, robust_policy_eval, Orientation};
use u2lab::whitebox::{delta_star, is_feasible_p1, AttackConfig};

const TOL: f64 = 1e-7;

fn instance(seed: u64, ns: usize, na: usize, gamma: f64) -> (TabularMdp<f64>, Policy) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = fixtures::random_mdp(&mut rng, ns, na, gamma);
    let pi = fixtures::random_policy(&mut rng, ns, na);
    (m, pi)
}

fn set_at(m: &TabularMdp<f64>, n: u64) -> ConfidenceSet<f64> {
    let params = ConfidenceParams {
        sigma: 0.5,
        num_learners: 10,
        failure_p: 0.1,
        gamma: m.gamma,
        initial_dist: m.initial_dist.clone(),
    };
    build_confidence_set(&ObservationCounts::from_model(m, n), &params).unwrap()
}

fn shapes() -> impl Strategy<Value = (u64, usize, usize, f64)> {
    (any::<u64>(), 1usize..=3, 2usize..=3, 0.5f64..0.95)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn occupancy_is_a_distribution((seed, ns, na, gamma) in shapes()) {
        let (m, pi) = instance(seed, ns, na, gamma);
        let mu = m.occupancy(&pi).unwrap().mu;
        prop_assert!(mu.iter().all(|&x| x >= 0.0));
        prop_assert!((mu.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn robust_bounds_bracket_the_model((seed, ns, na, gamma) in shapes(), n in 5u64..5000) {
        let (m, pi) = instance(seed, ns, na, gamma);
        let cs = set_at(&m, n);
        prop_assert!(cs.contains(&m));
        let exact = m.evaluate(&pi).unwrap();
        let low = robust_policy_eval(&cs, &pi, Orientation::Min, None, 1e-10).unwrap();
        let (high, q) = q_high(&cs, &pi, 1e-10).unwrap();
        for s in 0..ns {
            prop_assert!(low[s] <= exact.v[s] + TOL && exact.v[s] <= high[s] + TOL);
            for a in 0..na {
                prop_assert!(exact.q[s][a] <= q[s][a] + TOL);
            }
        }
    }

    #[test]
    fn more_data_tightens_the_bounds((seed, ns, na, gamma) in shapes(), n in 5u64..2000) {
        let (m, pi) = instance(seed, ns, na, gamma);
        let (coarse, fine) = (set_at(&m, n), set_at(&m, 4 * n));
        let low = |cs: &ConfidenceSet<f64>| robust_policy_eval(cs, &pi, Orientation::Min, None, 1e-10).unwrap();
        let high = |cs: &ConfidenceSet<f64>| robust_policy_eval(cs, &pi, Orientation::Max, None, 1e-10).unwrap();
        let (l0, l1, h0, h1) = (low(&coarse), low(&fine), high(&coarse), high(&fine));
        for s in 0..ns {
            prop_assert!(l1[s] >= l0[s] - TOL);
            prop_assert!(h1[s] <= h0[s] + TOL);
        }
    }

    #[test]
    fn inner_optimum_is_a_feasible_distribution(
        seed in any::<u64>(),
        dim in 2usize..6,
        budget in 0.0f64..2.5,
        maximize in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p_hat = fixtures::flat_dirichlet(&mut rng, dim);
        let v = fixtures::flat_dirichlet(&mut rng, dim).iter().map(|x| 4.0 * x - 1.0).collect::<Vec<_>>();
        let orientation = if maximize { Orientation::Max } else { Orientation::Min };
        let q = inner_linear_opt(&p_hat, budget, &v, orientation);
        prop_assert!(q.iter().all(|&x| x >= 0.0));
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let l1: f64 = q.iter().zip(&p_hat).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(l1 <= budget + 1e-12);
        let dot = |x: &[f64]| x.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        if maximize {
            prop_assert!(dot(&q) >= dot(&p_hat) - 1e-12);
        } else {
            prop_assert!(dot(&q) <= dot(&p_hat) + 1e-12);
        }
    }

    #[test]
    fn optimal_perturbation_is_feasible((seed, ns, na, gamma) in shapes(), eps in 0.0f64..0.6) {
        let (m, target) = instance(seed, ns, na, gamma);
        let cfg = AttackConfig::new(target.clone(), eps, 1.0).unwrap();
        let star = delta_star(&m, &cfg).unwrap();
        prop_assert!(star.is_nonnegative() && star.spares_target(&target));
        prop_assert!(is_feasible_p1(&m, &cfg, &star).unwrap());
        prop_assert!(is_eps_robust_optimal(&star.poisoned(&m), &target, eps).unwrap());
    }
}
