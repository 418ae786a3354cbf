//! Brute-force oracles over the deterministic policy space.

use super::{Policy, TabularMdp};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Absolute slack granted to the claim in robust-optimality comparisons.
pub const ROBUST_SLACK: f64 = 1e-9;

/// Lexicographic iterator over all `A^S` deterministic policies; the last
/// state's action varies fastest.
#[derive(Debug, Clone)]
pub struct PolicyEnumerator {
    next: Option<Vec<usize>>,
    num_actions: usize,
}

impl Iterator for PolicyEnumerator {
    type Item = Policy;

    fn next(&mut self) -> Option<Policy> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut i = succ.len();
        let mut carried = true;
        while carried && i > 0 {
            i -= 1;
            succ[i] += 1;
            if succ[i] == self.num_actions {
                succ[i] = 0;
            } else {
                carried = false;
            }
        }
        if !carried {
            self.next = Some(succ);
        }
        Some(Policy::new(current))
    }
}

fn policy_count<T: Scalar>(mdp: &TabularMdp<T>, cap: u64) -> Result<u64> {
    let count = (mdp.num_actions as f64).powi(mdp.num_states as i32);
    if count > cap as f64 {
        return Err(Error::EnumerationCap { count, cap });
    }
    Ok(count as u64)
}

pub fn enumerate_policies<T: Scalar>(mdp: &TabularMdp<T>, cap: u64) -> Result<PolicyEnumerator> {
    policy_count(mdp, cap)?;
    Ok(PolicyEnumerator {
        next: Some(vec![0; mdp.num_states]),
        num_actions: mdp.num_actions,
    })
}

/// `|rho^pi - (1/(1-gamma)) sum_s mu(s) R(s, pi(s))|`
pub fn rho_identity_check<T: Scalar>(mdp: &TabularMdp<T>, pi: &Policy) -> Result<T> {
    let rho = mdp.rho(pi)?;
    let mu = mdp.occupancy(pi)?.mu;
    let weighted: T = (0..mdp.num_states).map(|s| mu[s] * mdp.rewards[s][pi.action(s)]).sum();
    Ok((rho - weighted / (T::one() - mdp.gamma)).abs())
}

/// Residual of the policy difference identity
/// `(1-gamma)(rho^pi - rho^pi2) = sum_s mu^pi2(s) (Q^pi(s, pi(s)) - Q^pi(s, pi2(s)))`.
pub fn q_rho_difference_check<T: Scalar>(mdp: &TabularMdp<T>, pi: &Policy, pi2: &Policy) -> Result<T> {
    let first = mdp.evaluate(pi)?;
    let second = mdp.evaluate(pi2)?;
    let mu2 = mdp.occupancy(pi2)?.mu;
    let rhs: T = (0..mdp.num_states)
        .map(|s| mu2[s] * (first.q[s][pi.action(s)] - first.q[s][pi2.action(s)]))
        .sum();
    let lhs = (T::one() - mdp.gamma) * (first.rho - second.rho);
    Ok((lhs - rhs).abs())
}

/// True iff `pi` beats each of its neighbors by at least `eps` in normalized
/// return, up to [`ROBUST_SLACK`].
pub fn is_eps_robust_optimal<T: Scalar>(mdp: &TabularMdp<T>, pi: &Policy, eps: T) -> Result<bool> {
    if !(eps > T::zero()) {
        return Err(Error::InvalidInput(format!("eps = {eps} must be positive")));
    }
    let base = mdp.normalized_return(pi)?;
    let slack = T::tol(ROBUST_SLACK);
    for s in 0..mdp.num_states {
        for a in (0..mdp.num_actions).filter(|&a| a != pi.action(s)) {
            let other = mdp.normalized_return(&pi.neighbor(s, a))?;
            if base + slack < other + eps {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpsOptimalActionSets {
    /// Sorted action indices per state.
    pub actions_of: Vec<Vec<usize>>,
}

impl EpsOptimalActionSets {
    pub fn contains(&self, s: usize, a: usize) -> bool {
        self.actions_of[s].binary_search(&a).is_ok()
    }
}

/// For each state, the actions used by some policy whose normalized return is
/// within `eps` of the best.
pub fn eps_optimal_action_sets<T: Scalar>(mdp: &TabularMdp<T>, eps: T, cap: u64) -> Result<EpsOptimalActionSets> {
    let scored: Vec<(Policy, T)> = enumerate_policies(mdp, cap)?
        .map(|pi| {
            let ret = mdp.normalized_return(&pi)?;
            Ok((pi, ret))
        })
        .collect::<Result<_>>()?;
    let best = scored.iter().map(|(_, r)| *r).fold(T::neg_infinity(), T::max);
    let mut member = vec![vec![false; mdp.num_actions]; mdp.num_states];
    for (pi, ret) in &scored {
        if *ret >= best - eps {
            for (s, &a) in pi.action_of.iter().enumerate() {
                member[s][a] = true;
            }
        }
    }
    let actions_of = member
        .into_iter()
        .map(|row| {
            row.into_iter()
                .enumerate()
                .filter_map(|(a, m)| m.then_some(a))
                .collect()
        })
        .collect();
    Ok(EpsOptimalActionSets { actions_of })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyBounds<T> {
    /// `min_{s, pi} mu^pi(s)`
    pub mu_min: T,
    /// `g[s][a] = min_{pi: pi(s) = a} mu^pi(s)`
    pub g: Vec<Vec<T>>,
}

impl<T: Scalar> OccupancyBounds<T> {
    pub fn all_states_reachable(&self) -> bool {
        self.mu_min > T::tol(1e-12)
    }
}

pub fn mu_min_and_g<T: Scalar>(mdp: &TabularMdp<T>, cap: u64) -> Result<OccupancyBounds<T>> {
    let mut g = vec![vec![T::infinity(); mdp.num_actions]; mdp.num_states];
    for pi in enumerate_policies(mdp, cap)? {
        let mu = mdp.occupancy(&pi)?.mu;
        for (s, &a) in pi.action_of.iter().enumerate() {
            g[s][a] = g[s][a].min(mu[s]);
        }
    }
    let mu_min = g.iter().flatten().copied().fold(T::infinity(), T::min);
    let bounds = OccupancyBounds { mu_min, g };
    if !bounds.all_states_reachable() {
        log::warn!("mu_min = {mu_min} is not positive: some state is unreachable under some policy");
    }
    Ok(bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_abs_diff_eq;
    use std::collections::HashSet;

    #[test]
    fn enumeration_counts() {
        let m = fixtures::single_state();
        assert_eq!(enumerate_policies(&m, 10).unwrap().count(), 2);
        assert_eq!(enumerate_policies(&fixtures::two_state(), 10).unwrap().count(), 4);
        let big = fixtures::uniform_random(3, 3, 0.9, 7);
        let all: Vec<Policy> = enumerate_policies(&big, 100).unwrap().collect();
        assert_eq!(all.len(), 27);
        assert_eq!(all.iter().collect::<HashSet<_>>().len(), 27);
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(all, sorted);
    }

    #[test]
    fn enumeration_cap() {
        let big = fixtures::uniform_random(3, 3, 0.9, 7);
        assert!(matches!(
            enumerate_policies(&big, 26),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn rho_identity_examples() {
        let m = fixtures::single_state();
        assert!(rho_identity_check(&m, &Policy::new(vec![0])).unwrap() < 1e-12);
        let c = fixtures::two_state_cycle();
        assert!(rho_identity_check(&c, &Policy::new(vec![0, 1])).unwrap() < 1e-12);
        let z = c.with_rewards(vec![vec![0.0; 2]; 2]);
        assert_eq!(rho_identity_check(&z, &Policy::new(vec![0, 0])).unwrap(), 0.0);
    }

    #[test]
    fn difference_identity_examples() {
        let m = fixtures::single_state();
        let (a0, a1) = (Policy::new(vec![0]), Policy::new(vec![1]));
        assert_eq!(q_rho_difference_check(&m, &a0, &a0).unwrap(), 0.0);
        assert!(q_rho_difference_check(&m, &a0, &a1).unwrap() < 1e-12);
        let c = fixtures::cycle_with_self_loop();
        let all: Vec<Policy> = enumerate_policies(&c, 10).unwrap().collect();
        for p in &all {
            for q in &all {
                assert!(q_rho_difference_check(&c, p, q).unwrap() <= 1e-8);
            }
        }
    }

    #[test]
    fn robust_optimality_examples() {
        let m = fixtures::single_state();
        assert!(is_eps_robust_optimal(&m, &Policy::new(vec![0]), 1.0).unwrap());
        assert!(!is_eps_robust_optimal(&m, &Policy::new(vec![1]), 0.1).unwrap());
        assert!(!is_eps_robust_optimal(&m, &Policy::new(vec![0]), 1.5).unwrap());
        assert!(is_eps_robust_optimal(&m, &Policy::new(vec![0]), 0.0).is_err());
    }

    #[test]
    fn eps_optimal_sets_examples() {
        let m = fixtures::single_state();
        let sets = eps_optimal_action_sets(&m, 0.5, 10).unwrap();
        assert_eq!(sets.actions_of, vec![vec![0]]);
        let sets = eps_optimal_action_sets(&m, 100.0, 10).unwrap();
        assert_eq!(sets.actions_of, vec![vec![0, 1]]);

        let c = fixtures::cycle_with_self_loop();
        let star = c.value_iteration(1e-12).unwrap().pi_star;
        let sets = eps_optimal_action_sets(&c, 0.0, 10).unwrap();
        // both actions at s0 are identical, so both are optimal there
        assert_eq!(sets.actions_of[1], vec![star.action(1)]);
        assert!(sets.contains(0, 0) && sets.contains(0, 1));
    }

    #[test]
    fn occupancy_bounds_examples() {
        let m = fixtures::single_state();
        let b = mu_min_and_g(&m, 10).unwrap();
        assert_abs_diff_eq!(b.mu_min, 1.0, epsilon = 1e-12);
        assert!(b.g.iter().flatten().all(|&x| (x - 1.0).abs() < 1e-12));

        let c = fixtures::two_state_cycle();
        let b = mu_min_and_g(&c, 10).unwrap();
        assert_abs_diff_eq!(b.mu_min, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.g[0][1], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(b.g[1][0], 1.0 / 3.0, epsilon = 1e-12);
        let min_g = b.g.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(min_g, b.mu_min);

        // a self-loop at s0 starting from s0 never reaches s1
        let trap = TabularMdp::new(
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            ],
            0.9,
            vec![1.0, 0.0],
            5,
            0.0,
        )
        .unwrap();
        assert!(!mu_min_and_g(&trap, 10).unwrap().all_states_reachable());
    }
}
