//! Policy evaluation over a confidence set.
//!
//! Rewards range over per-pair intervals and transition rows over L1 balls
//! intersected with the simplex. Low and high values are fixed points of the
//! robust Bellman operator, started from zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::ConfidenceSet;
use crate::error::{Error, Result};
use crate::mdp::{Policy, TabularMdp};
use crate::scalar::{pos, Scalar};
use crate::whitebox::{AttackConfig, Perturbation, POSITIVITY_THRESHOLD};

/// Default value tolerance for robust evaluation.
pub const ROBUST_EVAL_TOL: f64 = 1e-10;
const MAX_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Min,
    Max,
}

/// States sorted by value, ascending, ties by index.
fn ascending_order<T: Scalar>(v: &[T]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| {
        v[i].partial_cmp(&v[j])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Sorted-greedy solution written into `out`: up to `budget / 2` mass moves
/// onto the best state, taken from the worst states first.
fn greedy_into<T: Scalar>(p_hat: &[T], budget: T, order: &[usize], orientation: Orientation, out: &mut Vec<T>) {
    out.clear();
    out.extend_from_slice(p_hat);
    if order.is_empty() {
        return;
    }
    let (best, donors): (usize, Box<dyn Iterator<Item = &usize>>) = match orientation {
        Orientation::Max => (order[order.len() - 1], Box::new(order.iter())),
        Orientation::Min => (order[0], Box::new(order.iter().rev())),
    };
    let mut moving = (budget / T::lit(2.0)).min(T::one() - out[best]).max(T::zero());
    out[best] = out[best] + moving;
    for &i in donors {
        if moving <= T::zero() {
            break;
        }
        if i == best {
            continue;
        }
        let take = out[i].min(moving);
        out[i] = out[i] - take;
        moving = moving - take;
    }
}

/// Optimizer of `sum_x p(x) v(x)` over distributions within L1 distance
/// `budget` of `p_hat`.
pub fn inner_linear_opt<T: Scalar>(p_hat: &[T], budget: T, v: &[T], orientation: Orientation) -> Vec<T> {
    let order = ascending_order(v);
    let mut out = Vec::with_capacity(p_hat.len());
    greedy_into(p_hat, budget, &order, orientation, &mut out);
    out
}

fn check_complete<T: Scalar>(cs: &ConfidenceSet<T>) -> Result<()> {
    let unvisited = cs.counts.unvisited_pairs();
    if unvisited.is_empty() {
        Ok(())
    } else {
        Err(Error::UnvisitedPairs(unvisited))
    }
}

/// Extreme reward of `(s, a)` in the given direction.
fn reward_extreme<T: Scalar>(cs: &ConfidenceSet<T>, s: usize, a: usize, orientation: Orientation) -> T {
    match orientation {
        Orientation::Min => cs.r_low(s, a),
        Orientation::Max => cs.r_high(s, a),
    }
}

/// Robust value of `pi`: the lowest (`Min`) or highest (`Max`) value over
/// the set. With `reward_override` the reward set of every pair is that
/// single value.
pub fn robust_policy_eval<T: Scalar>(
    cs: &ConfidenceSet<T>,
    pi: &Policy,
    orientation: Orientation,
    reward_override: Option<&[Vec<T>]>,
    tol: T,
) -> Result<Vec<T>> {
    if !(tol > T::zero()) {
        return Err(Error::InvalidInput(format!("tolerance {tol} must be positive")));
    }
    check_complete(cs)?;
    let ns = cs.num_states();
    pi.validate(ns, cs.num_actions())?;
    let gamma = cs.gamma();
    let rewards: Vec<T> = (0..ns)
        .map(|s| match reward_override {
            Some(table) => table[s][pi.action(s)],
            None => reward_extreme(cs, s, pi.action(s), orientation),
        })
        .collect();
    let threshold = T::tol(tol.as_f64()) * (T::one() - gamma) / (T::lit(2.0) * gamma);
    let mut v = vec![T::zero(); ns];
    let mut next = vec![T::zero(); ns];
    let mut row = Vec::with_capacity(ns);
    for _ in 0..MAX_ITERATIONS {
        let order = ascending_order(&v);
        let mut change = T::zero();
        for s in 0..ns {
            let a = pi.action(s);
            greedy_into(
                &cs.p_hat[s][a],
                cs.transition_budget[s][a],
                &order,
                orientation,
                &mut row,
            );
            let expected: T = row.iter().zip(&v).map(|(&p, &x)| p * x).sum();
            next[s] = rewards[s] + gamma * expected;
            change = change.max((next[s] - v[s]).abs());
        }
        std::mem::swap(&mut v, &mut next);
        if change <= threshold {
            return Ok(v);
        }
    }
    Err(Error::NonConvergence {
        what: "robust policy evaluation",
        iterations: MAX_ITERATIONS,
    })
}

/// One robust backup of `v` at every pair.
fn robust_q<T: Scalar>(cs: &ConfidenceSet<T>, v: &[T], orientation: Orientation) -> Vec<Vec<T>> {
    let order = ascending_order(v);
    let mut row = Vec::with_capacity(v.len());
    (0..cs.num_states())
        .map(|s| {
            (0..cs.num_actions())
                .map(|a| {
                    greedy_into(
                        &cs.p_hat[s][a],
                        cs.transition_budget[s][a],
                        &order,
                        orientation,
                        &mut row,
                    );
                    let expected: T = row.iter().zip(v).map(|(&p, &x)| p * x).sum();
                    reward_extreme(cs, s, a, orientation) + cs.gamma() * expected
                })
                .collect()
        })
        .collect()
}

/// High action values of `pi`, together with the high state values they
/// are built from.
pub fn q_high<T: Scalar>(cs: &ConfidenceSet<T>, pi: &Policy, tol: T) -> Result<(Vec<T>, Vec<Vec<T>>)> {
    let v_high = robust_policy_eval(cs, pi, Orientation::Max, None, tol)?;
    let q = robust_q(cs, &v_high, Orientation::Max);
    Ok((v_high, q))
}

/// Lowest occupancy of `target_state` under `pi` over the set.
pub fn mu_low<T: Scalar>(cs: &ConfidenceSet<T>, pi: &Policy, target_state: usize, tol: T) -> Result<T> {
    let (ns, na) = (cs.num_states(), cs.num_actions());
    if target_state >= ns {
        return Err(Error::InvalidInput(format!("state {target_state} out of range")));
    }
    let mut indicator = vec![vec![T::zero(); na]; ns];
    indicator[target_state] = vec![T::one(); na];
    let v = robust_policy_eval(cs, pi, Orientation::Min, Some(&indicator), tol)?;
    let rho: T = cs.initial_dist().iter().zip(&v).map(|(&d, &x)| d * x).sum();
    Ok(((T::one() - cs.gamma()) * rho).max(T::zero()).min(T::one()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct RobustValues<T> {
    pub v_low: Vec<T>,
    pub v_high: Vec<T>,
    pub q_high: Vec<Vec<T>>,
    /// `mu_low[s][a]` is the lowest occupancy of `s` under the neighbor
    /// policy that plays `a` at `s`; at target actions it is the target's own.
    pub mu_low: Vec<Vec<T>>,
}

/// Everything the robust perturbation needs for `target`. The indicator
/// evaluations run in parallel.
pub fn robust_values<T: Scalar>(cs: &ConfidenceSet<T>, target: &Policy, tol: T) -> Result<RobustValues<T>> {
    let v_low = robust_policy_eval(cs, target, Orientation::Min, None, tol)?;
    let (v_high, q_high) = q_high(cs, target, tol)?;
    let (ns, na) = (cs.num_states(), cs.num_actions());
    let pairs: Vec<(usize, usize)> = (0..ns).flat_map(|s| (0..na).map(move |a| (s, a))).collect();
    let mus: Vec<T> = pairs
        .par_iter()
        .map(|&(s, a)| mu_low(cs, &target.neighbor(s, a), s, tol))
        .collect::<Result<_>>()?;
    let mu_low = mus.chunks(na).map(<[T]>::to_vec).collect();
    Ok(RobustValues {
        v_low,
        v_high,
        q_high,
        mu_low,
    })
}

/// `[Q_high(s, a) - V_low(s) + eps / mu_low(s, a)]_+` off target, zero on it.
pub fn delta_hat_from_values<T: Scalar>(values: &RobustValues<T>, cfg: &AttackConfig<T>) -> Result<Perturbation<T>> {
    let ns = values.v_low.len();
    let na = values.q_high.first().map_or(0, Vec::len);
    let mut out = Perturbation::zeros(ns, na);
    for s in 0..ns {
        for a in (0..na).filter(|&a| a != cfg.target.action(s)) {
            let mu = values.mu_low[s][a];
            if mu <= T::lit(POSITIVITY_THRESHOLD) {
                return Err(Error::ZeroMuLow {
                    state: s,
                    action: a,
                    mu: mu.as_f64(),
                });
            }
            out.delta[s][a] = pos(values.q_high[s][a] - values.v_low[s] + cfg.eps / mu);
        }
    }
    Ok(out)
}

/// Robust perturbation: dominates the white-box perturbation of every
/// member of the set.
pub fn delta_hat<T: Scalar>(cs: &ConfidenceSet<T>, cfg: &AttackConfig<T>) -> Result<Perturbation<T>> {
    cfg.validate()?;
    cfg.target.validate(cs.num_states(), cs.num_actions())?;
    let values = robust_values(cs, &cfg.target, T::lit(ROBUST_EVAL_TOL))?;
    delta_hat_from_values(&values, cfg)
}

/// Worst action-value gap between two models and the bound
/// `(||R1 - R2||_inf + gamma * range * max ||P1 - P2||_1) / (1 - gamma)^2`.
pub fn simulation_lemma_bound<T: Scalar>(m1: &TabularMdp<T>, m2: &TabularMdp<T>, pi: &Policy) -> Result<(T, T)> {
    if m1.num_states != m2.num_states || m1.num_actions != m2.num_actions || m1.gamma != m2.gamma {
        return Err(Error::InvalidInput("models differ in shape or discount".into()));
    }
    let q1 = m1.evaluate(pi)?.q;
    let q2 = m2.evaluate(pi)?.q;
    let mut lhs = T::zero();
    let mut reward_gap = T::zero();
    let mut transition_gap = T::zero();
    let mut hi = T::neg_infinity();
    let mut lo = T::infinity();
    for s in 0..m1.num_states {
        for a in 0..m1.num_actions {
            lhs = lhs.max((q1[s][a] - q2[s][a]).abs());
            reward_gap = reward_gap.max((m1.rewards[s][a] - m2.rewards[s][a]).abs());
            let l1: T = m1.transitions[s][a]
                .iter()
                .zip(&m2.transitions[s][a])
                .map(|(&x, &y)| (x - y).abs())
                .sum();
            transition_gap = transition_gap.max(l1);
            for r in [m1.rewards[s][a], m2.rewards[s][a]] {
                hi = hi.max(r);
                lo = lo.min(r);
            }
        }
    }
    let g = m1.gamma;
    let rhs = (reward_gap + g * (hi - lo) * transition_gap) / ((T::one() - g) * (T::one() - g));
    Ok((lhs, rhs))
}
