//! Closed-form white-box reward perturbation.
//!
//! With full knowledge of the MDP, the entrywise-minimal nonnegative
//! perturbation that makes the target epsilon-robust optimal while leaving
//! the target actions untouched is
//!
//! `delta*(s, a) = [Q(s, a) - V(s) + eps / mu_{pi{s;a}}(s)]_+` for `a != target(s)`,
//!
//! all quantities taken for the target policy in the true MDP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{is_eps_robust_optimal, Policy, TabularMdp};
use crate::scalar::{pos, sup_norm, Scalar};
use crate::simulator::{Attacker, Interaction, Phase, SimRng};

/// Occupancies at or below this count as zero.
pub const POSITIVITY_THRESHOLD: f64 = 1e-12;

/// Allowed gap between the two feasibility checks before they are reported
/// as inconsistent.
pub const CONSISTENCY_SLACK: f64 = 1e-7;

/// Reward shift table; delivered rewards are `r - delta[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct Perturbation<T> {
    pub delta: Vec<Vec<T>>,
}

impl<T: Scalar> Perturbation<T> {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Perturbation {
            delta: vec![vec![T::zero(); num_actions]; num_states],
        }
    }

    pub fn get(&self, s: usize, a: usize) -> T {
        self.delta[s][a]
    }

    /// `r - delta(s, a)`
    pub fn apply(&self, s: usize, a: usize, r: T) -> T {
        r - self.delta[s][a]
    }

    pub fn sup_norm(&self) -> T {
        sup_norm(&self.delta)
    }

    pub fn l1_norm(&self) -> T {
        self.delta.iter().flatten().map(|x| x.abs()).sum()
    }

    /// True when every target entry is exactly zero.
    pub fn spares_target(&self, target: &Policy) -> bool {
        target
            .action_of
            .iter()
            .enumerate()
            .all(|(s, &a)| self.delta[s][a] == T::zero())
    }

    pub fn is_nonnegative(&self) -> bool {
        self.delta.iter().flatten().all(|x| x.is_finite() && *x >= T::zero())
    }

    /// The MDP whose rewards are `R - delta`.
    pub fn poisoned(&self, mdp: &TabularMdp<T>) -> TabularMdp<T> {
        let rewards = mdp
            .rewards
            .iter()
            .zip(&self.delta)
            .map(|(r, d)| r.iter().zip(d).map(|(&r, &d)| r - d).collect())
            .collect();
        mdp.with_rewards(rewards)
    }
}

/// `r' = r - delta(s, a)`
pub fn apply_perturbation<T: Scalar>(delta: &Perturbation<T>, s: usize, a: usize, r: T) -> T {
    delta.apply(s, a, r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct AttackConfig<T> {
    pub target: Policy,
    /// Robust-optimality margin.
    pub eps: T,
    /// Penalty per off-target step.
    pub lambda: T,
}

impl<T: Scalar> AttackConfig<T> {
    pub fn new(target: Policy, eps: T, lambda: T) -> Result<Self> {
        let cfg = AttackConfig { target, eps, lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > T::zero()) {
            return Err(Error::Config {
                field: "eps".into(),
                message: format!("{} must be positive", self.eps),
            });
        }
        if !(self.lambda > T::zero()) {
            return Err(Error::Config {
                field: "lambda".into(),
                message: format!("{} must be positive", self.lambda),
            });
        }
        Ok(())
    }
}

/// `delta*_M` for the configured target.
pub fn delta_star<T: Scalar>(mdp: &TabularMdp<T>, cfg: &AttackConfig<T>) -> Result<Perturbation<T>> {
    cfg.validate()?;
    let target = &cfg.target;
    mdp.check_policy(target)?;
    let values = mdp.evaluate(target)?;
    let mut out = Perturbation::zeros(mdp.num_states, mdp.num_actions);
    for s in 0..mdp.num_states {
        for a in (0..mdp.num_actions).filter(|&a| a != target.action(s)) {
            let mu = mdp.occupancy(&target.neighbor(s, a))?.mu[s];
            if mu <= T::lit(POSITIVITY_THRESHOLD) {
                return Err(Error::PositivityViolation {
                    state: s,
                    action: a,
                    mu: mu.as_f64(),
                });
            }
            out.delta[s][a] = pos(values.q[s][a] - values.v[s] + cfg.eps / mu);
        }
    }
    Ok(out)
}

/// Feasibility for the white-box program, checked two ways: entrywise
/// domination of `delta*` and a direct neighbor check in `R - delta`.
pub fn is_feasible_p1<T: Scalar>(mdp: &TabularMdp<T>, cfg: &AttackConfig<T>, delta: &Perturbation<T>) -> Result<bool> {
    let shape_ok = delta.is_nonnegative() && delta.spares_target(&cfg.target);
    let star = delta_star(mdp, cfg)?;
    let slack = T::tol(crate::mdp::ROBUST_SLACK);
    let mut worst_gap = T::infinity();
    for s in 0..mdp.num_states {
        for a in (0..mdp.num_actions).filter(|&a| a != cfg.target.action(s)) {
            worst_gap = worst_gap.min(delta.delta[s][a] - star.delta[s][a]);
        }
    }
    let characterized = shape_ok && worst_gap >= -slack;
    let direct = shape_ok && is_eps_robust_optimal(&delta.poisoned(mdp), &cfg.target, cfg.eps)?;
    if characterized != direct && worst_gap.abs() > T::lit(CONSISTENCY_SLACK) {
        return Err(Error::InternalConsistency(format!(
            "domination check says {characterized}, neighbor check says {direct} \
             (smallest delta - delta* = {worst_gap})"
        )));
    }
    Ok(characterized && direct)
}

/// `(||delta||_inf + lambda) * subopt_count / T`
pub fn fixed_attack_cost_bound<T: Scalar>(
    delta: &Perturbation<T>,
    lambda: T,
    subopt_count: u64,
    total_steps: usize,
) -> T {
    (delta.sup_norm() + lambda) * T::from_count(subopt_count) / T::from_count(total_steps as u64)
}

/// Attacker that applies a fixed perturbation to every learner.
#[derive(Debug, Clone)]
pub struct FixedPerturbationAttacker {
    delta: Perturbation<f64>,
    phase: Phase,
}

impl FixedPerturbationAttacker {
    pub fn new(delta: Perturbation<f64>) -> Self {
        FixedPerturbationAttacker {
            delta,
            phase: Phase::Attack,
        }
    }

    pub fn perturbation(&self) -> &Perturbation<f64> {
        &self.delta
    }
}

impl Attacker for FixedPerturbationAttacker {
    fn perturb(&mut self, step: &Interaction, _rng: &mut SimRng) -> f64 {
        self.delta.apply(step.state, step.action, step.reward)
    }

    fn phase(&self) -> Phase {
        self.phase
    }
}
