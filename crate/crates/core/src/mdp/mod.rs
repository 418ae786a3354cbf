//! Exact tabular MDPs and ground-truth dynamic programming.
//!
//! Values `V`, `Q` and the return `rho = sum_s d0(s) V(s)` are infinite-horizon
//! discounted quantities; the horizon `H` only matters to the simulator, which
//! resets episodes from `d0` every `H` steps.
//!
//! Comparisons between policies (epsilon-optimality, epsilon-robust
//! optimality) are made on the normalized return `(1 - gamma) * rho`, which
//! equals `sum_s mu(s) R(s, pi(s))` for the discounted state distribution `mu`.
//! The neighbor-policy difference identity and the closed-form perturbation in
//! [`crate::whitebox`] are exact on that scale.

mod dp;
mod linalg;
mod oracle;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use dp::{ValueFunctions, DEFAULT_EVAL_TOL};
pub use oracle::{
    enumerate_policies, eps_optimal_action_sets, is_eps_robust_optimal, mu_min_and_g, q_rho_difference_check,
    rho_identity_check, EpsOptimalActionSets, OccupancyBounds, PolicyEnumerator, DEFAULT_ENUMERATION_CAP, ROBUST_SLACK,
};

/// Full environment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct TabularMdp<T> {
    pub num_states: usize,
    pub num_actions: usize,
    /// `rewards[s][a]`, expected reward.
    pub rewards: Vec<Vec<T>>,
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<T>>>,
    pub gamma: T,
    pub initial_dist: Vec<T>,
    /// Episode length used by the simulator.
    pub horizon: usize,
    /// Standard deviation of the Gaussian reward noise.
    pub noise_sigma: T,
}

/// Deterministic policy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy {
    pub action_of: Vec<usize>,
}

impl Policy {
    pub fn new(action_of: Vec<usize>) -> Self {
        Policy { action_of }
    }

    /// The policy that plays `action` everywhere.
    pub fn constant(num_states: usize, action: usize) -> Self {
        Policy {
            action_of: vec![action; num_states],
        }
    }

    pub fn num_states(&self) -> usize {
        self.action_of.len()
    }

    pub fn action(&self, s: usize) -> usize {
        self.action_of[s]
    }

    /// `pi{s; a}`: this policy with state `s` remapped to `a`.
    pub fn neighbor(&self, s: usize, a: usize) -> Policy {
        let mut action_of = self.action_of.clone();
        action_of[s] = a;
        Policy { action_of }
    }

    pub fn validate(&self, num_states: usize, num_actions: usize) -> Result<()> {
        if self.action_of.len() != num_states {
            return Err(Error::InvalidInput(format!(
                "policy covers {} states, MDP has {}",
                self.action_of.len(),
                num_states
            )));
        }
        if let Some((s, &a)) = self.action_of.iter().enumerate().find(|(_, &a)| a >= num_actions) {
            return Err(Error::InvalidInput(format!(
                "policy maps state {s} to action {a}, but only {num_actions} actions exist"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.action_of.iter().map(|a| a.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// `pi{s; a}`
pub fn neighbor_policy(pi: &Policy, s: usize, a: usize) -> Policy {
    pi.neighbor(s, a)
}

fn prob_tol<T: Scalar>() -> T {
    T::tol(1e-12)
}

fn check_distribution<T: Scalar>(p: &[T], len: usize, what: &str) -> Result<()> {
    if p.len() != len {
        return Err(Error::InvalidMdp(format!(
            "{what} has {} entries, expected {len}",
            p.len()
        )));
    }
    if let Some((i, x)) = p.iter().enumerate().find(|(_, x)| !x.is_finite() || **x < T::zero()) {
        return Err(Error::InvalidMdp(format!(
            "{what}[{i}] = {x} is negative or not finite"
        )));
    }
    let total: T = p.iter().copied().sum();
    if (total - T::one()).abs() > prob_tol() {
        return Err(Error::InvalidMdp(format!("{what} sums to {total}, expected 1")));
    }
    Ok(())
}

impl<T: Scalar> TabularMdp<T> {
    /// Builds and validates an MDP.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rewards: Vec<Vec<T>>,
        transitions: Vec<Vec<Vec<T>>>,
        gamma: T,
        initial_dist: Vec<T>,
        horizon: usize,
        noise_sigma: T,
    ) -> Result<Self> {
        let num_states = rewards.len();
        let num_actions = rewards.first().map_or(0, Vec::len);
        let mdp = TabularMdp {
            num_states,
            num_actions,
            rewards,
            transitions,
            gamma,
            initial_dist,
            horizon,
            noise_sigma,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.num_states, self.num_actions);
        if ns == 0 || na == 0 {
            return Err(Error::InvalidMdp("num_states and num_actions must be positive".into()));
        }
        if self.rewards.len() != ns {
            return Err(Error::InvalidMdp(format!(
                "rewards has {} rows, expected num_states = {ns}",
                self.rewards.len()
            )));
        }
        for (s, row) in self.rewards.iter().enumerate() {
            if row.len() != na {
                return Err(Error::InvalidMdp(format!(
                    "rewards[{s}] has {} entries, expected num_actions = {na}",
                    row.len()
                )));
            }
            if let Some((a, r)) = row.iter().enumerate().find(|(_, r)| !r.is_finite()) {
                return Err(Error::InvalidMdp(format!("rewards[{s}][{a}] = {r} is not finite")));
            }
        }
        if self.transitions.len() != ns {
            return Err(Error::InvalidMdp(format!(
                "transitions has {} rows, expected num_states = {ns}",
                self.transitions.len()
            )));
        }
        for (s, per_action) in self.transitions.iter().enumerate() {
            if per_action.len() != na {
                return Err(Error::InvalidMdp(format!(
                    "transitions[{s}] has {} entries, expected num_actions = {na}",
                    per_action.len()
                )));
            }
            for (a, row) in per_action.iter().enumerate() {
                check_distribution(row, ns, &format!("transitions[{s}][{a}]"))?;
            }
        }
        check_distribution(&self.initial_dist, ns, "initial_dist")?;
        if !(self.gamma > T::zero() && self.gamma < T::one()) {
            return Err(Error::InvalidMdp(format!("gamma = {} must lie in (0, 1)", self.gamma)));
        }
        if !(self.noise_sigma >= T::zero()) || !self.noise_sigma.is_finite() {
            return Err(Error::InvalidMdp(format!(
                "noise_sigma = {} must be finite and nonnegative",
                self.noise_sigma
            )));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidMdp("horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn check_policy(&self, pi: &Policy) -> Result<()> {
        pi.validate(self.num_states, self.num_actions)
    }

    /// Same dynamics with a different reward table.
    pub fn with_rewards(&self, rewards: Vec<Vec<T>>) -> Self {
        TabularMdp {
            rewards,
            ..self.clone()
        }
    }

    /// `max R - min R` over all pairs.
    pub fn reward_range(&self) -> T {
        let (lo, hi) = self
            .rewards
            .iter()
            .flatten()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &r| {
                (lo.min(r), hi.max(r))
            });
        hi - lo
    }

    /// `||R||_inf`
    pub fn reward_sup_norm(&self) -> T {
        crate::scalar::sup_norm(&self.rewards)
    }

    /// Parses and validates the JSON MDP format.
    pub fn from_json_str(text: &str) -> Result<Self>
    where
        T: for<'de> Deserialize<'de>,
    {
        let mdp: TabularMdp<T> = serde_json::from_str(text).map_err(|source| Error::Json {
            path: "<input>".into(),
            source,
        })?;
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self>
    where
        T: for<'de> Deserialize<'de>,
    {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mdp: TabularMdp<T> = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })?;
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn to_json_string(&self) -> String
    where
        T: Serialize,
    {
        serde_json::to_string_pretty(self).expect("MDP serializes")
    }
}
