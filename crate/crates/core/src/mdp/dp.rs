use super::linalg;
use super::{Policy, TabularMdp};
use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};

/// Fixed-point tolerance for the iterative fallback of policy evaluation.
pub const DEFAULT_EVAL_TOL: f64 = 1e-10;

/// Largest state space solved directly; bigger systems iterate.
const DIRECT_SOLVE_MAX_STATES: usize = 2000;
const MAX_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunctions<T> {
    pub v: Vec<T>,
    pub q: Vec<Vec<T>>,
    /// `sum_s d0(s) V(s)`
    pub rho: T,
}

/// Discounted state distribution `mu(s) = (1 - gamma) sum_t gamma^t Pr[s_t = s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure<T> {
    pub mu: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalSolution<T> {
    pub v_star: Vec<T>,
    pub q_star: Vec<Vec<T>>,
    pub pi_star: Policy,
}

/// Sup-norm change below which a gamma-contraction is within `tol` of its
/// fixed point.
pub(crate) fn contraction_threshold<T: Scalar>(tol: T, gamma: T) -> T {
    (tol * (T::one() - gamma) / (T::lit(2.0) * gamma)).max(T::epsilon() * T::lit(16.0))
}

impl<T: Scalar> TabularMdp<T> {
    /// `sum_{s'} P(s, a, s') v(s')`
    pub fn expected_next(&self, s: usize, a: usize, v: &[T]) -> T {
        self.transitions[s][a].iter().zip(v).map(|(&p, &x)| p * x).sum()
    }

    /// `Q(s, a) = R(s, a) + gamma E[v(s')]` for every pair.
    pub fn q_from_v(&self, v: &[T]) -> Vec<Vec<T>> {
        (0..self.num_states)
            .map(|s| {
                (0..self.num_actions)
                    .map(|a| self.rewards[s][a] + self.gamma * self.expected_next(s, a, v))
                    .collect()
            })
            .collect()
    }

    /// Exact `V^pi`, `Q^pi` and `rho^pi`.
    pub fn evaluate(&self, pi: &Policy) -> Result<ValueFunctions<T>> {
        self.check_policy(pi)?;
        let v = self.solve_values(pi)?;
        let q = self.q_from_v(&v);
        let rho = self.initial_dist.iter().zip(&v).map(|(&d, &x)| d * x).sum();
        Ok(ValueFunctions { v, q, rho })
    }

    /// `rho^pi`
    pub fn rho(&self, pi: &Policy) -> Result<T> {
        Ok(self.evaluate(pi)?.rho)
    }

    /// `(1 - gamma) rho^pi`, the scale on which policies are compared.
    pub fn normalized_return(&self, pi: &Policy) -> Result<T> {
        Ok((T::one() - self.gamma) * self.rho(pi)?)
    }

    fn solve_values(&self, pi: &Policy) -> Result<Vec<T>> {
        let n = self.num_states;
        let rewards: Vec<T> = (0..n).map(|s| self.rewards[s][pi.action(s)]).collect();
        if n <= DIRECT_SOLVE_MAX_STATES {
            let a: Vec<Vec<T>> = (0..n)
                .map(|s| {
                    let row = &self.transitions[s][pi.action(s)];
                    (0..n)
                        .map(|j| {
                            let id = if s == j { T::one() } else { T::zero() };
                            id - self.gamma * row[j]
                        })
                        .collect()
                })
                .collect();
            if let Some(v) = linalg::solve(a, rewards.clone()) {
                return Ok(v);
            }
            log::debug!("direct policy evaluation failed, falling back to iteration");
        }
        let threshold = contraction_threshold(T::tol(DEFAULT_EVAL_TOL), self.gamma);
        let mut v = vec![T::zero(); n];
        for _ in 0..MAX_ITERATIONS {
            let next: Vec<T> = (0..n)
                .map(|s| rewards[s] + self.gamma * self.expected_next(s, pi.action(s), &v))
                .collect();
            let change = next.iter().zip(&v).fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()));
            v = next;
            if change <= threshold {
                return Ok(v);
            }
        }
        Err(Error::NonConvergence {
            what: "policy evaluation",
            iterations: MAX_ITERATIONS,
        })
    }

    /// Optimal values by value iteration. The greedy policy takes the lowest
    /// action index among ties.
    pub fn value_iteration(&self, tol: T) -> Result<OptimalSolution<T>> {
        if !(tol > T::zero()) {
            return Err(Error::InvalidInput(format!("tolerance {tol} must be positive")));
        }
        let threshold = contraction_threshold(tol, self.gamma);
        let mut v = vec![T::zero(); self.num_states];
        for _ in 0..MAX_ITERATIONS {
            let q = self.q_from_v(&v);
            let next: Vec<T> = q
                .iter()
                .map(|row| row.iter().copied().fold(T::neg_infinity(), T::max))
                .collect();
            let change = next.iter().zip(&v).fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()));
            v = next;
            if change <= threshold {
                let q_star = self.q_from_v(&v);
                let pi_star = Policy::new(q_star.iter().map(|row| argmax(row)).collect());
                return Ok(OptimalSolution {
                    v_star: v,
                    q_star,
                    pi_star,
                });
            }
        }
        Err(Error::NonConvergence {
            what: "value iteration",
            iterations: MAX_ITERATIONS,
        })
    }

    /// `mu^pi = (1 - gamma) d0^T (I - gamma P_pi)^{-1}`.
    pub fn occupancy(&self, pi: &Policy) -> Result<OccupancyMeasure<T>> {
        self.check_policy(pi)?;
        let n = self.num_states;
        let scale = T::one() - self.gamma;
        let rhs: Vec<T> = self.initial_dist.iter().map(|&d| scale * d).collect();
        if n <= DIRECT_SOLVE_MAX_STATES {
            // transpose system: mu_j - gamma sum_s mu_s P(s, pi(s), j) = (1-gamma) d0_j
            let a: Vec<Vec<T>> = (0..n)
                .map(|j| {
                    (0..n)
                        .map(|s| {
                            let id = if s == j { T::one() } else { T::zero() };
                            id - self.gamma * self.transitions[s][pi.action(s)][j]
                        })
                        .collect()
                })
                .collect();
            if let Some(mu) = linalg::solve(a, rhs.clone()) {
                // round-off can leave tiny negatives
                let mu = mu.into_iter().map(|x| x.max(T::zero())).collect();
                return Ok(OccupancyMeasure { mu });
            }
        }
        let threshold = contraction_threshold(T::tol(DEFAULT_EVAL_TOL), self.gamma);
        let mut mu = rhs.clone();
        for _ in 0..MAX_ITERATIONS {
            let mut next = rhs.clone();
            for s in 0..n {
                let row = &self.transitions[s][pi.action(s)];
                for j in 0..n {
                    next[j] = next[j] + self.gamma * mu[s] * row[j];
                }
            }
            let change = next.iter().zip(&mu).fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()));
            mu = next;
            if change <= threshold {
                return Ok(OccupancyMeasure { mu });
            }
        }
        Err(Error::NonConvergence {
            what: "occupancy",
            iterations: MAX_ITERATIONS,
        })
    }
}
