//! Observation bookkeeping and the confidence set of plausible MDPs.
//!
//! After `N(s, a)` observations a pair's reward lies within `u / sqrt(N)` of
//! its empirical mean and its transition row within L1 distance `w / sqrt(N)`
//! of the empirical frequencies, where
//!
//! `u = sqrt(2 sigma^2 ln(2 S A L / p))`, `w = sqrt(2 ln(2 S A L / p) + 2 S ln 2)`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::robust::{inner_linear_opt, Orientation};
use crate::scalar::Scalar;

/// Absolute slack used by [`ConfidenceSet::contains`] to absorb round-off in
/// the empirical means.
pub const MEMBERSHIP_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct ObservationCounts<T> {
    pub n: Vec<Vec<u64>>,
    pub reward_sum: Vec<Vec<T>>,
    pub next_counts: Vec<Vec<Vec<u64>>>,
    #[serde(skip)]
    version: u64,
}

impl<T: Scalar> ObservationCounts<T> {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        ObservationCounts {
            n: vec![vec![0; num_actions]; num_states],
            reward_sum: vec![vec![T::zero(); num_actions]; num_states],
            next_counts: vec![vec![vec![0; num_states]; num_actions]; num_states],
            version: 0,
        }
    }

    /// Counts as if every pair had been observed `n` times with its mean
    /// reward and with next-state frequencies rounded from `P`.
    pub fn from_model(mdp: &TabularMdp<T>, n: u64) -> Self {
        let mut counts = Self::new(mdp.num_states, mdp.num_actions);
        for s in 0..mdp.num_states {
            for a in 0..mdp.num_actions {
                let row = &mdp.transitions[s][a];
                let mut next: Vec<u64> = row
                    .iter()
                    .map(|&p| (p * T::from_count(n)).round().to_u64().unwrap_or(0))
                    .collect();
                let total: u64 = next.iter().sum();
                let biggest = crate::scalar::argmax(row);
                next[biggest] = (next[biggest] + n).saturating_sub(total);
                counts.n[s][a] = n;
                counts.reward_sum[s][a] = mdp.rewards[s][a] * T::from_count(n);
                counts.next_counts[s][a] = next;
            }
        }
        counts
    }

    pub fn num_states(&self) -> usize {
        self.n.len()
    }

    pub fn num_actions(&self) -> usize {
        self.n.first().map_or(0, Vec::len)
    }

    /// Bumped on every update; lets callers cache derived quantities.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn update(&mut self, s: usize, a: usize, r: T, next: usize) -> Result<()> {
        if !r.is_finite() {
            return Err(Error::InvalidInput(format!(
                "reward {r} observed at ({s}, {a}) is not finite"
            )));
        }
        if s >= self.num_states() || next >= self.num_states() || a >= self.num_actions() {
            return Err(Error::InvalidInput(format!(
                "observation ({s}, {a}, {next}) out of range"
            )));
        }
        self.n[s][a] += 1;
        self.reward_sum[s][a] = self.reward_sum[s][a] + r;
        self.next_counts[s][a][next] += 1;
        self.version += 1;
        Ok(())
    }

    pub fn n_min(&self) -> u64 {
        self.n.iter().flatten().copied().min().unwrap_or(0)
    }

    pub fn unvisited_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (s, row) in self.n.iter().enumerate() {
            for (a, &c) in row.iter().enumerate() {
                if c == 0 {
                    out.push((s, a));
                }
            }
        }
        out
    }

    /// Empirical mean reward; `None` for unvisited pairs.
    pub fn r_hat(&self, s: usize, a: usize) -> Option<T> {
        (self.n[s][a] > 0).then(|| self.reward_sum[s][a] / T::from_count(self.n[s][a]))
    }

    /// Empirical next-state distribution; `None` for unvisited pairs.
    pub fn p_hat(&self, s: usize, a: usize) -> Option<Vec<T>> {
        let n = self.n[s][a];
        (n > 0).then(|| {
            self.next_counts[s][a]
                .iter()
                .map(|&c| T::from_count(c) / T::from_count(n))
                .collect()
        })
    }

    fn check_consistency(&self) -> Result<()> {
        for s in 0..self.num_states() {
            for a in 0..self.num_actions() {
                let total: u64 = self.next_counts[s][a].iter().sum();
                if total != self.n[s][a] {
                    return Err(Error::InvalidInput(format!(
                        "next_counts[{s}][{a}] sums to {total} but n[{s}][{a}] = {}",
                        self.n[s][a]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Quantities the attacker knows in advance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct ConfidenceParams<T> {
    pub sigma: T,
    /// `L`, number of learners covered by the union bound.
    pub num_learners: usize,
    /// `p`, overall failure probability.
    pub failure_p: T,
    pub gamma: T,
    pub initial_dist: Vec<T>,
}

impl<T: Scalar> ConfidenceParams<T> {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config {
            field: field.into(),
            message,
        };
        if !(self.sigma >= T::zero()) {
            return Err(bad("sigma", format!("{} must be nonnegative", self.sigma)));
        }
        if self.num_learners == 0 {
            return Err(bad("num_learners", "must be at least 1".into()));
        }
        if !(self.failure_p > T::zero() && self.failure_p < T::one()) {
            return Err(bad("p", format!("{} must lie in (0, 1)", self.failure_p)));
        }
        if !(self.gamma > T::zero() && self.gamma < T::one()) {
            return Err(bad("gamma", format!("{} must lie in (0, 1)", self.gamma)));
        }
        Ok(())
    }
}

fn union_log<T: Scalar>(num_states: usize, num_actions: usize, num_learners: usize, p: T) -> T {
    (T::lit(2.0) * T::from_count((num_states * num_actions * num_learners) as u64) / p).ln()
}

/// `u = sqrt(2 sigma^2 ln(2 S A L / p))`
pub fn reward_radius_scale<T: Scalar>(sigma: T, num_states: usize, num_actions: usize, num_learners: usize, p: T) -> T {
    (T::lit(2.0) * sigma * sigma * union_log(num_states, num_actions, num_learners, p)).sqrt()
}

/// `w = sqrt(2 ln(2 S A L / p) + 2 S ln 2)`
pub fn transition_radius_scale<T: Scalar>(num_states: usize, num_actions: usize, num_learners: usize, p: T) -> T {
    (T::lit(2.0) * union_log(num_states, num_actions, num_learners, p)
        + T::lit(2.0) * T::from_count(num_states as u64) * T::lit(2.0).ln())
    .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct ConfidenceSet<T> {
    pub r_hat: Vec<Vec<T>>,
    pub p_hat: Vec<Vec<Vec<T>>>,
    pub u: T,
    pub w: T,
    /// `u / sqrt(N(s, a))`
    pub reward_radius: Vec<Vec<T>>,
    /// `w / sqrt(N(s, a))`
    pub transition_budget: Vec<Vec<T>>,
    pub counts: ObservationCounts<T>,
    pub params: ConfidenceParams<T>,
}

pub fn build_confidence_set<T: Scalar>(
    counts: &ObservationCounts<T>,
    params: &ConfidenceParams<T>,
) -> Result<ConfidenceSet<T>> {
    params.validate()?;
    counts.check_consistency()?;
    let (ns, na) = (counts.num_states(), counts.num_actions());
    if params.initial_dist.len() != ns {
        return Err(Error::Config {
            field: "initial_dist".into(),
            message: format!("has {} entries, counts cover {ns} states", params.initial_dist.len()),
        });
    }
    let unvisited = counts.unvisited_pairs();
    if !unvisited.is_empty() {
        return Err(Error::UnvisitedPairs(unvisited));
    }
    let u = reward_radius_scale(params.sigma, ns, na, params.num_learners, params.failure_p);
    let w = transition_radius_scale(ns, na, params.num_learners, params.failure_p);
    let mut r_hat = vec![vec![T::zero(); na]; ns];
    let mut p_hat = vec![vec![Vec::new(); na]; ns];
    let mut reward_radius = vec![vec![T::zero(); na]; ns];
    let mut transition_budget = vec![vec![T::zero(); na]; ns];
    for s in 0..ns {
        for a in 0..na {
            let root_n = T::from_count(counts.n[s][a]).sqrt();
            r_hat[s][a] = counts.r_hat(s, a).expect("visited");
            p_hat[s][a] = counts.p_hat(s, a).expect("visited");
            reward_radius[s][a] = u / root_n;
            transition_budget[s][a] = w / root_n;
        }
    }
    Ok(ConfidenceSet {
        r_hat,
        p_hat,
        u,
        w,
        reward_radius,
        transition_budget,
        counts: counts.clone(),
        params: params.clone(),
    })
}

impl<T: Scalar> ConfidenceSet<T> {
    /// The singleton set `{mdp}`: zero radii, as with infinitely many
    /// noiseless observations.
    pub fn point(mdp: &TabularMdp<T>, num_learners: usize, failure_p: T) -> Self {
        let (ns, na) = (mdp.num_states, mdp.num_actions);
        ConfidenceSet {
            r_hat: mdp.rewards.clone(),
            p_hat: mdp.transitions.clone(),
            u: T::zero(),
            w: T::zero(),
            reward_radius: vec![vec![T::zero(); na]; ns],
            transition_budget: vec![vec![T::zero(); na]; ns],
            counts: ObservationCounts::from_model(mdp, u64::MAX / 4),
            params: ConfidenceParams {
                sigma: T::zero(),
                num_learners,
                failure_p,
                gamma: mdp.gamma,
                initial_dist: mdp.initial_dist.clone(),
            },
        }
    }

    pub fn num_states(&self) -> usize {
        self.r_hat.len()
    }

    pub fn num_actions(&self) -> usize {
        self.r_hat.first().map_or(0, Vec::len)
    }

    pub fn gamma(&self) -> T {
        self.params.gamma
    }

    pub fn initial_dist(&self) -> &[T] {
        &self.params.initial_dist
    }

    pub fn n_min(&self) -> u64 {
        self.counts.n_min()
    }

    pub fn r_high(&self, s: usize, a: usize) -> T {
        self.r_hat[s][a] + self.reward_radius[s][a]
    }

    pub fn r_low(&self, s: usize, a: usize) -> T {
        self.r_hat[s][a] - self.reward_radius[s][a]
    }

    /// `max R_high - min R_low`
    pub fn r_hat_range(&self) -> T {
        let mut hi = T::neg_infinity();
        let mut lo = T::infinity();
        for s in 0..self.num_states() {
            for a in 0..self.num_actions() {
                hi = hi.max(self.r_high(s, a));
                lo = lo.min(self.r_low(s, a));
            }
        }
        hi - lo
    }

    /// Whether `mdp` lies in the set, up to [`MEMBERSHIP_SLACK`].
    pub fn contains(&self, mdp: &TabularMdp<T>) -> bool {
        if mdp.num_states != self.num_states() || mdp.num_actions != self.num_actions() {
            return false;
        }
        let slack = T::tol(MEMBERSHIP_SLACK);
        (0..self.num_states()).all(|s| {
            (0..self.num_actions()).all(|a| {
                let reward_ok = (mdp.rewards[s][a] - self.r_hat[s][a]).abs() <= self.reward_radius[s][a] + slack;
                let l1: T = mdp.transitions[s][a]
                    .iter()
                    .zip(&self.p_hat[s][a])
                    .map(|(&x, &y)| (x - y).abs())
                    .sum();
                reward_ok && l1 <= self.transition_budget[s][a] + slack
            })
        })
    }

    pub fn to_json_string(&self) -> String
    where
        T: Serialize,
    {
        serde_json::to_string_pretty(self).expect("confidence set serializes")
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
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

impl ConfidenceSet<f64> {
    /// Random member of the set. Rewards are uniform on their intervals;
    /// transition rows are either an extreme point of the L1 ball toward a
    /// random direction or a flat Dirichlet draw pulled toward `p_hat` until
    /// it fits the budget.
    pub fn sample_member<R: Rng>(&self, rng: &mut R, horizon: usize) -> TabularMdp<f64> {
        let (ns, na) = (self.num_states(), self.num_actions());
        let mut rewards = vec![vec![0.0; na]; ns];
        let mut transitions = vec![vec![Vec::new(); na]; ns];
        for s in 0..ns {
            for a in 0..na {
                let radius = self.reward_radius[s][a];
                rewards[s][a] = self.r_hat[s][a] + radius * (2.0 * rng.gen::<f64>() - 1.0);
                let centre = &self.p_hat[s][a];
                let budget = self.transition_budget[s][a];
                transitions[s][a] = if rng.gen_bool(0.3) {
                    let direction: Vec<f64> = (0..ns).map(|_| rng.gen()).collect();
                    inner_linear_opt(centre, budget, &direction, Orientation::Max)
                } else {
                    let q = crate::fixtures::flat_dirichlet(rng, ns);
                    let dist: f64 = q.iter().zip(centre).map(|(x, y)| (x - y).abs()).sum();
                    let t = if dist <= budget { 1.0 } else { budget / dist };
                    let mut row: Vec<f64> = centre.iter().zip(&q).map(|(&c, &x)| c + t * (x - c)).collect();
                    let total: f64 = row.iter().sum();
                    row.iter_mut().for_each(|x| *x /= total);
                    row
                };
            }
        }
        TabularMdp {
            num_states: ns,
            num_actions: na,
            rewards,
            transitions,
            gamma: self.gamma(),
            initial_dist: self.params.initial_dist.clone(),
            horizon,
            noise_sigma: self.params.sigma,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn params(sigma: f64, num_learners: usize, p: f64) -> ConfidenceParams<f64> {
        ConfidenceParams {
            sigma,
            num_learners,
            failure_p: p,
            gamma: 0.5,
            initial_dist: vec![0.5, 0.5],
        }
    }

    #[test]
    fn single_update() {
        let mut c = ObservationCounts::<f64>::new(2, 2);
        c.update(0, 0, 1.0, 1).unwrap();
        assert_eq!(c.n[0][0], 1);
        assert_eq!(c.r_hat(0, 0), Some(1.0));
        assert_eq!(c.p_hat(0, 0), Some(vec![0.0, 1.0]));
        assert_eq!(c.n_min(), 0);
        c.update(0, 0, 0.0, 1).unwrap();
        assert_eq!(c.r_hat(0, 0), Some(0.5));
        assert!(c.update(0, 0, f64::NAN, 1).is_err());
        assert!(c.update(0, 3, 1.0, 1).is_err());
    }

    #[test]
    fn radius_constants() {
        // sigma = 1, S = A = 2, L = 10, p = 0.1
        let u = reward_radius_scale(1.0, 2, 2, 10, 0.1);
        let w = transition_radius_scale(2, 2, 10, 0.1f64);
        assert_abs_diff_eq!(u, (2.0 * 800f64.ln()).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(u, 3.6564, epsilon = 1e-3);
        assert_abs_diff_eq!(w, 4.0177, epsilon = 1e-3);
    }

    #[test]
    fn build_requires_every_pair() {
        let mut c = ObservationCounts::<f64>::new(2, 2);
        c.update(0, 0, 1.0, 1).unwrap();
        match build_confidence_set(&c, &params(1.0, 10, 0.1)) {
            Err(Error::UnvisitedPairs(pairs)) => assert_eq!(pairs, vec![(0, 1), (1, 0), (1, 1)]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn noiseless_intervals_collapse() {
        let m = fixtures::two_state();
        let counts = ObservationCounts::from_model(&m, 1_000_000);
        let cs = build_confidence_set(&counts, &params(0.0, 10, 0.1)).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                assert_eq!(cs.r_high(s, a), cs.r_low(s, a));
                assert_abs_diff_eq!(cs.r_high(s, a), m.rewards[s][a], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn w_ignores_data() {
        let m = fixtures::two_state();
        let a = build_confidence_set(&ObservationCounts::from_model(&m, 10), &params(1.0, 10, 0.1)).unwrap();
        let b = build_confidence_set(&ObservationCounts::from_model(&m, 9999), &params(1.0, 10, 0.1)).unwrap();
        assert_eq!(a.w, b.w);
        assert_abs_diff_eq!(a.w, transition_radius_scale(2, 2, 10, 0.1), epsilon = 1e-12);
        assert_abs_diff_eq!(a.u, reward_radius_scale(1.0, 2, 2, 10, 0.1), epsilon = 1e-12);
    }

    #[test]
    fn membership() {
        let m = fixtures::two_state();
        let counts = ObservationCounts::from_model(&m, 400);
        let cs = build_confidence_set(&counts, &params(1.0, 10, 0.1)).unwrap();
        assert!(cs.contains(&m));
        let mut off = m.clone();
        off.rewards[1][0] += 2.0 * cs.reward_radius[1][0];
        assert!(!cs.contains(&off));
    }

    #[test]
    fn doubling_counts_shrinks_by_root_two() {
        let m = fixtures::two_state();
        let p = params(0.3, 5, 0.05);
        let small = build_confidence_set(&ObservationCounts::from_model(&m, 100), &p).unwrap();
        let big = build_confidence_set(&ObservationCounts::from_model(&m, 200), &p).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                let ratio = big.reward_radius[s][a] / small.reward_radius[s][a];
                assert_abs_diff_eq!(ratio, 1.0 / 2f64.sqrt(), epsilon = 1e-12);
                assert!(big.transition_budget[s][a] <= small.transition_budget[s][a]);
            }
        }
    }

    #[test]
    fn empirical_rows_are_distributions() {
        let m = fixtures::uniform_random(3, 2, 0.9, 11);
        let mut counts = ObservationCounts::new(3, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let s = rng.gen_range(0..3);
            let a = rng.gen_range(0..2);
            let (r, next) = crate::simulator::sample_step(&m, s, a, &mut rng);
            counts.update(s, a, r, next).unwrap();
        }
        for s in 0..3 {
            for a in 0..2 {
                if let Some(row) = counts.p_hat(s, a) {
                    assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
                    assert!(row.iter().all(|&x| x >= 0.0));
                }
            }
        }
    }

    #[test]
    fn sampled_members_are_inside() {
        let m = fixtures::two_state();
        let cs = build_confidence_set(&ObservationCounts::from_model(&m, 50), &params(0.5, 10, 0.1)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let member = cs.sample_member(&mut rng, 10);
            member.validate().unwrap();
            assert!(cs.contains(&member));
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let m = fixtures::two_state();
        let cs = build_confidence_set(&ObservationCounts::from_model(&m, 37), &params(0.5, 10, 0.1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cs.json");
        std::fs::write(&path, cs.to_json_string()).unwrap();
        let back = ConfidenceSet::<f64>::load(&path).unwrap();
        assert_eq!(back.counts.n, cs.counts.n);
        assert_eq!(back.u, cs.u);
    }
}
