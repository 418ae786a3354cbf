//! Victim learners: an optimistic model-based learner and a Q-learning
//! baseline. Learners see only observations and the problem's shape.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::{reward_radius_scale, transition_radius_scale, ObservationCounts};
use crate::error::{Error, Result};
use crate::mdp::{eps_optimal_action_sets, Policy, TabularMdp};
use crate::robust::{inner_linear_opt, Orientation};
use crate::scalar::argmax;
use crate::simulator::{stream, Learner, Role, SimRng, TransitionRecord};

/// What a learner knows about the environment before acting.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemShape {
    pub num_states: usize,
    pub num_actions: usize,
    pub gamma: f64,
    pub initial_dist: Vec<f64>,
    pub horizon: usize,
}

impl ProblemShape {
    pub fn of(mdp: &TabularMdp<f64>) -> Self {
        ProblemShape {
            num_states: mdp.num_states,
            num_actions: mdp.num_actions,
            gamma: mdp.gamma,
            initial_dist: mdp.initial_dist.clone(),
            horizon: mdp.horizon,
        }
    }
}

const PLANNING_TOL: f64 = 1e-6;
const PLANNING_MAX_ITERATIONS: usize = 100_000;

/// Model-based learner that plans optimistically over L1 transition balls
/// and reward intervals at the start of every episode.
#[derive(Debug, Clone)]
pub struct OptimisticLearner {
    shape: ProblemShape,
    counts: ObservationCounts<f64>,
    reward_scale: f64,
    transition_scale: f64,
    max_reward_seen: Option<f64>,
    values: Vec<f64>,
    q: Vec<Vec<f64>>,
    stale: bool,
}

impl OptimisticLearner {
    /// `reward_sigma` is the sub-Gaussian scale the learner assumes for
    /// rewards; `confidence_delta` its failure probability.
    pub fn new(shape: ProblemShape, confidence_delta: f64, reward_sigma: f64) -> Self {
        let (ns, na) = (shape.num_states, shape.num_actions);
        OptimisticLearner {
            counts: ObservationCounts::new(ns, na),
            reward_scale: reward_radius_scale(reward_sigma, ns, na, 1, confidence_delta),
            transition_scale: transition_radius_scale(ns, na, 1, confidence_delta),
            max_reward_seen: None,
            values: vec![0.0; ns],
            q: vec![vec![0.0; na]; ns],
            stale: true,
            shape,
        }
    }

    /// Reward credited to unvisited pairs.
    fn optimistic_reward(&self) -> f64 {
        self.max_reward_seen.map_or(1.0, |r| r + 1.0)
    }

    fn plan(&mut self) {
        let (ns, na) = (self.shape.num_states, self.shape.num_actions);
        let gamma = self.shape.gamma;
        let r_opt = self.optimistic_reward();
        let mut bonus_reward = vec![vec![0.0; na]; ns];
        let mut centre = vec![vec![Vec::new(); na]; ns];
        let mut budget = vec![vec![2.0; na]; ns];
        for s in 0..ns {
            for a in 0..na {
                let n = self.counts.n[s][a];
                if n == 0 {
                    bonus_reward[s][a] = r_opt;
                    centre[s][a] = vec![1.0 / ns as f64; ns];
                } else {
                    let root = (n as f64).sqrt();
                    bonus_reward[s][a] =
                        (self.counts.r_hat(s, a).expect("visited") + self.reward_scale / root).min(r_opt);
                    centre[s][a] = self.counts.p_hat(s, a).expect("visited");
                    budget[s][a] = self.transition_scale / root;
                }
            }
        }
        let threshold = PLANNING_TOL * (1.0 - gamma) / (2.0 * gamma);
        let mut v = std::mem::take(&mut self.values);
        let mut q = vec![vec![0.0; na]; ns];
        for _ in 0..PLANNING_MAX_ITERATIONS {
            for s in 0..ns {
                for a in 0..na {
                    let p = inner_linear_opt(&centre[s][a], budget[s][a], &v, Orientation::Max);
                    let next: f64 = p.iter().zip(&v).map(|(x, y)| x * y).sum();
                    q[s][a] = bonus_reward[s][a] + gamma * next;
                }
            }
            let next_v: Vec<f64> = q.iter().map(|row| row[argmax(row)]).collect();
            let change = next_v.iter().zip(&v).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            v = next_v;
            if change <= threshold {
                break;
            }
        }
        self.values = v;
        self.q = q;
        self.stale = false;
    }

    pub fn counts(&self) -> &ObservationCounts<f64> {
        &self.counts
    }
}

impl Learner for OptimisticLearner {
    fn act(&mut self, state: usize) -> usize {
        if self.stale {
            self.plan();
        }
        argmax(&self.q[state])
    }

    fn observe(&mut self, state: usize, action: usize, reward: f64, next_state: usize, episode_end: bool) {
        if self.counts.update(state, action, reward, next_state).is_ok() {
            self.max_reward_seen = Some(self.max_reward_seen.map_or(reward, |m| m.max(reward)));
        }
        if episode_end {
            self.stale = true;
        }
    }

    /// Greedy policy of the empirical model; unvisited pairs keep their
    /// optimistic value.
    fn current_policy(&self) -> Policy {
        let (ns, na) = (self.shape.num_states, self.shape.num_actions);
        let gamma = self.shape.gamma;
        let optimistic = self.optimistic_reward() / (1.0 - gamma);
        let threshold = PLANNING_TOL * (1.0 - gamma) / (2.0 * gamma);
        let mut v = vec![0.0; ns];
        let mut q = vec![vec![0.0; na]; ns];
        for _ in 0..PLANNING_MAX_ITERATIONS {
            for s in 0..ns {
                for a in 0..na {
                    q[s][a] = match (self.counts.r_hat(s, a), self.counts.p_hat(s, a)) {
                        (Some(r), Some(p)) => r + gamma * p.iter().zip(&v).map(|(x, y)| x * y).sum::<f64>(),
                        _ => optimistic,
                    };
                }
            }
            let next_v: Vec<f64> = q.iter().map(|row| row[argmax(row)]).collect();
            let change = next_v.iter().zip(&v).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            v = next_v;
            if change <= threshold {
                break;
            }
        }
        Policy::new(q.iter().map(|row| argmax(row)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LearningRate {
    Constant {
        rate: f64,
    },
    /// `1 / N(s, a)^exponent`
    Polynomial {
        exponent: f64,
    },
}

impl LearningRate {
    pub fn at(&self, visits: u64) -> f64 {
        match *self {
            LearningRate::Constant { rate } => rate,
            LearningRate::Polynomial { exponent } => (visits.max(1) as f64).powf(-exponent),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExplorationRate {
    Constant {
        rate: f64,
    },
    /// `min(1, scale / sqrt(t))`
    InverseSqrt {
        scale: f64,
    },
}

impl ExplorationRate {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            ExplorationRate::Constant { rate } => rate,
            ExplorationRate::InverseSqrt { scale } => (scale / (step.max(1) as f64).sqrt()).min(1.0),
        }
    }
}

/// Tabular Q-learning with epsilon-greedy exploration.
#[derive(Debug, Clone)]
pub struct QLearner {
    gamma: f64,
    q: Vec<Vec<f64>>,
    visits: Vec<Vec<u64>>,
    step: u64,
    learning_rate: LearningRate,
    exploration: ExplorationRate,
    rng: SimRng,
}

impl QLearner {
    pub fn new(
        shape: &ProblemShape,
        learning_rate: LearningRate,
        exploration: ExplorationRate,
        initial_q: f64,
        rng: SimRng,
    ) -> Self {
        QLearner {
            gamma: shape.gamma,
            q: vec![vec![initial_q; shape.num_actions]; shape.num_states],
            visits: vec![vec![0; shape.num_actions]; shape.num_states],
            step: 0,
            learning_rate,
            exploration,
            rng,
        }
    }

    pub fn q_table(&self) -> &[Vec<f64>] {
        &self.q
    }
}

impl Learner for QLearner {
    fn act(&mut self, state: usize) -> usize {
        self.step += 1;
        let explore = self.exploration.at(self.step);
        if explore > 0.0 && self.rng.gen::<f64>() < explore {
            self.rng.gen_range(0..self.q[state].len())
        } else {
            argmax(&self.q[state])
        }
    }

    fn observe(&mut self, state: usize, action: usize, reward: f64, next_state: usize, _episode_end: bool) {
        self.visits[state][action] += 1;
        let rate = self.learning_rate.at(self.visits[state][action]);
        let next_best = self.q[next_state][argmax(&self.q[next_state])];
        let target = reward + self.gamma * next_best;
        let entry = &mut self.q[state][action];
        *entry += rate * (target - *entry);
    }

    fn current_policy(&self) -> Policy {
        Policy::new(self.q.iter().map(|row| argmax(row)).collect())
    }
}

/// How many epsilon-suboptimal steps a learner takes in `T` steps with
/// failure probability `delta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SubOptModel {
    /// `scale * T^exponent`, independent of epsilon and delta.
    PowerLaw { scale: f64, exponent: f64 },
}

impl SubOptModel {
    pub fn eval(&self, total_steps: usize, _eps: f64, _delta: f64) -> f64 {
        match *self {
            SubOptModel::PowerLaw { scale, exponent } => scale * (total_steps as f64).powf(exponent),
        }
    }

    /// Least-squares fit of `log count = log scale + exponent log T`.
    pub fn fit_power_law(points: &[(usize, f64)]) -> Result<Self> {
        let usable: Vec<(f64, f64)> = points
            .iter()
            .filter(|(t, c)| *t > 0 && *c > 0.0)
            .map(|&(t, c)| ((t as f64).ln(), c.ln()))
            .collect();
        if usable.len() < 2 {
            return Err(Error::InvalidInput(
                "need two positive points to fit a power law".into(),
            ));
        }
        let n = usable.len() as f64;
        let mx = usable.iter().map(|p| p.0).sum::<f64>() / n;
        let my = usable.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = usable.iter().map(|p| (p.0 - mx).powi(2)).sum();
        if sxx == 0.0 {
            return Err(Error::InvalidInput("power-law fit needs two distinct horizons".into()));
        }
        let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let exponent = sxy / sxx;
        Ok(SubOptModel::PowerLaw {
            scale: (my - exponent * mx).exp(),
            exponent,
        })
    }
}

/// No-regret guarantee: an `alpha`-optimal final policy with probability at
/// least `1 - beta`, and a bound on epsilon-suboptimal steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerGuarantee {
    pub alpha: f64,
    pub beta: f64,
    pub subopt: SubOptModel,
}

impl LearnerGuarantee {
    pub fn new(alpha: f64, beta: f64, subopt: SubOptModel) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::Config {
                field: "alpha".into(),
                message: format!("{alpha} must be positive"),
            });
        }
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::Config {
                field: "beta".into(),
                message: format!("{beta} must lie in (0, 1)"),
            });
        }
        Ok(LearnerGuarantee { alpha, beta, subopt })
    }

    pub fn subopt_fn(&self, total_steps: usize, eps: f64, delta: f64) -> f64 {
        self.subopt.eval(total_steps, eps, delta)
    }
}

/// Steps whose action lies outside the epsilon-optimal action set of its
/// state in `mdp`.
pub fn count_subopt_steps(mdp: &TabularMdp<f64>, records: &[TransitionRecord], eps: f64, cap: u64) -> Result<u64> {
    let sets = eps_optimal_action_sets(mdp, eps, cap)?;
    Ok(records.iter().filter(|r| !sets.contains(r.state, r.action)).count() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearnerKind {
    Optimistic,
    #[serde(rename = "qlearn")]
    QLearn,
}

impl FromStr for LearnerKind {
    type Err = Error;

    fn from_str(name: &str) -> Result<Self> {
        match name {
            "optimistic" => Ok(LearnerKind::Optimistic),
            "qlearn" => Ok(LearnerKind::QLearn),
            other => Err(Error::Config {
                field: "learner".into(),
                message: format!("unknown learner {other:?}; expected \"optimistic\" or \"qlearn\""),
            }),
        }
    }
}

impl fmt::Display for LearnerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LearnerKind::Optimistic => "optimistic",
            LearnerKind::QLearn => "qlearn",
        })
    }
}

/// Everything needed to build fresh learners of one kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    pub kind: LearnerKind,
    #[serde(default = "default_confidence_delta")]
    pub confidence_delta: f64,
    #[serde(default = "default_reward_sigma")]
    pub reward_sigma: f64,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: LearningRate,
    #[serde(default = "default_exploration")]
    pub exploration: ExplorationRate,
    #[serde(default)]
    pub initial_q: f64,
}

fn default_confidence_delta() -> f64 {
    0.05
}

fn default_reward_sigma() -> f64 {
    0.5
}

fn default_learning_rate() -> LearningRate {
    LearningRate::Polynomial { exponent: 0.6 }
}

fn default_exploration() -> ExplorationRate {
    ExplorationRate::InverseSqrt { scale: 10.0 }
}

impl LearnerSpec {
    pub fn of_kind(kind: LearnerKind) -> Self {
        LearnerSpec {
            kind,
            confidence_delta: default_confidence_delta(),
            reward_sigma: default_reward_sigma(),
            learning_rate: default_learning_rate(),
            exploration: default_exploration(),
            initial_q: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.confidence_delta > 0.0 && self.confidence_delta < 1.0) {
            return Err(Error::Config {
                field: "learner.confidence_delta".into(),
                message: format!("{} must lie in (0, 1)", self.confidence_delta),
            });
        }
        if !(self.reward_sigma >= 0.0) {
            return Err(Error::Config {
                field: "learner.reward_sigma".into(),
                message: format!("{} must be nonnegative", self.reward_sigma),
            });
        }
        Ok(())
    }

    /// Fresh learner for run `learner_index` of `seed`.
    pub fn build(&self, shape: &ProblemShape, seed: u64, learner_index: usize) -> Box<dyn Learner + Send> {
        match self.kind {
            LearnerKind::Optimistic => Box::new(OptimisticLearner::new(
                shape.clone(),
                self.confidence_delta,
                self.reward_sigma,
            )),
            LearnerKind::QLearn => Box::new(QLearner::new(
                shape,
                self.learning_rate,
                self.exploration,
                self.initial_q,
                stream(seed, learner_index, Role::Learner),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::simulator::{run_learner, Attacker, Interaction, NoAttack, Phase, RunConfig};

    fn run(
        mdp: &TabularMdp<f64>,
        learner: &mut dyn Learner,
        attacker: &mut dyn Attacker,
        steps: usize,
        seed: u64,
    ) -> crate::simulator::LearnerRun {
        let cfg = RunConfig {
            total_steps: steps,
            num_learners: 1,
            seed,
            record_trajectories: true,
        };
        run_learner(mdp, learner, attacker, &cfg, 0).unwrap()
    }

    struct Coin;

    impl Attacker for Coin {
        fn perturb(&mut self, _step: &Interaction, rng: &mut SimRng) -> f64 {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        }

        fn phase(&self) -> Phase {
            Phase::Exploration
        }
    }

    #[test]
    fn fresh_learners_are_valid() {
        let m = fixtures::two_state();
        let shape = ProblemShape::of(&m);
        for kind in [LearnerKind::Optimistic, LearnerKind::QLearn] {
            let mut learner = LearnerSpec::of_kind(kind).build(&shape, 1, 0);
            learner.current_policy().validate(2, 2).unwrap();
            assert!(learner.act(1) < 2);
        }
    }

    #[test]
    fn same_seed_same_actions() {
        let m = fixtures::two_state();
        let shape = ProblemShape::of(&m);
        for kind in [LearnerKind::Optimistic, LearnerKind::QLearn] {
            let spec = LearnerSpec::of_kind(kind);
            let a = run(&m, spec.build(&shape, 9, 0).as_mut(), &mut NoAttack, 300, 9);
            let b = run(&m, spec.build(&shape, 9, 0).as_mut(), &mut NoAttack, 300, 9);
            assert_eq!(a.records, b.records);
        }
    }

    #[test]
    fn optimistic_learner_finds_optimal_policy() {
        let mut m = fixtures::two_state();
        m.noise_sigma = 0.0;
        let best = m.value_iteration(1e-10).unwrap().pi_star;
        let mut learner = OptimisticLearner::new(ProblemShape::of(&m), 0.05, 0.5);
        let out = run(&m, &mut learner, &mut NoAttack, 5000, 3);
        assert_eq!(out.final_policy, best);
    }

    #[test]
    fn identical_actions_make_any_policy_optimal() {
        let m = fixtures::two_state_cycle();
        let mut learner = OptimisticLearner::new(ProblemShape::of(&m), 0.05, 0.5);
        let out = run(&m, &mut learner, &mut NoAttack, 500, 3);
        let best = m.value_iteration(1e-10).unwrap();
        let got = m.normalized_return(&out.final_policy).unwrap();
        assert!((got - m.normalized_return(&best.pi_star).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn coin_rewards_visit_every_pair() {
        let m = fixtures::two_state();
        let mut learner = OptimisticLearner::new(ProblemShape::of(&m), 0.05, 0.5);
        run(&m, &mut learner, &mut Coin, 5000, 4);
        assert!(learner.counts().n_min() >= 1);
    }

    #[test]
    fn greedy_q_learner_still_tries_other_actions() {
        let m = TabularMdp::new(
            vec![vec![-1.0, -1.0]],
            vec![vec![vec![1.0], vec![1.0]]],
            0.5,
            vec![1.0],
            10,
            0.0,
        )
        .unwrap();
        let mut learner = QLearner::new(
            &ProblemShape::of(&m),
            LearningRate::Constant { rate: 0.5 },
            ExplorationRate::Constant { rate: 0.0 },
            0.0,
            stream(0, 0, Role::Learner),
        );
        let out = run(&m, &mut learner, &mut NoAttack, 2, 0);
        assert_eq!(out.records[0].action, 0);
        assert_eq!(out.records[1].action, 1);
    }

    #[test]
    fn q_learner_solves_single_state() {
        let mut m = fixtures::single_state();
        m.noise_sigma = 0.0;
        let spec = LearnerSpec::of_kind(LearnerKind::QLearn);
        let mut learner = spec.build(&ProblemShape::of(&m), 5, 0);
        let out = run(&m, learner.as_mut(), &mut NoAttack, 2000, 5);
        assert_eq!(out.final_policy, m.value_iteration(1e-10).unwrap().pi_star);
    }

    #[test]
    fn q_values_stay_finite() {
        let m = fixtures::uniform_random(3, 2, 0.9, 2);
        let mut learner = QLearner::new(
            &ProblemShape::of(&m),
            default_learning_rate(),
            default_exploration(),
            0.0,
            stream(2, 0, Role::Learner),
        );
        run(&m, &mut learner, &mut NoAttack, 3000, 2);
        assert!(learner.q_table().iter().flatten().all(|x| x.is_finite()));
    }

    #[test]
    fn optimal_player_has_no_subopt_steps() {
        let m = fixtures::two_state();
        let best = m.value_iteration(1e-10).unwrap().pi_star;
        let out = run(&m, &mut Fixed(best), &mut NoAttack, 400, 1);
        assert_eq!(count_subopt_steps(&m, &out.records, 0.01, 1000).unwrap(), 0);
        let out = run(&m, &mut Fixed(Policy::new(vec![1, 0])), &mut NoAttack, 400, 1);
        assert_eq!(count_subopt_steps(&m, &out.records, 100.0, 1000).unwrap(), 0);
    }

    struct Fixed(Policy);

    impl Learner for Fixed {
        fn act(&mut self, state: usize) -> usize {
            self.0.action(state)
        }

        fn observe(&mut self, _: usize, _: usize, _: f64, _: usize, _: bool) {}

        fn current_policy(&self) -> Policy {
            self.0.clone()
        }
    }

    #[test]
    fn subopt_rate_falls_with_horizon() {
        let m = fixtures::two_state();
        let rate = |steps: usize| {
            let total: u64 = (0..10)
                .map(|seed| {
                    let mut learner = OptimisticLearner::new(ProblemShape::of(&m), 0.05, 0.5);
                    let out = run(&m, &mut learner, &mut NoAttack, steps, seed);
                    count_subopt_steps(&m, &out.records, 0.01, 1000).unwrap()
                })
                .sum();
            total as f64 / (10 * steps) as f64
        };
        let (short, long) = (rate(500), rate(5000));
        assert!(long < 0.5 * short, "{long} vs {short}");
    }

    #[test]
    fn power_law_fit_recovers_exponent() {
        let points: Vec<(usize, f64)> = [100usize, 1000, 10000]
            .iter()
            .map(|&t| (t, 3.0 * (t as f64).powf(0.5)))
            .collect();
        match SubOptModel::fit_power_law(&points).unwrap() {
            SubOptModel::PowerLaw { scale, exponent } => {
                assert!((scale - 3.0).abs() < 1e-9 && (exponent - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn learner_names() {
        assert_eq!("qlearn".parse::<LearnerKind>().unwrap(), LearnerKind::QLearn);
        assert!("ucrl".parse::<LearnerKind>().unwrap_err().is_config_error());
    }
}
