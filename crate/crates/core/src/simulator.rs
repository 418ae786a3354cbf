//! Seeded interaction loop between an environment, a learner and an attacker.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Policy, TabularMdp};

pub type SimRng = ChaCha8Rng;

/// Consumer of a random stream; each gets its own so that swapping the
/// attacker does not disturb environment noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Environment = 0,
    Learner = 1,
    Attacker = 2,
}

/// Independent stream for `(seed, learner, role)`.
pub fn stream(seed: u64, learner: usize, role: Role) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(learner as u64 * 3 + role as u64);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub total_steps: usize,
    pub num_learners: usize,
    pub seed: u64,
    pub record_trajectories: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config {
                field: "total_steps".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.num_learners == 0 {
            return Err(Error::Config {
                field: "num_learners".into(),
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    #[serde(rename = "l")]
    pub learner: usize,
    /// 1-based step within the learner's run.
    #[serde(rename = "t")]
    pub step: usize,
    #[serde(rename = "s")]
    pub state: usize,
    #[serde(rename = "a")]
    pub action: usize,
    /// Reward produced by the environment.
    #[serde(rename = "r")]
    pub reward: f64,
    /// Reward the learner saw.
    #[serde(rename = "r_delivered")]
    pub delivered: f64,
    #[serde(rename = "s_next")]
    pub next_state: usize,
    pub episode_end: bool,
}

/// What the attacker sees of one step: the environment's side of the
/// interaction, never the learner's internals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub learner: usize,
    pub step: usize,
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    NoAttack,
    Exploration,
    Attack,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::NoAttack => "no_attack",
            Phase::Exploration => "exploration",
            Phase::Attack => "attack",
        })
    }
}

pub trait Learner {
    fn act(&mut self, state: usize) -> usize;

    fn observe(&mut self, state: usize, action: usize, reward: f64, next_state: usize, episode_end: bool);

    /// Greedy policy with respect to the learner's current estimates.
    fn current_policy(&self) -> Policy;
}

pub trait Attacker {
    fn begin_learner(&mut self, _learner: usize) {}

    /// Reward delivered to the learner for this step.
    fn perturb(&mut self, step: &Interaction, rng: &mut SimRng) -> f64;

    fn end_learner(&mut self, _learner: usize) {}

    fn phase(&self) -> Phase;
}

/// Passes rewards through unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoAttack;

impl Attacker for NoAttack {
    fn perturb(&mut self, step: &Interaction, _rng: &mut SimRng) -> f64 {
        step.reward
    }

    fn phase(&self) -> Phase {
        Phase::NoAttack
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cumulative += p;
        if u < cumulative {
            return i;
        }
    }
    // u landed in the round-off gap above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Noisy reward `R(s, a) + sigma * xi` and next state drawn from `P(s, a, .)`.
pub fn sample_step<R: Rng>(mdp: &TabularMdp<f64>, s: usize, a: usize, rng: &mut R) -> (f64, usize) {
    let noise: f64 = rng.sample(StandardNormal);
    let reward = mdp.rewards[s][a] + mdp.noise_sigma * noise;
    let next = sample_categorical(&mdp.transitions[s][a], rng);
    (reward, next)
}

#[derive(Debug, Clone)]
pub struct LearnerRun {
    pub records: Vec<TransitionRecord>,
    pub final_policy: Policy,
    /// Attacker phase for this learner's whole run.
    pub phase: Phase,
}

/// Runs one fresh learner for `cfg.total_steps` steps, resetting from `d0`
/// every `H` steps.
pub fn run_learner(
    mdp: &TabularMdp<f64>,
    learner: &mut dyn Learner,
    attacker: &mut dyn Attacker,
    cfg: &RunConfig,
    learner_index: usize,
) -> Result<LearnerRun> {
    cfg.validate()?;
    let mut env_rng = stream(cfg.seed, learner_index, Role::Environment);
    let mut attack_rng = stream(cfg.seed, learner_index, Role::Attacker);
    attacker.begin_learner(learner_index);
    let phase = attacker.phase();
    let mut records = Vec::with_capacity(cfg.total_steps);
    let mut state = sample_categorical(&mdp.initial_dist, &mut env_rng);
    for step in 1..=cfg.total_steps {
        let action = learner.act(state);
        if action >= mdp.num_actions {
            return Err(Error::Simulation(format!(
                "learner {learner_index} chose action {action} in state {state} at step {step}; \
                 only {} actions exist",
                mdp.num_actions
            )));
        }
        let (reward, next_state) = sample_step(mdp, state, action, &mut env_rng);
        let interaction = Interaction {
            learner: learner_index,
            step,
            state,
            action,
            reward,
            next_state,
        };
        let delivered = attacker.perturb(&interaction, &mut attack_rng);
        if !delivered.is_finite() {
            return Err(Error::Simulation(format!(
                "attacker delivered {delivered} to learner {learner_index} at step {step}"
            )));
        }
        let episode_end = step % mdp.horizon == 0 || step == cfg.total_steps;
        learner.observe(state, action, delivered, next_state, episode_end);
        records.push(TransitionRecord {
            learner: learner_index,
            step,
            state,
            action,
            reward,
            delivered,
            next_state,
            episode_end,
        });
        state = if episode_end {
            sample_categorical(&mdp.initial_dist, &mut env_rng)
        } else {
            next_state
        };
    }
    attacker.end_learner(learner_index);
    Ok(LearnerRun {
        records,
        final_policy: learner.current_policy(),
        phase,
    })
}

/// CSV with columns `l,t,s,a,r,r_delivered,s_next,episode_end`.
pub fn write_trajectories<W: Write>(writer: W, records: &[TransitionRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for record in records {
        out.serialize(record)?;
    }
    out.flush().map_err(|source| Error::Io {
        path: "<trajectory csv>".into(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    /// Plays a fixed policy and remembers nothing.
    struct Scripted(Policy);

    impl Learner for Scripted {
        fn act(&mut self, state: usize) -> usize {
            self.0.action(state)
        }
        fn observe(&mut self, _: usize, _: usize, _: f64, _: usize, _: bool) {}
        fn current_policy(&self) -> Policy {
            self.0.clone()
        }
    }

    struct BadAction;

    impl Learner for BadAction {
        fn act(&mut self, _: usize) -> usize {
            7
        }
        fn observe(&mut self, _: usize, _: usize, _: f64, _: usize, _: bool) {}
        fn current_policy(&self) -> Policy {
            Policy::new(vec![0, 0])
        }
    }

    fn cfg(total_steps: usize, seed: u64) -> RunConfig {
        RunConfig {
            total_steps,
            num_learners: 1,
            seed,
            record_trajectories: false,
        }
    }

    #[test]
    fn zero_noise_reward_is_exact() {
        let m = fixtures::single_state();
        let mut rng = stream(1, 0, Role::Environment);
        for _ in 0..10 {
            assert_eq!(sample_step(&m, 0, 0, &mut rng), (1.0, 0));
        }
    }

    #[test]
    fn deterministic_row_always_hits_its_state() {
        let m = fixtures::two_state_cycle();
        let mut rng = stream(2, 0, Role::Environment);
        for _ in 0..100 {
            assert_eq!(sample_step(&m, 0, 1, &mut rng).1, 1);
            assert_eq!(sample_step(&m, 1, 0, &mut rng).1, 0);
        }
    }

    #[test]
    fn noisy_reward_mean_concentrates() {
        let mut m = fixtures::two_state();
        m.noise_sigma = 2.0;
        let mut rng = stream(3, 0, Role::Environment);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| sample_step(&m, 1, 1, &mut rng).0).sum::<f64>() / n as f64;
        assert!((mean - 0.6).abs() < 4.0 * 2.0 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn identity_attack_delivers_true_rewards() {
        let m = fixtures::two_state();
        let mut learner = Scripted(Policy::new(vec![0, 1]));
        let run = run_learner(&m, &mut learner, &mut NoAttack, &cfg(200, 5), 0).unwrap();
        assert_eq!(run.records.len(), 200);
        assert!(run.records.iter().all(|r| r.reward == r.delivered));
        assert_eq!(run.phase, Phase::NoAttack);
    }

    #[test]
    fn episode_boundaries() {
        let m = fixtures::two_state();
        let mut learner = Scripted(Policy::new(vec![0, 1]));
        let run = run_learner(&m, &mut learner, &mut NoAttack, &cfg(25, 5), 0).unwrap();
        let ends: Vec<usize> = run.records.iter().filter(|r| r.episode_end).map(|r| r.step).collect();
        assert_eq!(ends, vec![10, 20, 25]);

        let run = run_learner(&m, &mut learner, &mut NoAttack, &cfg(m.horizon, 5), 0).unwrap();
        assert_eq!(run.records.iter().filter(|r| r.episode_end).count(), 1);
    }

    #[test]
    fn same_seed_same_records() {
        let m = fixtures::two_state();
        let a = run_learner(
            &m,
            &mut Scripted(Policy::new(vec![1, 0])),
            &mut NoAttack,
            &cfg(300, 9),
            4,
        )
        .unwrap();
        let b = run_learner(
            &m,
            &mut Scripted(Policy::new(vec![1, 0])),
            &mut NoAttack,
            &cfg(300, 9),
            4,
        )
        .unwrap();
        assert_eq!(a.records, b.records);
        let c = run_learner(
            &m,
            &mut Scripted(Policy::new(vec![1, 0])),
            &mut NoAttack,
            &cfg(300, 10),
            4,
        )
        .unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn invalid_action_aborts() {
        let m = fixtures::two_state();
        let err = run_learner(&m, &mut BadAction, &mut NoAttack, &cfg(5, 1), 0).unwrap_err();
        assert!(err.to_string().contains("action 7"));
    }

    #[test]
    fn nan_reward_aborts() {
        struct Broken;
        impl Attacker for Broken {
            fn perturb(&mut self, _: &Interaction, _: &mut SimRng) -> f64 {
                f64::NAN
            }
            fn phase(&self) -> Phase {
                Phase::Attack
            }
        }
        let m = fixtures::two_state();
        let mut learner = Scripted(Policy::new(vec![0, 0]));
        assert!(run_learner(&m, &mut learner, &mut Broken, &cfg(5, 1), 0).is_err());
    }

    #[test]
    fn trajectory_csv_header() {
        let m = fixtures::two_state();
        let run = run_learner(&m, &mut Scripted(Policy::new(vec![0, 0])), &mut NoAttack, &cfg(3, 1), 2).unwrap();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &run.records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("l,t,s,a,r,r_delivered,s_next,episode_end\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
