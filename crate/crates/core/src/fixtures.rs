//! Small reference MDPs and a seeded random-instance generator.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::mdp::{Policy, TabularMdp};

/// One state, two self-looping actions with rewards 1 and 0, `gamma = 0.5`.
pub fn single_state() -> TabularMdp<f64> {
    TabularMdp::new(
        vec![vec![1.0, 0.0]],
        vec![vec![vec![1.0], vec![1.0]]],
        0.5,
        vec![1.0],
        1,
        0.0,
    )
    .expect("valid fixture")
}

/// Deterministic cycle `s0 -> s1 -> s0` with reward 1 in `s0`, two identical
/// actions, `gamma = 0.5`, start in `s0`.
pub fn two_state_cycle() -> TabularMdp<f64> {
    TabularMdp::new(
        vec![vec![1.0, 1.0], vec![0.0, 0.0]],
        vec![
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
        ],
        0.5,
        vec![1.0, 0.0],
        10,
        0.0,
    )
    .expect("valid fixture")
}

/// The cycle above where action 1 in `s1` instead pays 1 and stays put.
pub fn cycle_with_self_loop() -> TabularMdp<f64> {
    TabularMdp::new(
        vec![vec![1.0, 1.0], vec![0.0, 1.0]],
        vec![
            vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        ],
        0.5,
        vec![1.0, 0.0],
        10,
        0.0,
    )
    .expect("valid fixture")
}

/// Connected two-state, two-action environment used by the end-to-end
/// experiments. Every policy visits both states with discounted weight
/// above 0.2.
pub fn two_state() -> TabularMdp<f64> {
    TabularMdp::new(
        vec![vec![0.8, 0.3], vec![0.2, 0.6]],
        vec![
            vec![vec![0.75, 0.25], vec![0.25, 0.75]],
            vec![vec![0.5, 0.5], vec![0.125, 0.875]],
        ],
        0.5,
        vec![0.5, 0.5],
        10,
        0.1,
    )
    .expect("valid fixture")
}

/// Target policy for [`two_state`]; differs from its optimal policy.
pub fn two_state_target() -> Policy {
    Policy::new(vec![1, 0])
}

/// Random MDP with rewards uniform in `[0, 1]` and strictly positive
/// transition rows drawn from a flat Dirichlet.
pub fn random_mdp<R: Rng>(rng: &mut R, num_states: usize, num_actions: usize, gamma: f64) -> TabularMdp<f64> {
    let rewards = (0..num_states)
        .map(|_| (0..num_actions).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let transitions = (0..num_states)
        .map(|_| (0..num_actions).map(|_| flat_dirichlet(rng, num_states)).collect())
        .collect();
    let initial_dist = flat_dirichlet(rng, num_states);
    TabularMdp::new(rewards, transitions, gamma, initial_dist, 10, 0.0).expect("valid random MDP")
}

/// [`random_mdp`] from a fixed seed.
pub fn uniform_random(num_states: usize, num_actions: usize, gamma: f64, seed: u64) -> TabularMdp<f64> {
    random_mdp(&mut ChaCha8Rng::seed_from_u64(seed), num_states, num_actions, gamma)
}

/// Flat Dirichlet sample, bounded away from zero and renormalized exactly.
pub fn flat_dirichlet<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / total).collect();
    let head: f64 = p[..n - 1].iter().sum();
    p[n - 1] = 1.0 - head;
    p
}

pub fn random_policy<R: Rng>(rng: &mut R, num_states: usize, num_actions: usize) -> Policy {
    Policy::new((0..num_states).map(|_| rng.gen_range(0..num_actions)).collect())
}
