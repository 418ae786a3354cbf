//! Explore-then-attack strategy for black-box victims.
//!
//! Early learners receive fair coin-flip rewards, which makes every pair look
//! equally good and drives exploration, while the attacker records the true
//! rewards. After each such learner the confidence set is rebuilt; once the
//! estimated perturbation is provably within `m` of the white-box one, it is
//! frozen and applied to every later learner.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::confidence::{
    build_confidence_set, reward_radius_scale, transition_radius_scale, ConfidenceParams, ConfidenceSet,
    ObservationCounts,
};
use crate::error::{Error, Result};
use crate::learners::LearnerSpec;
use crate::learners::ProblemShape;
use crate::mdp::{enumerate_policies, mu_min_and_g, Policy, TabularMdp};
use crate::robust::{delta_hat_from_values, robust_values, RobustValues, ROBUST_EVAL_TOL};
use crate::scalar::Scalar;
use crate::simulator::{run_learner, Attacker, Interaction, Phase, RunConfig, SimRng};
use crate::whitebox::{delta_star, AttackConfig, Perturbation};

/// Constants of the learner lower bound on visit counts.
pub const C1: f64 = 0.02;
pub const C2: f64 = 1.34;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct U2Config {
    pub target: Policy,
    pub eps: f64,
    pub lambda: f64,
    /// Allowed excess of the frozen perturbation over the white-box one.
    pub m: f64,
    /// Overall failure probability.
    pub p: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub initial_dist: Vec<f64>,
    /// Learners covered by the confidence union bound.
    pub num_learners: usize,
}

impl U2Config {
    pub fn validate(&self) -> Result<()> {
        self.attack_config()?;
        if !(self.m > 0.0) {
            return Err(Error::Config {
                field: "m".into(),
                message: format!("{} must be positive", self.m),
            });
        }
        self.confidence_params().validate()
    }

    pub fn attack_config(&self) -> Result<AttackConfig<f64>> {
        AttackConfig::new(self.target.clone(), self.eps, self.lambda)
    }

    pub fn confidence_params(&self) -> ConfidenceParams<f64> {
        ConfidenceParams {
            sigma: self.sigma,
            num_learners: self.num_learners,
            failure_p: self.p,
            gamma: self.gamma,
            initial_dist: self.initial_dist.clone(),
        }
    }
}

/// `(2u + 2 gamma range w) / ((1 - gamma)^2 sqrt(n))`
pub fn q_error<T: Scalar>(u: T, w: T, gamma: T, range: T, n_min: u64) -> T {
    let two = T::lit(2.0);
    (two * u + two * gamma * range * w) / ((T::one() - gamma).powi(2) * T::from_count(n_min).sqrt())
}

/// `2 gamma w / ((1 - gamma) sqrt(n))`
pub fn occupancy_error<T: Scalar>(w: T, gamma: T, n_min: u64) -> T {
    T::lit(2.0) * gamma * w / ((T::one() - gamma) * T::from_count(n_min).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct ErrorTerms<T> {
    pub r_hat_range: T,
    /// Action-value error with the estimated reward range.
    pub e_q_hat: T,
    pub e_mu: T,
    /// Action-value error with the true reward range, when known.
    pub e_q: Option<T>,
    pub n_min: u64,
}

pub fn error_terms<T: Scalar>(cs: &ConfidenceSet<T>, true_range: Option<T>) -> ErrorTerms<T> {
    let n_min = cs.n_min();
    let gamma = cs.gamma();
    let r_hat_range = cs.r_hat_range();
    ErrorTerms {
        r_hat_range,
        e_q_hat: q_error(cs.u, cs.w, gamma, r_hat_range, n_min),
        e_mu: occupancy_error(cs.w, gamma, n_min),
        e_q: true_range.map(|range| q_error(cs.u, cs.w, gamma, range, n_min)),
        n_min,
    }
}

/// Largest left side of the stopping inequality over off-target pairs, or
/// `None` when some lowest occupancy is not positive.
pub fn stopping_lhs<T: Scalar>(cs: &ConfidenceSet<T>, target: &Policy, eps: T, mu_low: &[Vec<T>]) -> Option<T> {
    let terms = error_terms(cs, None);
    let mut worst = T::neg_infinity();
    for (s, row) in mu_low.iter().enumerate() {
        for (a, &mu) in row.iter().enumerate() {
            if a == target.action(s) {
                continue;
            }
            if !(mu > T::zero()) {
                return None;
            }
            let lhs = T::lit(2.0) * terms.e_q_hat + eps / mu - eps / (mu + terms.e_mu);
            worst = worst.max(lhs);
        }
    }
    Some(worst)
}

/// Whether exploration may end: every off-target pair satisfies
/// `2 e_q_hat + eps / mu_low - eps / (mu_low + e_mu) <= m`.
pub fn stopping_check<T: Scalar>(cs: &ConfidenceSet<T>, target: &Policy, eps: T, m: T, mu_low: &[Vec<T>]) -> bool {
    stopping_lhs(cs, target, eps, mu_low).is_some_and(|lhs| lhs <= m)
}

/// Fair coin-flip reward used during exploration.
pub fn exploration_reward<R: Rng>(rng: &mut R) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        0.0
    }
}

/// Replaces every reward by a coin flip.
#[derive(Debug, Clone, Copy, Default)]
pub struct CoinFlipRewards;

impl Attacker for CoinFlipRewards {
    fn perturb(&mut self, _step: &Interaction, rng: &mut SimRng) -> f64 {
        exploration_reward(rng)
    }

    fn phase(&self) -> Phase {
        Phase::Exploration
    }
}

/// State of the attacker after one exploration learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub learner: usize,
    pub n_min: u64,
    /// Largest stopping-inequality left side; absent while some pair is
    /// unvisited or has zero lowest occupancy.
    pub stopping_lhs: Option<f64>,
    pub stopped: bool,
}

/// Exported attacker state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct U2Snapshot {
    pub phase: Phase,
    pub learners_explored: usize,
    pub attack_started: bool,
    pub frozen_delta: Option<Vec<Vec<f64>>>,
    pub checkpoints: Vec<Checkpoint>,
}

#[derive(Debug, Clone)]
pub struct U2Attacker {
    cfg: U2Config,
    attack: AttackConfig<f64>,
    phase: Phase,
    learners_explored: usize,
    counts: ObservationCounts<f64>,
    cs: Option<ConfidenceSet<f64>>,
    cached: Option<(u64, RobustValues<f64>)>,
    frozen_delta: Option<Perturbation<f64>>,
    checkpoints: Vec<Checkpoint>,
    history: Option<Vec<ConfidenceSet<f64>>>,
}

impl U2Attacker {
    pub fn new(cfg: U2Config, num_states: usize, num_actions: usize) -> Result<Self> {
        cfg.validate()?;
        cfg.target.validate(num_states, num_actions)?;
        if cfg.initial_dist.len() != num_states {
            return Err(Error::Config {
                field: "initial_dist".into(),
                message: format!("expected {num_states} entries, got {}", cfg.initial_dist.len()),
            });
        }
        Ok(U2Attacker {
            attack: cfg.attack_config()?,
            cfg,
            phase: Phase::Exploration,
            learners_explored: 0,
            counts: ObservationCounts::new(num_states, num_actions),
            cs: None,
            cached: None,
            frozen_delta: None,
            checkpoints: Vec::new(),
            history: None,
        })
    }

    /// Keep every rebuilt confidence set for later inspection.
    pub fn with_history(mut self) -> Self {
        self.history = Some(Vec::new());
        self
    }

    pub fn learners_explored(&self) -> usize {
        self.learners_explored
    }

    pub fn counts(&self) -> &ObservationCounts<f64> {
        &self.counts
    }

    pub fn confidence_set(&self) -> Option<&ConfidenceSet<f64>> {
        self.cs.as_ref()
    }

    pub fn frozen_delta(&self) -> Option<&Perturbation<f64>> {
        self.frozen_delta.as_ref()
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn history(&self) -> &[ConfidenceSet<f64>] {
        self.history.as_deref().unwrap_or(&[])
    }

    pub fn snapshot(&self) -> U2Snapshot {
        U2Snapshot {
            phase: self.phase,
            learners_explored: self.learners_explored,
            attack_started: self.frozen_delta.is_some(),
            frozen_delta: self.frozen_delta.as_ref().map(|d| d.delta.clone()),
            checkpoints: self.checkpoints.clone(),
        }
    }

    fn values_for(&mut self, cs: &ConfidenceSet<f64>) -> Result<RobustValues<f64>> {
        let version = self.counts.version();
        if let Some((cached_version, values)) = &self.cached {
            if *cached_version == version {
                return Ok(values.clone());
            }
        }
        let values = robust_values(cs, &self.cfg.target, ROBUST_EVAL_TOL)?;
        self.cached = Some((version, values.clone()));
        Ok(values)
    }

    /// Rebuilds the confidence set and switches to the attack phase when the
    /// stopping inequality holds.
    fn refresh(&mut self, learner: usize) {
        let n_min = self.counts.n_min();
        let mut checkpoint = Checkpoint {
            learner,
            n_min,
            stopping_lhs: None,
            stopped: false,
        };
        let cs = match build_confidence_set(&self.counts, &self.cfg.confidence_params()) {
            Ok(cs) => cs,
            Err(err) => {
                log::debug!("learner {learner}: confidence set not ready: {err}");
                self.checkpoints.push(checkpoint);
                return;
            }
        };
        if let Some(history) = &mut self.history {
            history.push(cs.clone());
        }
        match self.values_for(&cs) {
            Ok(values) => {
                checkpoint.stopping_lhs = stopping_lhs(&cs, &self.cfg.target, self.cfg.eps, &values.mu_low);
                if checkpoint.stopping_lhs.is_some_and(|lhs| lhs <= self.cfg.m) {
                    match delta_hat_from_values(&values, &self.attack) {
                        Ok(delta) => {
                            log::info!("learner {learner}: exploration ends with n_min = {n_min}");
                            self.frozen_delta = Some(delta);
                            self.phase = Phase::Attack;
                            checkpoint.stopped = true;
                        }
                        Err(err) => log::warn!("learner {learner}: keeping exploration: {err}"),
                    }
                }
            }
            Err(err) => log::warn!("learner {learner}: robust evaluation failed: {err}"),
        }
        self.cs = Some(cs);
        self.checkpoints.push(checkpoint);
    }
}

impl Attacker for U2Attacker {
    fn perturb(&mut self, step: &Interaction, rng: &mut SimRng) -> f64 {
        match &self.frozen_delta {
            Some(delta) if self.phase == Phase::Attack => delta.apply(step.state, step.action, step.reward),
            _ => {
                if let Err(err) = self
                    .counts
                    .update(step.state, step.action, step.reward, step.next_state)
                {
                    log::warn!("dropping observation: {err}");
                }
                exploration_reward(rng)
            }
        }
    }

    fn end_learner(&mut self, learner: usize) {
        if self.phase == Phase::Exploration {
            self.learners_explored += 1;
            self.refresh(learner);
        }
    }

    fn phase(&self) -> Phase {
        self.phase
    }
}

/// Inputs of the theoretical exploration budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetInputs {
    pub alpha: f64,
    pub beta: f64,
    pub mu_min: f64,
    pub r_range: f64,
    pub m: f64,
    pub eps: f64,
    pub p: f64,
    pub gamma: f64,
    pub u: f64,
    pub w: f64,
    pub num_states: usize,
    pub num_actions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryBudget {
    /// Observations per pair that suffice for the stopping inequality.
    pub n0: f64,
    pub n0_terms: [f64; 3],
    /// Exploration learners that suffice with high probability.
    pub k0: f64,
    pub c1: f64,
    pub c2: f64,
    pub inputs: BudgetInputs,
}

impl TheoryBudget {
    pub fn from_inputs(inputs: BudgetInputs) -> Self {
        let BudgetInputs {
            alpha,
            beta,
            mu_min,
            r_range,
            m,
            eps,
            p,
            gamma,
            u,
            w,
            num_states,
            num_actions,
        } = inputs;
        let sa = (num_states * num_actions) as f64;
        let one_minus = 1.0 - gamma;
        let terms = [
            (2.0 * u / r_range).powi(2),
            ((8.0 * u + 16.0 * gamma * r_range * w) / (one_minus.powi(2) * m)).powi(2),
            ((2.0 * gamma * w / one_minus) * (6.0 * eps + m * mu_min) / (m * mu_min.powi(2))).powi(2),
        ];
        let n0 = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_beta = (1.0 / (8.0 * sa * beta)).ln();
        let k0 = 8.0 * (1.0 / p).ln()
            + (4.0 * alpha * alpha * n0 / (mu_min * mu_min)) * ((16.0 * sa).ln() + C2 * log_beta)
                / (C1 * log_beta * log_beta);
        TheoryBudget {
            n0,
            n0_terms: terms,
            k0,
            c1: C1,
            c2: C2,
            inputs,
        }
    }
}

/// Budget for `mdp` with the learner's final-policy accuracy `alpha` and
/// failure probability `beta`. Violated hypotheses are logged, not fatal.
pub fn theoretical_budget(
    mdp: &TabularMdp<f64>,
    alpha: f64,
    beta: f64,
    cfg: &U2Config,
    cap: u64,
) -> Result<TheoryBudget> {
    let bounds = mu_min_and_g(mdp, cap)?;
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    if alpha >= bounds.mu_min / (2.0 * 2f64.sqrt()) {
        log::warn!(
            "alpha = {alpha} is not below mu_min / (2 sqrt 2) = {}",
            bounds.mu_min / (2.0 * 2f64.sqrt())
        );
    }
    if beta >= 1.0 / (8.0 * (ns * na) as f64) {
        log::warn!("beta = {beta} is not below 1 / (8 S A)");
    }
    Ok(TheoryBudget::from_inputs(BudgetInputs {
        alpha,
        beta,
        mu_min: bounds.mu_min,
        r_range: mdp.reward_range(),
        m: cfg.m,
        eps: cfg.eps,
        p: cfg.p,
        gamma: cfg.gamma,
        u: reward_radius_scale(cfg.sigma, ns, na, cfg.num_learners, cfg.p),
        w: transition_radius_scale(ns, na, cfg.num_learners, cfg.p),
        num_states: ns,
        num_actions: na,
    }))
}

/// Cost bound from its parts:
/// `(k0 / L)(||R||_inf + sigma sqrt(2 ln(2 k0 T / p)) + 1 + lambda)
///  + (||delta*||_inf + lambda + m) subopt / T`.
#[allow(clippy::too_many_arguments)]
pub fn u2_cost_bound_from_parts(
    k0: f64,
    num_learners: usize,
    total_steps: usize,
    reward_sup: f64,
    sigma: f64,
    p: f64,
    lambda: f64,
    delta_star_sup: f64,
    m: f64,
    subopt: f64,
) -> f64 {
    let t = total_steps as f64;
    let noise = if k0 > 0.0 {
        sigma * (2.0 * (2.0 * k0 * t / p).ln()).sqrt()
    } else {
        0.0
    };
    k0 / num_learners as f64 * (reward_sup + noise + 1.0 + lambda) + (delta_star_sup + lambda + m) * subopt / t
}

/// Cost bound for the strategy on `mdp`, where `subopt` is the learner's
/// suboptimal-step bound at horizon `total_steps` and confidence `p / L`.
pub fn u2_cost_bound(
    mdp: &TabularMdp<f64>,
    cfg: &U2Config,
    budget: &TheoryBudget,
    subopt: f64,
    total_steps: usize,
    num_learners: usize,
) -> Result<f64> {
    let star = delta_star(mdp, &cfg.attack_config()?)?;
    Ok(u2_cost_bound_from_parts(
        budget.k0,
        num_learners,
        total_steps,
        mdp.reward_sup_norm(),
        cfg.sigma,
        cfg.p,
        cfg.lambda,
        star.sup_norm(),
        cfg.m,
        subopt,
    ))
}

/// Fixtures with constant reward `1/2` except at `(s, a)`: the plain one,
/// one where `(s, a)` pays `1/2 + alpha / g(s, a)` and one where it pays
/// `1/2 - alpha / g(s, a)`.
pub fn exploration_fixtures(
    mdp: &TabularMdp<f64>,
    s: usize,
    a: usize,
    alpha: f64,
    cap: u64,
) -> Result<(TabularMdp<f64>, TabularMdp<f64>, TabularMdp<f64>)> {
    if s >= mdp.num_states || a >= mdp.num_actions {
        return Err(Error::InvalidInput(format!("pair ({s}, {a}) out of range")));
    }
    let g = mu_min_and_g(mdp, cap)?.g[s][a];
    let shift = alpha / g;
    if !(alpha > 0.0) || !(shift <= 0.5) {
        return Err(Error::HypothesisViolation(format!(
            "alpha / g(s, a) = {shift} must lie in (0, 1/2]"
        )));
    }
    let flat = mdp.with_rewards(vec![vec![0.5; mdp.num_actions]; mdp.num_states]);
    let mut plus = flat.clone();
    plus.rewards[s][a] = 0.5 + shift;
    let mut minus = flat.clone();
    minus.rewards[s][a] = 0.5 - shift;
    Ok((flat, plus, minus))
}

/// Policies strictly within `alpha` of the best normalized return.
pub fn alpha_optimal_policies(mdp: &TabularMdp<f64>, alpha: f64, cap: u64) -> Result<Vec<Policy>> {
    let scored: Vec<(Policy, f64)> = enumerate_policies(mdp, cap)?
        .map(|pi| Ok((pi.clone(), mdp.normalized_return(&pi)?)))
        .collect::<Result<_>>()?;
    let best = scored.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    Ok(scored
        .into_iter()
        .filter(|(_, ret)| *ret > best - alpha + 1e-10)
        .map(|(pi, _)| pi)
        .collect())
}

/// Lower bound on visits to a pair during exploration:
/// `g^2 / alpha^2 * c1 ln(delta / 4 beta)^2 / (ln(8 / delta) + c2 ln(delta / 4 beta))`.
pub fn visit_count_bound(g: f64, alpha: f64, delta: f64, beta: f64) -> f64 {
    let log_ratio = (delta / (4.0 * beta)).ln();
    g * g / (alpha * alpha) * C1 * log_ratio * log_ratio / ((8.0 / delta).ln() + C2 * log_ratio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitCountReport {
    /// Visit count exceeded in at least a `1 - delta` fraction of trials.
    pub quantile: u64,
    pub bound: f64,
    pub visits: Vec<u64>,
    pub pass: bool,
}

/// Runs `trials` coin-flip explorations of `total_steps` steps and compares
/// the lower `delta`-quantile of visits to `(s, a)` with [`visit_count_bound`].
#[allow(clippy::too_many_arguments)]
pub fn visit_count_check(
    mdp: &TabularMdp<f64>,
    learner: &LearnerSpec,
    s: usize,
    a: usize,
    alpha: f64,
    beta: f64,
    delta: f64,
    total_steps: usize,
    trials: usize,
    seed: u64,
    cap: u64,
) -> Result<VisitCountReport> {
    if trials == 0 {
        return Err(Error::InvalidInput("need at least one trial".into()));
    }
    if !(4.0 * beta <= delta && delta < 1.0 && beta > 0.0) {
        return Err(Error::HypothesisViolation(format!(
            "need 0 < 4 beta <= delta < 1, got beta = {beta}, delta = {delta}"
        )));
    }
    let g = mu_min_and_g(mdp, cap)?.g[s][a];
    if !(alpha / g < 1.0 / (2.0 * 2f64.sqrt())) {
        return Err(Error::HypothesisViolation(format!(
            "alpha / g(s, a) = {} must be below 1 / (2 sqrt 2)",
            alpha / g
        )));
    }
    let shape = ProblemShape::of(mdp);
    let cfg = RunConfig {
        total_steps,
        num_learners: trials,
        seed,
        record_trajectories: true,
    };
    let mut visits = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut victim = learner.build(&shape, seed, trial);
        let run = run_learner(mdp, victim.as_mut(), &mut CoinFlipRewards, &cfg, trial)?;
        visits.push(run.records.iter().filter(|r| r.state == s && r.action == a).count() as u64);
    }
    let mut sorted = visits.clone();
    sorted.sort_unstable();
    let index = ((delta * trials as f64).floor() as usize).min(trials - 1);
    let quantile = sorted[index];
    let bound = visit_count_bound(g, alpha, delta, beta);
    Ok(VisitCountReport {
        quantile,
        bound,
        visits,
        pass: quantile as f64 >= bound,
    })
}
