//! Experiment orchestration: attack cost accounting, multi-learner runs per
//! seed, attack comparisons and CSV/JSON outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::{ConfidenceParams, ObservationCounts};
use crate::error::{Error, Result};
use crate::learners::{LearnerKind, LearnerSpec, ProblemShape, SubOptModel};
use crate::mdp::{Policy, TabularMdp, DEFAULT_ENUMERATION_CAP};
use crate::prior_data::{attack_from_prior, load_counts, SubOptInput};
use crate::simulator::{
    run_learner, sample_step, stream, write_trajectories, Attacker, NoAttack, Phase, Role, RunConfig, TransitionRecord,
};
use crate::u2::{theoretical_budget, u2_cost_bound, U2Attacker, U2Config, U2Snapshot};
use crate::whitebox::{delta_star, AttackConfig, FixedPerturbationAttacker, Perturbation};

/// Label written next to every pass/fail threshold in outputs.
pub const REGRESSION_NOTE: &str = "match-rate and seed-count thresholds are regression anchors chosen for this harness";

/// One step of the cost sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub learner: usize,
    pub step: usize,
    pub reward_change: f64,
    pub off_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSubtotal {
    pub learner: usize,
    pub phase: Phase,
    pub steps: usize,
    /// Sum of `|r - r'|`.
    pub reward_change: f64,
    pub off_target_steps: u64,
    /// Fraction of target actions in the last quarter of the run.
    pub final_quarter_match: f64,
}

impl LearnerSubtotal {
    pub fn cost(&self, lambda: f64) -> f64 {
        self.reward_change + lambda * self.off_target_steps as f64
    }
}

/// Accumulates `Cost(T, L) = (1 / L T) sum (|r - r'| + lambda 1{a != target(s)})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub target: Policy,
    pub lambda: f64,
    pub learners: Vec<LearnerSubtotal>,
    /// Per-step entries, kept only on request.
    pub entries: Option<Vec<LedgerEntry>>,
}

impl CostLedger {
    pub fn new(target: Policy, lambda: f64, keep_entries: bool) -> Self {
        CostLedger {
            target,
            lambda,
            learners: Vec::new(),
            entries: keep_entries.then(Vec::new),
        }
    }

    pub fn record(&mut self, learner: usize, phase: Phase, records: &[TransitionRecord]) {
        let mut subtotal = LearnerSubtotal {
            learner,
            phase,
            steps: records.len(),
            reward_change: 0.0,
            off_target_steps: 0,
            final_quarter_match: 0.0,
        };
        for r in records {
            let change = (r.reward - r.delivered).abs();
            let off_target = r.action != self.target.action(r.state);
            subtotal.reward_change += change;
            subtotal.off_target_steps += u64::from(off_target);
            if let Some(entries) = &mut self.entries {
                entries.push(LedgerEntry {
                    learner,
                    step: r.step,
                    reward_change: change,
                    off_target,
                });
            }
        }
        let tail = &records[records.len() - records.len() / 4..];
        subtotal.final_quarter_match = if tail.is_empty() {
            1.0
        } else {
            tail.iter().filter(|r| r.action == self.target.action(r.state)).count() as f64 / tail.len() as f64
        };
        self.learners.push(subtotal);
    }

    pub fn total_steps(&self) -> usize {
        self.learners.iter().map(|l| l.steps).sum()
    }

    pub fn aggregate(&self) -> f64 {
        let steps = self.total_steps();
        if steps == 0 {
            return 0.0;
        }
        self.learners.iter().map(|l| l.cost(self.lambda)).sum::<f64>() / steps as f64
    }

    /// Learners run in the given phase.
    pub fn in_phase(&self, phase: Phase) -> impl Iterator<Item = &LearnerSubtotal> {
        self.learners.iter().filter(move |l| l.phase == phase)
    }
}

/// Cost recomputed directly from raw records.
pub fn cost_from_records(
    records: &[TransitionRecord],
    target: &Policy,
    lambda: f64,
    num_learners: usize,
    total_steps: usize,
) -> f64 {
    let sum: f64 = records
        .iter()
        .map(|r| {
            (r.reward - r.delivered).abs()
                + if r.action != target.action(r.state) {
                    lambda
                } else {
                    0.0
                }
        })
        .sum();
    sum / (num_learners * total_steps) as f64
}

/// Attacker choice and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackerSpec {
    None {
        lambda: f64,
    },
    Whitebox {
        eps: f64,
        lambda: f64,
    },
    U2 {
        eps: f64,
        lambda: f64,
        m: f64,
        p: f64,
        sigma: f64,
    },
    /// Attack from prior observations: read from `counts` or, when absent,
    /// `samples_per_pair` fresh samples of every pair.
    Prior {
        eps: f64,
        lambda: f64,
        p: f64,
        sigma: f64,
        #[serde(default)]
        counts: Option<PathBuf>,
        #[serde(default)]
        samples_per_pair: Option<usize>,
    },
}

impl AttackerSpec {
    pub fn label(&self) -> &'static str {
        match self {
            AttackerSpec::None { .. } => "none",
            AttackerSpec::Whitebox { .. } => "whitebox",
            AttackerSpec::U2 { .. } => "u2",
            AttackerSpec::Prior { .. } => "prior",
        }
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            AttackerSpec::None { lambda }
            | AttackerSpec::Whitebox { lambda, .. }
            | AttackerSpec::U2 { lambda, .. }
            | AttackerSpec::Prior { lambda, .. } => lambda,
        }
    }

    fn eps(&self) -> Option<f64> {
        match *self {
            AttackerSpec::None { .. } => None,
            AttackerSpec::Whitebox { eps, .. } | AttackerSpec::U2 { eps, .. } | AttackerSpec::Prior { eps, .. } => {
                Some(eps)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let field = |name: &str, message: String| Error::Config {
            field: format!("attacker.{name}"),
            message,
        };
        if !(self.lambda() >= 0.0) || !self.lambda().is_finite() {
            return Err(field(
                "lambda",
                format!("{} must be a nonnegative number", self.lambda()),
            ));
        }
        if let Some(eps) = self.eps() {
            if !(eps > 0.0) || !eps.is_finite() {
                return Err(field("eps", format!("{eps} must be positive")));
            }
        }
        match *self {
            AttackerSpec::U2 { m, p, sigma, .. } => {
                if !(m > 0.0) {
                    return Err(field("m", format!("{m} must be positive")));
                }
                check_p_sigma(p, sigma)
            }
            AttackerSpec::Prior {
                p,
                sigma,
                ref counts,
                samples_per_pair,
                ..
            } => {
                if counts.is_none() && samples_per_pair.unwrap_or(0) == 0 {
                    return Err(field(
                        "counts",
                        "give a counts file or a positive samples_per_pair".into(),
                    ));
                }
                check_p_sigma(p, sigma)
            }
            _ => Ok(()),
        }
    }
}

fn check_p_sigma(p: f64, sigma: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config {
            field: "attacker.p".into(),
            message: format!("{p} must lie in (0, 1)"),
        });
    }
    if !(sigma >= 0.0) {
        return Err(Error::Config {
            field: "attacker.sigma".into(),
            message: format!("{sigma} must be nonnegative"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearnerChoice {
    Name(LearnerKind),
    Spec(LearnerSpec),
}

impl LearnerChoice {
    pub fn spec(&self) -> LearnerSpec {
        match self {
            LearnerChoice::Name(kind) => LearnerSpec::of_kind(*kind),
            LearnerChoice::Spec(spec) => spec.clone(),
        }
    }
}

/// Learner guarantee constants used only for bound columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        AnalysisSpec {
            alpha: 0.01,
            beta: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// MDP file, relative to the config file.
    pub mdp: PathBuf,
    pub learner: LearnerChoice,
    pub attacker: AttackerSpec,
    /// Attackers for `compare`; defaults to `attacker` alone.
    #[serde(default)]
    pub compare: Vec<AttackerSpec>,
    pub target: Vec<usize>,
    pub total_steps: usize,
    pub num_learners: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub record_trajectories: bool,
    #[serde(default)]
    pub analysis: AnalysisSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|err| Error::Config {
            field: origin.to_string(),
            message: err.to_string(),
        })
    }

    /// Reads a config and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = Self::from_json_str(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.mdp = base.join(&cfg.mdp);
        cfg.output_dir = base.join(&cfg.output_dir);
        for spec in std::iter::once(&mut cfg.attacker).chain(cfg.compare.iter_mut()) {
            if let AttackerSpec::Prior {
                counts: Some(counts), ..
            } = spec
            {
                *counts = base.join(&*counts);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self, mdp: &TabularMdp<f64>) -> Result<()> {
        let field = |name: &str, message: String| Error::Config {
            field: name.into(),
            message,
        };
        if self.seeds.is_empty() {
            return Err(field("seeds", "must list at least one seed".into()));
        }
        if self.total_steps == 0 {
            return Err(field("total_steps", "must be at least 1".into()));
        }
        if self.num_learners == 0 {
            return Err(field("num_learners", "must be at least 1".into()));
        }
        self.target_policy()
            .validate(mdp.num_states, mdp.num_actions)
            .map_err(|err| field("target", err.to_string()))?;
        self.learner.spec().validate()?;
        for spec in std::iter::once(&self.attacker).chain(&self.compare) {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn target_policy(&self) -> Policy {
        Policy::new(self.target.clone())
    }

    pub fn load_mdp(&self) -> Result<TabularMdp<f64>> {
        let mdp = TabularMdp::load(&self.mdp)?;
        self.validate(&mdp)?;
        Ok(mdp)
    }
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub cost: f64,
    pub ledger: CostLedger,
    pub learners_explored: Option<usize>,
    pub attack_started: bool,
    /// Mean and minimum final-quarter match rate over attack-phase learners.
    pub attack_match_mean: Option<f64>,
    pub attack_match_min: Option<f64>,
    /// Mean off-target steps per attack-phase learner.
    pub attack_off_target_mean: Option<f64>,
    pub perturbation: Option<Perturbation<f64>>,
    pub u2: Option<U2Snapshot>,
    #[serde(skip)]
    pub trajectories: Option<Vec<TransitionRecord>>,
}

/// Built attacker for one seed.
enum SeedAttacker {
    None(NoAttack),
    Fixed(FixedPerturbationAttacker),
    U2(Box<U2Attacker>),
}

impl SeedAttacker {
    fn as_dyn(&mut self) -> &mut dyn Attacker {
        match self {
            SeedAttacker::None(a) => a,
            SeedAttacker::Fixed(a) => a,
            SeedAttacker::U2(a) => a.as_mut(),
        }
    }
}

/// Prior observations: `per_pair` samples of every pair from a stream
/// separate from the learners' streams.
pub fn synthetic_prior_counts(mdp: &TabularMdp<f64>, per_pair: usize, seed: u64) -> Result<ObservationCounts<f64>> {
    let mut rng = stream(seed, usize::MAX / 4, Role::Environment);
    let mut counts = ObservationCounts::new(mdp.num_states, mdp.num_actions);
    for s in 0..mdp.num_states {
        for a in 0..mdp.num_actions {
            for _ in 0..per_pair {
                let (r, next) = sample_step(mdp, s, a, &mut rng);
                counts.update(s, a, r, next)?;
            }
        }
    }
    Ok(counts)
}

fn build_attacker(
    spec: &AttackerSpec,
    mdp: &TabularMdp<f64>,
    target: &Policy,
    num_learners: usize,
    seed: u64,
) -> Result<SeedAttacker> {
    Ok(match spec {
        AttackerSpec::None { .. } => SeedAttacker::None(NoAttack),
        AttackerSpec::Whitebox { eps, lambda } => {
            let cfg = AttackConfig::new(target.clone(), *eps, *lambda)?;
            SeedAttacker::Fixed(FixedPerturbationAttacker::new(delta_star(mdp, &cfg)?))
        }
        AttackerSpec::U2 { .. } => {
            let u2cfg = u2_config(spec, mdp, target, num_learners).expect("u2 spec");
            SeedAttacker::U2(Box::new(U2Attacker::new(u2cfg, mdp.num_states, mdp.num_actions)?))
        }
        AttackerSpec::Prior {
            eps,
            lambda,
            p,
            sigma,
            counts,
            samples_per_pair,
        } => {
            let counts = match counts {
                Some(path) => load_counts(path)?,
                None => synthetic_prior_counts(mdp, samples_per_pair.unwrap_or(0), seed)?,
            };
            let params = ConfidenceParams {
                sigma: *sigma,
                num_learners,
                failure_p: *p,
                gamma: mdp.gamma,
                initial_dist: mdp.initial_dist.clone(),
            };
            let cfg = AttackConfig::new(target.clone(), *eps, *lambda)?;
            let report = attack_from_prior(&counts, None, &cfg, &params, None)?;
            SeedAttacker::Fixed(FixedPerturbationAttacker::new(report.delta))
        }
    })
}

/// U2 settings for `spec`, or `None` for other attackers.
pub fn u2_config(spec: &AttackerSpec, mdp: &TabularMdp<f64>, target: &Policy, num_learners: usize) -> Option<U2Config> {
    match *spec {
        AttackerSpec::U2 {
            eps,
            lambda,
            m,
            p,
            sigma,
        } => Some(U2Config {
            target: target.clone(),
            eps,
            lambda,
            m,
            p,
            sigma,
            gamma: mdp.gamma,
            initial_dist: mdp.initial_dist.clone(),
            num_learners,
        }),
        _ => None,
    }
}

/// Runs `num_learners` fresh learners in turn against one attacker.
pub fn run_seed(
    mdp: &TabularMdp<f64>,
    learner: &LearnerSpec,
    attacker: &AttackerSpec,
    target: &Policy,
    total_steps: usize,
    num_learners: usize,
    seed: u64,
    record_trajectories: bool,
) -> Result<SeedResult> {
    let mut built = build_attacker(attacker, mdp, target, num_learners, seed)?;
    let run_cfg = RunConfig {
        total_steps,
        num_learners,
        seed,
        record_trajectories,
    };
    let shape = ProblemShape::of(mdp);
    let mut ledger = CostLedger::new(target.clone(), attacker.lambda(), false);
    let mut trajectories = record_trajectories.then(Vec::new);
    for l in 0..num_learners {
        let mut victim = learner.build(&shape, seed, l);
        let run = run_learner(mdp, victim.as_mut(), built.as_dyn(), &run_cfg, l)?;
        ledger.record(l, run.phase, &run.records);
        if let Some(all) = &mut trajectories {
            all.extend(run.records);
        }
    }
    let attack: Vec<&LearnerSubtotal> = ledger.in_phase(Phase::Attack).collect();
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let attack_match_mean = mean(attack.iter().map(|l| l.final_quarter_match).collect());
    let attack_match_min = attack.iter().map(|l| l.final_quarter_match).reduce(f64::min);
    let attack_off_target_mean = mean(attack.iter().map(|l| l.off_target_steps as f64).collect());
    let (learners_explored, u2, perturbation, attack_started) = match &built {
        SeedAttacker::U2(a) => {
            let snap = a.snapshot();
            if !snap.attack_started {
                log::warn!("seed {seed}: attack never started; all {num_learners} learners explored");
            }
            (
                Some(a.learners_explored()),
                Some(snap),
                a.frozen_delta().cloned(),
                a.frozen_delta().is_some(),
            )
        }
        SeedAttacker::Fixed(a) => (None, None, Some(a.perturbation().clone()), true),
        SeedAttacker::None(_) => (None, None, None, false),
    };
    Ok(SeedResult {
        seed,
        cost: ledger.aggregate(),
        ledger,
        learners_explored,
        attack_started,
        attack_match_mean,
        attack_match_min,
        attack_off_target_mean,
        perturbation,
        u2,
        trajectories,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub attacker: String,
    pub learner: String,
    pub total_steps: usize,
    pub num_learners: usize,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub mean_attack_match: Option<f64>,
    pub min_attack_match: Option<f64>,
    pub mean_learners_explored: Option<f64>,
    pub seeds_without_attack: usize,
    pub note: String,
    pub seeds: Vec<SeedResult>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = jobs {
        if jobs == 0 {
            return Err(Error::Config {
                field: "jobs".into(),
                message: "must be at least 1".into(),
            });
        }
        builder = builder.num_threads(jobs);
    }
    builder
        .build()
        .map_err(|err| Error::Simulation(format!("cannot start worker pool: {err}")))
}

/// Runs every seed of `cfg` with `attacker`, seeds in parallel.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    mdp: &TabularMdp<f64>,
    attacker: &AttackerSpec,
    jobs: Option<usize>,
) -> Result<ExperimentSummary> {
    cfg.validate(mdp)?;
    let learner = cfg.learner.spec();
    let target = cfg.target_policy();
    let seeds: Vec<SeedResult> = pool(jobs)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                run_seed(
                    mdp,
                    &learner,
                    attacker,
                    &target,
                    cfg.total_steps,
                    cfg.num_learners,
                    seed,
                    cfg.record_trajectories,
                )
            })
            .collect::<Result<_>>()
    })?;
    let costs: Vec<f64> = seeds.iter().map(|s| s.cost).collect();
    let (mean_cost, std_cost) = mean_std(&costs);
    let matches: Vec<f64> = seeds.iter().filter_map(|s| s.attack_match_mean).collect();
    let explored: Vec<f64> = seeds
        .iter()
        .filter_map(|s| s.learners_explored.map(|k| k as f64))
        .collect();
    Ok(ExperimentSummary {
        attacker: attacker.label().into(),
        learner: learner.kind.to_string(),
        total_steps: cfg.total_steps,
        num_learners: cfg.num_learners,
        mean_cost,
        std_cost,
        mean_attack_match: (!matches.is_empty()).then(|| mean_std(&matches).0),
        min_attack_match: seeds.iter().filter_map(|s| s.attack_match_min).reduce(f64::min),
        mean_learners_explored: (!explored.is_empty()).then(|| mean_std(&explored).0),
        seeds_without_attack: seeds
            .iter()
            .filter(|s| matches!(attacker, AttackerSpec::U2 { .. }) && !s.attack_started)
            .count(),
        note: REGRESSION_NOTE.into(),
        seeds,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, mdp: &TabularMdp<f64>, jobs: Option<usize>) -> Result<ExperimentSummary> {
    run_experiment_with(cfg, mdp, &cfg.attacker, jobs)
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(io_error(path))
}

/// Per-learner CSV for one seed.
pub fn write_seed_csv<W: Write>(writer: W, result: &SeedResult) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record([
        "seed",
        "learner",
        "phase",
        "steps",
        "reward_change",
        "off_target_steps",
        "cost",
        "final_quarter_match",
    ])?;
    let lambda = result.ledger.lambda;
    for l in &result.ledger.learners {
        out.write_record([
            result.seed.to_string(),
            l.learner.to_string(),
            l.phase.to_string(),
            l.steps.to_string(),
            l.reward_change.to_string(),
            l.off_target_steps.to_string(),
            (l.cost(lambda) / l.steps as f64).to_string(),
            l.final_quarter_match.to_string(),
        ])?;
    }
    out.flush().map_err(|source| Error::Io {
        path: "<seed csv>".into(),
        source,
    })
}

/// Writes `seed_<k>.csv` (and trajectories and attacker snapshots when
/// present) per seed, `seeds.csv` and `summary.json` into `dir`.
pub fn write_outputs(summary: &ExperimentSummary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let table_path = dir.join("seeds.csv");
    let mut table = csv::Writer::from_writer(create(&table_path)?);
    table.write_record([
        "seed",
        "cost",
        "learners_explored",
        "attack_started",
        "attack_match_mean",
        "attack_match_min",
    ])?;
    let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
    for result in &summary.seeds {
        table.write_record([
            result.seed.to_string(),
            result.cost.to_string(),
            result.learners_explored.map_or_else(String::new, |k| k.to_string()),
            result.attack_started.to_string(),
            opt(result.attack_match_mean),
            opt(result.attack_match_min),
        ])?;
        write_seed_csv(create(&dir.join(format!("seed_{}.csv", result.seed)))?, result)?;
        if let Some(records) = &result.trajectories {
            write_trajectories(
                create(&dir.join(format!("trajectories_seed_{}.csv", result.seed)))?,
                records,
            )?;
        }
        if let Some(snap) = &result.u2 {
            let path = dir.join(format!("u2_seed_{}.json", result.seed));
            fs::write(&path, serde_json::to_string_pretty(snap).expect("snapshot serializes"))
                .map_err(io_error(&path))?;
        }
    }
    table.flush().map_err(io_error(&table_path))?;
    let path = dir.join("summary.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(summary).expect("summary serializes"),
    )
    .map_err(io_error(&path))?;
    Ok(())
}

/// `(||delta||_inf + lambda) subopt / T` with a fractional step count.
pub fn fixed_perturbation_bound(delta: &Perturbation<f64>, lambda: f64, subopt: f64, total_steps: usize) -> f64 {
    (delta.sup_norm() + lambda) * subopt / total_steps as f64
}

/// One attacker's line in a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub attacker: String,
    pub mean_cost: f64,
    pub std_cost: f64,
    pub seed_costs: Vec<f64>,
    /// Bound `(||delta||_inf + lambda) subopt / T` for fixed
    /// perturbations, from measured off-target counts.
    pub fixed_bound: Option<f64>,
    /// Theory bound for the explore-then-attack strategy.
    pub u2_bound: Option<f64>,
    pub mean_learners_explored: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub total_steps: usize,
    pub num_learners: usize,
    pub rows: Vec<ComparisonRow>,
    pub note: String,
}

/// Runs every attacker of `cfg.compare` (or `cfg.attacker`) on the same
/// MDP, learner and seeds.
pub fn compare_attacks(cfg: &ExperimentConfig, mdp: &TabularMdp<f64>, jobs: Option<usize>) -> Result<Comparison> {
    let specs: Vec<AttackerSpec> = if cfg.compare.is_empty() {
        vec![cfg.attacker.clone()]
    } else {
        cfg.compare.clone()
    };
    let target = cfg.target_policy();
    let mut rows = Vec::new();
    for spec in &specs {
        let summary = run_experiment_with(cfg, mdp, spec, jobs)?;
        let seed_costs: Vec<f64> = summary.seeds.iter().map(|s| s.cost).collect();
        let off_target: Vec<f64> = summary.seeds.iter().filter_map(|s| s.attack_off_target_mean).collect();
        let subopt = (!off_target.is_empty()).then(|| off_target.iter().sum::<f64>() / off_target.len() as f64);
        let fixed_bound = match spec {
            AttackerSpec::Whitebox { .. } | AttackerSpec::Prior { .. } => {
                let delta = summary.seeds[0]
                    .perturbation
                    .as_ref()
                    .expect("fixed attackers report their perturbation");
                subopt.map(|count| fixed_perturbation_bound(delta, spec.lambda(), count, cfg.total_steps))
            }
            _ => None,
        };
        let u2_bound = match u2_config(spec, mdp, &target, cfg.num_learners) {
            Some(u2cfg) => {
                let budget = theoretical_budget(
                    mdp,
                    cfg.analysis.alpha,
                    cfg.analysis.beta,
                    &u2cfg,
                    DEFAULT_ENUMERATION_CAP,
                )?;
                Some(u2_cost_bound(
                    mdp,
                    &u2cfg,
                    &budget,
                    subopt.unwrap_or(cfg.total_steps as f64),
                    cfg.total_steps,
                    cfg.num_learners,
                )?)
            }
            None => None,
        };
        rows.push(ComparisonRow {
            attacker: summary.attacker.clone(),
            mean_cost: summary.mean_cost,
            std_cost: summary.std_cost,
            seed_costs,
            fixed_bound,
            u2_bound,
            mean_learners_explored: summary.mean_learners_explored,
        });
    }
    Ok(Comparison {
        total_steps: cfg.total_steps,
        num_learners: cfg.num_learners,
        rows,
        note: REGRESSION_NOTE.into(),
    })
}

pub fn write_comparison(comparison: &Comparison, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let path = dir.join("comparison.csv");
    let mut out = csv::Writer::from_writer(create(&path)?);
    out.write_record([
        "attacker",
        "mean_cost",
        "std_cost",
        "fixed_bound",
        "u2_bound",
        "mean_learners_explored",
    ])?;
    let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
    for row in &comparison.rows {
        out.write_record([
            row.attacker.clone(),
            row.mean_cost.to_string(),
            row.std_cost.to_string(),
            opt(row.fixed_bound),
            opt(row.u2_bound),
            opt(row.mean_learners_explored),
        ])?;
    }
    out.flush().map_err(io_error(&path))?;
    let path = dir.join("comparison.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(comparison).expect("comparison serializes"),
    )
    .map_err(io_error(&path))?;
    Ok(())
}

/// Prior-data report with the analysis filled in from the true MDP.
pub fn prior_attack_report(
    counts: &ObservationCounts<f64>,
    mdp: &TabularMdp<f64>,
    cfg: &AttackConfig<f64>,
    params: &ConfidenceParams<f64>,
    subopt: Option<(SubOptModel, usize)>,
) -> Result<crate::prior_data::PriorDataReport> {
    let input = subopt.map(|(model, total_steps)| SubOptInput {
        total_steps,
        subopt: model.eval(total_steps, cfg.eps, params.failure_p / params.num_learners as f64),
    });
    attack_from_prior(counts, Some(mdp), cfg, params, input)
}
