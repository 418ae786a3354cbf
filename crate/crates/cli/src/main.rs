//! Command-line driver: experiments, attack comparisons, the closed-form
//! perturbation and the prior-data attack.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use u2lab::confidence::ConfidenceParams;
use u2lab::harness::{
    compare_attacks, run_experiment, write_comparison, write_outputs, AttackerSpec, ExperimentConfig,
};
use u2lab::prior_data::{attack_from_prior, load_counts, SubOptInput};
use u2lab::whitebox::delta_star;
use u2lab::{AttackConfig, Error, Perturbation, Policy, Result, TabularMdp};

#[derive(Parser)]
#[command(name = "u2lab", version, about = "Reward-poisoning attacks on tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write per-seed CSV and a JSON summary.
    Run(RunArgs),
    /// Run every attacker listed under `compare` on the same seeds.
    Compare(RunArgs),
    /// Print the minimal white-box perturbation.
    DeltaStar(DeltaStarArgs),
    /// Attack from a fixed observation log.
    PriorAttack(PriorArgs),
    /// Check an MDP file (and optionally an experiment config).
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for seeds (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct AttackArgs {
    /// Experiment config supplying the MDP, target and attacker settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mdp: Option<PathBuf>,
    /// Target action per state, comma separated.
    #[arg(long, value_delimiter = ',')]
    target: Option<Vec<usize>>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Directory for a JSON copy of the result.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DeltaStarArgs {
    #[command(flatten)]
    attack: AttackArgs,
}

#[derive(Args)]
struct PriorArgs {
    /// Observation counts or a confidence-set snapshot.
    #[arg(long)]
    counts: PathBuf,
    #[command(flatten)]
    attack: AttackArgs,
    /// Failure probability of the confidence set.
    #[arg(long)]
    p: Option<f64>,
    /// Reward noise scale; defaults to the MDP's.
    #[arg(long)]
    sigma: Option<f64>,
    /// Number of learners in the union bound.
    #[arg(long)]
    learners: Option<usize>,
    /// Suboptimal-step count per learner, for the cost bound.
    #[arg(long, requires = "steps")]
    subopt: Option<f64>,
    /// Steps per learner, for the cost bound.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, required_unless_present = "config")]
    mdp: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn missing(field: &str) -> Error {
    Error::Config {
        field: field.into(),
        message: "required (pass it as a flag or through --config)".into(),
    }
}

fn write_json<S: serde::Serialize + ?Sized>(dir: &Path, name: &str, value: &S) -> Result<()> {
    let io = |source| Error::Io {
        path: dir.join(name).display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(io)?;
    fs::write(
        dir.join(name),
        serde_json::to_string_pretty(value).expect("result serializes"),
    )
    .map_err(io)
}

fn load_run_config(args: &RunArgs) -> Result<(ExperimentConfig, TabularMdp)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    let mdp = cfg.load_mdp()?;
    Ok((cfg, mdp))
}

fn run(args: &RunArgs) -> Result<()> {
    let (cfg, mdp) = load_run_config(args)?;
    let summary = run_experiment(&cfg, &mdp, args.jobs)?;
    write_outputs(&summary, &cfg.output_dir)?;
    println!(
        "{} vs {}: mean cost {:.6} (std {:.6}) over {} seeds",
        summary.attacker,
        summary.learner,
        summary.mean_cost,
        summary.std_cost,
        summary.seeds.len()
    );
    if let Some(k) = summary.mean_learners_explored {
        println!("mean exploring learners {k:.2}");
    }
    if summary.seeds_without_attack > 0 {
        println!("attack never started on {} seeds", summary.seeds_without_attack);
    }
    if let Some(rate) = summary.mean_attack_match {
        println!("target match in the final quarter {rate:.4}");
    }
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn compare(args: &RunArgs) -> Result<()> {
    let (cfg, mdp) = load_run_config(args)?;
    let table = compare_attacks(&cfg, &mdp, args.jobs)?;
    write_comparison(&table, &cfg.output_dir)?;
    let opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
    println!(
        "{:<10} {:>12} {:>12} {:>14} {:>14}",
        "attacker", "mean_cost", "std_cost", "fixed_bound", "u2_bound"
    );
    for row in &table.rows {
        println!(
            "{:<10} {:>12.6} {:>12.6} {:>14} {:>14}",
            row.attacker,
            row.mean_cost,
            row.std_cost,
            opt(row.fixed_bound),
            opt(row.u2_bound)
        );
    }
    println!("{}", table.note);
    Ok(())
}

/// MDP, target, eps and lambda from flags, falling back to a config.
struct AttackInputs {
    mdp: TabularMdp,
    cfg: AttackConfig,
    attacker: Option<AttackerSpec>,
    num_learners: Option<usize>,
}

fn attack_inputs(args: &AttackArgs) -> Result<AttackInputs> {
    let experiment = args.config.as_deref().map(ExperimentConfig::load).transpose()?;
    let mdp_path = args
        .mdp
        .clone()
        .or_else(|| experiment.as_ref().map(|c| c.mdp.clone()))
        .ok_or_else(|| missing("mdp"))?;
    let mdp = TabularMdp::load(&mdp_path)?;
    let attacker = experiment.as_ref().map(|c| c.attacker.clone());
    let eps = args.eps.or(match attacker {
        Some(AttackerSpec::Whitebox { eps, .. } | AttackerSpec::U2 { eps, .. } | AttackerSpec::Prior { eps, .. }) => {
            Some(eps)
        }
        _ => None,
    });
    let target = args
        .target
        .clone()
        .or_else(|| experiment.as_ref().map(|c| c.target.clone()))
        .ok_or_else(|| missing("target"))?;
    let target = Policy::new(target);
    target
        .validate(mdp.num_states, mdp.num_actions)
        .map_err(|err| Error::Config {
            field: "target".into(),
            message: err.to_string(),
        })?;
    let lambda = args
        .lambda
        .or(attacker.as_ref().map(AttackerSpec::lambda))
        .unwrap_or(1.0);
    let cfg = AttackConfig::new(target, eps.ok_or_else(|| missing("eps"))?, lambda)?;
    Ok(AttackInputs {
        mdp,
        cfg,
        attacker,
        num_learners: experiment.map(|c| c.num_learners),
    })
}

fn print_table(title: &str, table: &[Vec<f64>]) {
    println!("{title}");
    let width = table.first().map_or(0, Vec::len);
    print!("{:>7}", "state");
    for a in 0..width {
        print!(" {:>14}", format!("a{a}"));
    }
    println!();
    for (s, row) in table.iter().enumerate() {
        print!("{s:>7}");
        for x in row {
            print!(" {x:>14.8}");
        }
        println!();
    }
}

fn print_perturbation(title: &str, delta: &Perturbation) {
    print_table(title, &delta.delta);
    println!("sup norm {:.8}", delta.sup_norm());
}

fn delta_star_cmd(args: &DeltaStarArgs) -> Result<()> {
    let inputs = attack_inputs(&args.attack)?;
    let star = delta_star(&inputs.mdp, &inputs.cfg)?;
    print_perturbation("minimal white-box perturbation (row: state, column: action)", &star);
    if let Some(dir) = &args.attack.out {
        write_json(dir, "delta_star.json", &star)?;
    }
    Ok(())
}

fn prior_attack_cmd(args: &PriorArgs) -> Result<()> {
    let inputs = attack_inputs(&args.attack)?;
    let counts = load_counts(&args.counts)?;
    let (cfg_p, cfg_sigma) = match inputs.attacker {
        Some(AttackerSpec::U2 { p, sigma, .. } | AttackerSpec::Prior { p, sigma, .. }) => (Some(p), Some(sigma)),
        _ => (None, None),
    };
    let params = ConfidenceParams {
        sigma: args.sigma.or(cfg_sigma).unwrap_or(inputs.mdp.noise_sigma),
        num_learners: args.learners.or(inputs.num_learners).unwrap_or(1),
        failure_p: args.p.or(cfg_p).unwrap_or(0.1),
        gamma: inputs.mdp.gamma,
        initial_dist: inputs.mdp.initial_dist.clone(),
    };
    let subopt = args
        .subopt
        .zip(args.steps)
        .map(|(subopt, total_steps)| SubOptInput { total_steps, subopt });
    let report = attack_from_prior(&counts, Some(&inputs.mdp), &inputs.cfg, &params, subopt)?;
    print_perturbation(
        "perturbation from prior data (row: state, column: action)",
        &report.delta,
    );
    if let Some(star) = &report.delta_star {
        print_perturbation("minimal white-box perturbation", star);
    }
    if let Some(table) = &report.e_table {
        print_table("excess allowance", table);
    }
    println!("least visits {}", report.terms.n_min);
    println!(
        "action-value error {:.8}, occupancy error {:.8}",
        report.e_q, report.e_mu
    );
    if let Some(rate) = report.bound_rate {
        println!("cost rate {rate:.8}");
    }
    match (report.bound, report.vacuous) {
        (_, true) => println!("cost bound vacuous: some occupancy does not exceed its error"),
        (Some(bound), false) => println!("cost bound {bound:.8}"),
        (None, false) => println!("cost bound needs --subopt and --steps"),
    }
    if let Some(dir) = &args.attack.out {
        write_json(dir, "prior_attack.json", &report)?;
    }
    Ok(())
}

fn validate_cmd(args: &ValidateArgs) -> Result<()> {
    let mdp = match &args.config {
        Some(path) => {
            let mut cfg = ExperimentConfig::load(path)?;
            if let Some(mdp) = &args.mdp {
                cfg.mdp = mdp.clone();
            }
            let mdp = cfg.load_mdp()?;
            println!(
                "config ok: {} seeds, {} learners of {} steps",
                cfg.seeds.len(),
                cfg.num_learners,
                cfg.total_steps
            );
            mdp
        }
        None => TabularMdp::load(args.mdp.as_ref().expect("clap requires --mdp"))?,
    };
    println!(
        "mdp ok: {} states, {} actions, gamma {}, horizon {}",
        mdp.num_states, mdp.num_actions, mdp.gamma, mdp.horizon
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let usage = err.use_stderr();
            let _ = err.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
        Command::DeltaStar(args) => delta_star_cmd(args),
        Command::PriorAttack(args) => prior_attack_cmd(args),
        Command::Validate(args) => validate_cmd(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(if err.is_config_error() { 1 } else { 2 })
        }
    }
}
