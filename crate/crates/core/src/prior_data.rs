//! Attack from a fixed log of prior observations, with no exploration
//! learners.
//!
//! The perturbation is built from the data alone. Error terms and the cost
//! bound need the true MDP and are only reported when it is supplied.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::confidence::{build_confidence_set, ConfidenceParams, ConfidenceSet, ObservationCounts};
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::robust::delta_hat;
use crate::u2::{error_terms, ErrorTerms};
use crate::whitebox::{delta_star, AttackConfig, Perturbation};

/// Suboptimal-step budget used by the cost bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubOptInput {
    pub total_steps: usize,
    /// Bound on epsilon-suboptimal steps over `total_steps`.
    pub subopt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorDataReport {
    pub terms: ErrorTerms<f64>,
    /// Action-value error, with the true reward range when known.
    pub e_q: f64,
    pub e_mu: f64,
    /// Per-pair excess allowance; zero on target actions and infinite where
    /// the true occupancy does not exceed `e_mu`.
    pub e_table: Option<Vec<Vec<f64>>>,
    pub delta: Perturbation<f64>,
    pub delta_star: Option<Perturbation<f64>>,
    /// `||delta* + e||_inf + lambda`, the factor multiplying `subopt / T`.
    pub bound_rate: Option<f64>,
    pub bound: Option<f64>,
    pub vacuous: bool,
}

/// `2 e_q + eps / [mu - e_mu]_+ - eps / mu`
pub fn excess_allowance(e_q: f64, e_mu: f64, eps: f64, mu: f64) -> f64 {
    let shrunk = (mu - e_mu).max(0.0);
    if shrunk == 0.0 {
        return f64::INFINITY;
    }
    2.0 * e_q + eps / shrunk - eps / mu
}

pub fn attack_from_prior(
    counts: &ObservationCounts<f64>,
    truth: Option<&TabularMdp<f64>>,
    cfg: &AttackConfig<f64>,
    params: &ConfidenceParams<f64>,
    subopt: Option<SubOptInput>,
) -> Result<PriorDataReport> {
    let cs = build_confidence_set(counts, params)?;
    attack_from_confidence_set(&cs, truth, cfg, subopt)
}

pub fn attack_from_confidence_set(
    cs: &ConfidenceSet<f64>,
    truth: Option<&TabularMdp<f64>>,
    cfg: &AttackConfig<f64>,
    subopt: Option<SubOptInput>,
) -> Result<PriorDataReport> {
    let delta = delta_hat(cs, cfg)?;
    let terms = error_terms(cs, truth.map(TabularMdp::reward_range));
    let e_q = terms.e_q.unwrap_or(terms.e_q_hat);
    let e_mu = terms.e_mu;
    let mut report = PriorDataReport {
        e_q,
        e_mu,
        terms,
        e_table: None,
        delta,
        delta_star: None,
        bound_rate: None,
        bound: None,
        vacuous: false,
    };
    let Some(mdp) = truth else {
        return Ok(report);
    };
    if mdp.num_states != cs.num_states() || mdp.num_actions != cs.num_actions() {
        return Err(Error::InvalidInput("true MDP and observations differ in shape".into()));
    }
    let star = delta_star(mdp, cfg)?;
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let mut table = vec![vec![0.0; na]; ns];
    let mut worst = 0.0f64;
    for s in 0..ns {
        for a in (0..na).filter(|&a| a != cfg.target.action(s)) {
            let mu = mdp.occupancy(&cfg.target.neighbor(s, a))?.mu[s];
            table[s][a] = excess_allowance(e_q, e_mu, cfg.eps, mu);
            worst = worst.max(star.delta[s][a] + table[s][a]);
        }
    }
    let rate = worst + cfg.lambda;
    report.vacuous = !rate.is_finite();
    report.bound = subopt.map(|input| rate * input.subopt / input.total_steps as f64);
    report.bound_rate = Some(rate);
    report.e_table = Some(table);
    report.delta_star = Some(star);
    Ok(report)
}

/// Observation file: either a confidence-set snapshot or bare counts.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum CountsFile {
    Snapshot(Box<ConfidenceSet<f64>>),
    Counts(ObservationCounts<f64>),
}

pub fn load_counts(path: impl AsRef<Path>) -> Result<ObservationCounts<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let parsed: CountsFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.display().to_string(),
        source,
    })?;
    Ok(match parsed {
        CountsFile::Snapshot(cs) => cs.counts,
        CountsFile::Counts(counts) => counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::simulator::sample_step;
    use crate::whitebox::fixed_attack_cost_bound;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(sigma: f64) -> ConfidenceParams<f64> {
        ConfidenceParams {
            sigma,
            num_learners: 10,
            failure_p: 0.1,
            gamma: 0.5,
            initial_dist: vec![0.5, 0.5],
        }
    }

    fn cfg() -> AttackConfig<f64> {
        AttackConfig::new(fixtures::two_state_target(), 0.2, 1.0).unwrap()
    }

    fn sampled_counts(m: &TabularMdp<f64>, per_pair: usize, seed: u64) -> ObservationCounts<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = ObservationCounts::new(m.num_states, m.num_actions);
        for s in 0..m.num_states {
            for a in 0..m.num_actions {
                for _ in 0..per_pair {
                    let (r, next) = sample_step(m, s, a, &mut rng);
                    counts.update(s, a, r, next).unwrap();
                }
            }
        }
        counts
    }

    #[test]
    fn huge_noiseless_data_matches_whitebox() {
        let mut m = fixtures::two_state();
        m.noise_sigma = 0.0;
        let counts = ObservationCounts::from_model(&m, 100_000_000);
        let input = SubOptInput {
            total_steps: 1000,
            subopt: 40.0,
        };
        let report = attack_from_prior(&counts, Some(&m), &cfg(), &params(0.0), Some(input)).unwrap();
        assert!(report.e_q < 1e-3 && report.e_mu < 1e-3);
        let star = report.delta_star.clone().unwrap();
        for s in 0..2 {
            for a in 0..2 {
                assert!((report.delta.delta[s][a] - star.delta[s][a]).abs() < 1e-2);
            }
        }
        let whitebox = fixed_attack_cost_bound(&star, 1.0, 40, 1000);
        assert!((report.bound.unwrap() - whitebox).abs() < 0.01);
    }

    #[test]
    fn error_terms_halve_when_counts_quadruple() {
        let m = fixtures::two_state();
        let a = attack_from_prior(
            &ObservationCounts::from_model(&m, 100),
            Some(&m),
            &cfg(),
            &params(0.1),
            None,
        )
        .unwrap();
        let b = attack_from_prior(
            &ObservationCounts::from_model(&m, 400),
            Some(&m),
            &cfg(),
            &params(0.1),
            None,
        )
        .unwrap();
        assert_relative_eq!(b.e_q, a.e_q / 2.0, max_relative = 1e-12);
        assert_relative_eq!(b.e_mu, a.e_mu / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn allowance_covers_the_estimation_excess() {
        let m = fixtures::two_state();
        let mut checked = 0;
        for seed in 0..20 {
            let counts = sampled_counts(&m, 3000 + 100 * seed as usize, seed);
            let cs = build_confidence_set(&counts, &params(0.1)).unwrap();
            if !cs.contains(&m) {
                continue;
            }
            checked += 1;
            let report = attack_from_confidence_set(&cs, Some(&m), &cfg(), None).unwrap();
            let star = report.delta_star.as_ref().unwrap();
            let e = report.e_table.as_ref().unwrap();
            for s in 0..2 {
                for a in 0..2 {
                    assert!(report.delta.delta[s][a] <= star.delta[s][a] + e[s][a] + 1e-9);
                }
            }
        }
        assert!(checked >= 15);
    }

    #[test]
    fn scarce_data_is_vacuous() {
        let m = fixtures::two_state();
        let report = attack_from_prior(
            &ObservationCounts::from_model(&m, 2),
            Some(&m),
            &cfg(),
            &params(0.1),
            None,
        )
        .unwrap();
        assert!(report.vacuous);
        assert!(report.e_table.unwrap().iter().flatten().any(|x| x.is_infinite()));
    }

    #[test]
    fn data_only_mode_skips_analysis() {
        let m = fixtures::two_state();
        let report = attack_from_prior(
            &ObservationCounts::from_model(&m, 500),
            None,
            &cfg(),
            &params(0.1),
            None,
        )
        .unwrap();
        assert!(report.e_table.is_none() && report.bound.is_none());
        assert_eq!(report.e_q, report.terms.e_q_hat);
    }

    #[test]
    fn loads_both_file_shapes() {
        let m = fixtures::two_state();
        let counts = ObservationCounts::from_model(&m, 50);
        let cs = build_confidence_set(&counts, &params(0.1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let snap = dir.path().join("cs.json");
        let bare = dir.path().join("counts.json");
        std::fs::write(&snap, cs.to_json_string()).unwrap();
        std::fs::write(&bare, serde_json::to_string(&counts).unwrap()).unwrap();
        assert_eq!(load_counts(&snap).unwrap().n, counts.n);
        assert_eq!(load_counts(&bare).unwrap().n, counts.n);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let junk = dir.path().join("junk.json");
        std::fs::write(&junk, format!("{{\"x\": {}}}", rng.gen::<u8>())).unwrap();
        assert!(load_counts(&junk).unwrap_err().is_config_error());
    }
}
