//! Reward-poisoning attacks against no-regret learners in tabular MDPs.
//!
//! The crate covers exact planning ([`mdp`]), seeded simulation
//! ([`simulator`]), victim learners ([`learners`]), the closed-form white-box
//! attack ([`whitebox`]), confidence sets built from observations
//! ([`confidence`]), robust policy evaluation over those sets ([`robust`]),
//! the explore-then-attack strategy U2 ([`u2`]), attacks from a fixed
//! observation log ([`prior_data`]) and the experiment harness ([`harness`]).
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which the simulator and harness use.

pub mod confidence;
pub mod error;
pub mod fixtures;
pub mod harness;
pub mod learners;
pub mod mdp;
pub mod prior_data;
pub mod robust;
pub mod scalar;
pub mod simulator;
pub mod u2;
pub mod whitebox;

pub use error::{Error, Result};
pub use mdp::Policy;
pub use scalar::Scalar;

pub type TabularMdp = mdp::TabularMdp<f64>;
pub type TabularMdpF32 = mdp::TabularMdp<f32>;
pub type ValueFunctions = mdp::ValueFunctions<f64>;
pub type Perturbation = whitebox::Perturbation<f64>;
pub type AttackConfig = whitebox::AttackConfig<f64>;
pub type ObservationCounts = confidence::ObservationCounts<f64>;
pub type ConfidenceSet = confidence::ConfidenceSet<f64>;
pub type RobustValues = robust::RobustValues<f64>;
