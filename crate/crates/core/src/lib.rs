//! Utility-conditioned multi-objective alignment at desk scale.
//!
//! The pipeline: train a diverse ensemble of strictly increasing utilities
//! ([`ensemble`]), label multi-reward samples with the index of the utility
//! under which they rank best ([`labeler`]), train a token-conditioned policy
//! offline and then online with rejection sampling ([`policy_sim`]), select a
//! token from a user preference at inference ([`preference`]), and score the
//! result with Pareto and distributional metrics ([`metrics`]).

pub mod cli;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod labeler;
pub mod metrics;
pub mod monotone_net;
pub mod policy_sim;
pub mod preference;
pub mod reward_stats;

pub use error::{Error, Result};

/// A `K`-dimensional multi-objective return.
pub type RewardVector = Vec<f64>;
