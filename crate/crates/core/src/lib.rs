//! Variational information pursuit.
//!
//! A querier network picks the next interpretable query from the answers seen
//! so far, and a classifier network maps the same masked history to a
//! posterior over labels. Both are trained jointly so that the querier
//! approximates greedy mutual-information query selection. The [`oracle`]
//! module carries out that greedy selection exactly on small discrete models,
//! which is what the learned strategy is checked against.
//!
//! Module map:
//!
//! | module | contents |
//! |--------|----------|
//! | [`query`] | query sets, answer encodings, histories, posteriors, trajectories |
//! | [`diffcore`] | reverse-mode tape, tensors, Adam/SGD, cosine schedule |
//! | [`networks`] | classifier and querier MLPs, straight-through selection, checkpoints |
//! | [`sampler`] | random and querier-biased history sampling |
//! | [`trainer`] | the two-phase training loop |
//! | [`pursuit`] | sequential inference with stopping rules |
//! | [`oracle`] | exact posteriors, conditional mutual information, greedy IP |
//! | [`data`] | synthetic generation, CSV ingestion, splits |
//! | [`metrics`] | accuracy curves, normalized AUC, oracle agreement |

pub mod data;
pub mod diffcore;
mod error;
pub mod metrics;
pub mod networks;
pub mod oracle;
pub mod pursuit;
pub mod query;
pub mod rng;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
