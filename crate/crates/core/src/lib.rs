//! Federated training, differential privacy and early-warning inference for
//! risky-conversation detection.
//!
//! The pipeline: conversations are segmented and split ([`corpus`]), mapped to
//! feature vectors ([`embed`]), and used to train a logistic classifier
//! ([`model`]) with federated averaging over simulated clients ([`fed`]),
//! optionally under one of three privacy mechanisms ([`dp`]). Trained models
//! are run over conversations with a sliding window and a skepticism rule
//! ([`espd`]) and scored with latency-weighted metrics ([`metrics`]). The
//! [`attack`] module measures how much a metric-DP perturbation leaks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod corpus;
pub mod dp;
pub mod embed;
pub mod error;
pub mod espd;
pub mod experiment;
pub mod fed;
pub mod metrics;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
