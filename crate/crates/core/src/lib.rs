//! Query-driven prediction of aggregate range-query answers.
//!
//! An analyst device learns the query space from past (query, answer)
//! pairs, answers new queries with per-cluster local models, detects when
//! incoming queries drift away from the learned space, and adapts by
//! forwarding a bounded number of queries to the data system.

// validation negates comparisons on purpose so that NaN is rejected
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adm;
pub mod cdm;
pub mod cli;
pub mod datamodel;
pub mod engine;
pub mod error;
pub mod quantizer;
pub mod regressors;
pub mod simulator;
pub mod stats;
pub mod workloads;

pub use error::{Error, Result};
