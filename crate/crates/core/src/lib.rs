// SPDX-License-Identifier: MIT OR Apache-2.0

//! Path patching over computation graphs.
//!
//! A model is a [`graph::Graph`]: a DAG of named tensor operations. A
//! hypothesis names the input-to-output paths that matter for a behavior;
//! [`intervene`] evaluates the graph with the reference input flowing along
//! those paths and one shared counterfactual input along every other path,
//! and [`metrics`] turns many such evaluations into effect sizes.

#![forbid(unsafe_code)]

pub mod config;
pub mod datasets;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod intervene;
pub mod metrics;
pub mod models;
pub mod paths;
pub mod report;
pub mod rewrites;
pub mod runner;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};

/// Crate version, also reported by the bindings.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub use tensor::Tensor;
