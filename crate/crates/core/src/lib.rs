// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inference-time causal probing of tiny autoregressive language models.

pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod interventions;
pub mod lookahead;
pub mod metrics;
pub mod model;
pub mod probes;
pub mod tasks;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
