//! Deterministic simulator of elastic pipeline training with progressive
//! layer freezing.
//!
//! The control plane decides, epoch by epoch, how many bottom layers to
//! freeze ([`freeze`]), how to repack the remaining layers into shorter
//! pipelines ([`autopipe`]), how many data-parallel replicas the freed GPUs
//! can host ([`autodp`]) and whether frozen activations should be read from a
//! cache instead of recomputed ([`autocache`]). The [`engine`] turns each
//! epoch's decisions into a timed GPipe schedule and aggregates a run report.

pub mod autocache;
pub mod autodp;
pub mod autopipe;
pub mod config;
pub mod engine;
pub mod error;
pub mod exec;
pub mod freeze;
pub mod model;
pub mod report;
pub mod sweep;

mod rng;

pub use error::{Error, Result};
pub use exec::Execution;
