//! Algorithm configuration with automatic discovery of configuration modes.
//!
//! A black-box optimizer (CMA-ES) tunes an algorithm's parameters over a dataset
//! of problem instances. While tuning, every (configuration, instance) cost is
//! recorded in a [`ResponseMatrix`](evaluation::ResponseMatrix), and the
//! instances are partitioned by how they respond to the evaluated configurations,
//! yielding one tuned configuration per partition.
//!
//! Four strategies are provided in [`strategies`]: a single-mode baseline, post hoc
//! partitioning, staged partitioning and online partitioning with per-instance
//! Thompson-sampling bandits.

pub mod error;
pub mod evaluation;
pub mod interface;
pub mod optimizer;
pub mod paramspace;
pub mod partition;
pub mod strategies;
pub mod synthbench;

pub use error::{Error, Result};
