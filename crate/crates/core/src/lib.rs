//! Simulator and analysis toolkit for quantized multi-layer hierarchical
//! federated learning.
//!
//! - [`topology`]: aggregation trees of arbitrary depth.
//! - [`task`]: loss and gradient oracles, datasets, non-IID partitioning.
//! - [`quantizer`]: unbiased stochastic quantizers and variance measurement.
//! - [`engine`]: the nested training loop.
//! - [`theory`]: convergence condition and rate bound.
//! - [`latency`]: per-round latency under synchronous transmission.
//! - [`optimizer`]: intra-layer count selection under a deadline.
//! - [`config`] and [`experiment`]: configuration files and artifacts.

// `!(x > 0.0)` is used on purpose so that NaN fails positivity checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod engine;
pub mod exact;
pub mod experiment;
pub mod gp;
pub mod latency;
pub mod optimizer;
pub mod quantizer;
pub mod rng;
pub mod task;
pub mod theory;
pub mod topology;
