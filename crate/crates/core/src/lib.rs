//! Distributed asynchronous multi-task learning (DAMTL) on two coupled
//! timescales: networked nodes estimate linear models from heterogeneous,
//! correlated data streams while one messenger node per group estimates the
//! cross-task precision matrix.
//!
//! The crate is organized around the moving parts of the scheme:
//!
//! * [`topology`] — group-partitioned networks, Laplacians, connectivity.
//! * [`datagen`] — synthetic data streams, ground-truth sampling, grid
//!   random fields, and tabular ingestion.
//! * [`objectives`] — losses, penalties, and their gradients for the inner
//!   (coefficient) and outer (precision) problems.
//! * [`precision`] — messenger-side covariance and safeguarded precision
//!   updates.
//! * [`engine`] — the virtual-clock event executor that drives everything.
//! * [`metrics`] — convergence measures and the run log.
//!
//! All randomness flows through seedable ChaCha streams; a run is a pure
//! function of its configuration and seed.

pub mod datagen;
pub mod engine;
pub mod kv;
pub mod metrics;
pub mod objectives;
pub mod precision;
pub mod rng;
pub mod topology;
