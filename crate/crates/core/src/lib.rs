//! Clipped gradient tracking over directed graphs.
//!
//! Agents hold private objectives `f_i` and cooperate to minimize their
//! average over a directed network. Each agent mixes its iterate with the
//! row-stochastic matrix `R`, mixes a gradient-tracking variable with the
//! column-stochastic matrix `C`, and steps along its tracking variable
//! clipped to norm `c0`.
//!
//! Modules:
//! - [`graph`]: mixing matrices, Perron vectors, deflated spectral radii.
//! - [`objective`]: local objectives and `(L0, L1)`-smoothness tools.
//! - [`data`]: LIBSVM parsing and partitioning.
//! - [`algo`]: the clipped tracking engine and its baselines.
//! - [`metrics`]: averaged iterates, consensus/tracking errors, trajectory CSV.
//! - [`experiment`]: configuration files and the runner behind the CLI.

pub mod algo;
pub mod data;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod objective;
pub mod rng;

pub use algo::{AlgoConfig, Algorithm, Batch, ClipThreshold, NetworkState, RunResult, StopReason};
pub use graph::{build_mixing_pair, GraphSpec, MixingPair};
pub use objective::LocalObjective;
