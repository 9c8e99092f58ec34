//! Group-aware multi-scale pedestrian trajectory forecasting.
//!
//! The crate is organised bottom-up:
//!
//! * [`dataio`] parses ETH/UCY-style text files into [`dataio::Scene`]s and cuts
//!   8-in / 12-out prediction [`dataio::Window`]s.
//! * [`grouping`] clusters trajectories into pedestrian groups (complete-linkage
//!   agglomerative clustering on Hausdorff distances) and scores groupings with
//!   the Sørensen–Dice coefficient.
//! * [`stgraph`] builds the individual, group and scene spatio-temporal graphs.
//! * [`tensor`] is a small float64 tensor engine with tape-based reverse-mode
//!   differentiation.
//! * [`nets`] holds the LSTM, GRU and STGCN blocks.
//! * [`model`] assembles the multi-scale encoder, the discrete-latent CVAE and
//!   its training objective.
//! * [`trainer`] runs Adam with exponential decay and global-norm clipping.
//! * [`eval`] computes ADE/FDE under the most-likely and best-of-K protocols and
//!   renders SVG plots.

pub mod artifact;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod grouping;
pub mod model;
pub mod nets;
pub mod stgraph;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// Sampling interval of every scene, in seconds.
pub const DT: f64 = 0.4;
/// Observed history length in ticks.
pub const HISTORY_LEN: usize = 8;
/// Predicted horizon length in ticks.
pub const FUTURE_LEN: usize = 12;

/// A 2-D position in meters.
pub type Point = [f64; 2];
/// Pedestrian identity as it appears in the source file.
pub type PedId = i64;
