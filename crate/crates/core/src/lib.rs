//! Channel-wise generalization estimates for convolutional networks via
//! leave-one-out NNK label interpolation, and a progressive early-stopping
//! controller that freezes channels as they stop generalizing.
//!
//! The pipeline per evaluation step:
//!
//! 1. a [`FeatureSnapshot`] of penultimate-layer activations, split by
//!    channel;
//! 2. per channel, an NNK neighborhood for every node built on all other
//!    nodes ([`nnk_graph`]);
//! 3. label interpolation over each neighborhood and the resulting LOO
//!    error ([`interpolation`]);
//! 4. a patience update per channel ([`stopping`]).

pub mod diagnostics;
pub mod error;
pub mod interpolation;
pub mod kernels;
pub mod nnk_graph;
pub mod nnls;
pub mod report;
pub mod serve;
pub mod snapshot;
pub mod stopping;

pub use diagnostics::{importance_metrics, rank_channels, ChannelRanking, ImportanceMetrics};
pub use error::{NnkError, Result};
pub use interpolation::{
    classify, empirical_risk, loo_risk_all_channels, loo_risk_channel, loo_risk_full_layer, loo_risk_full_layer_with,
    nnk_interpolate, ChannelLooReport, EvalOptions, LabelSet, FULL_LAYER,
};
pub use kernels::{kernel_matrix, kernel_value, KernelKind, KernelSpec, SigmaPolicy};
pub use nnk_graph::{build_channel_graph, knn_candidates, nnk_solve, NnkConfig, NnkNeighborhood};
pub use report::{HistoryEntry, RunHistory};
pub use serve::{serve_loop, ServeConfig};
pub use snapshot::{read_snapshot, write_snapshot, FeatureSnapshot, SnapshotError};
pub use stopping::{controller_new, should_evaluate, BestPolicy, ControllerConfig, Decision, StoppingState};
