//! Invariant representation learning for implicit-feedback recommendation.
//!
//! The library trains a two-branch matrix-factorization backbone (a
//! collaborative term plus a projected content term) while splitting every
//! item feature vector into an invariant part and a variant part through a
//! learned per-dimension mask. Training alternates between:
//!
//! * partitioning the interactions into latent environments by fitting one
//!   backbone per environment on the variant features and reassigning each
//!   interaction to the environment that scores it highest ([`envid`]),
//! * updating the mask by descending a two-objective compromise between the
//!   empirical risk across environments and a cross-environment gradient
//!   variance penalty, with the objective weights chosen by a closed-form
//!   min-norm solver ([`maskgen`], [`pareto`]).
//!
//! After the alternation converges a final backbone is trained on the
//! invariant features only ([`pipeline`]) and evaluated with top-K ranking
//! metrics ([`eval`]). Every random choice flows from one root seed, so runs
//! are reproducible end to end.

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod envid;
pub mod error;
pub mod eval;
pub mod maskgen;
pub mod numgrad;
pub mod pareto;
pub mod pipeline;

pub use backbone::{ItemGraph, LossWeights, ModelDims, ModelParams};
pub use config::ConfigFile;
pub use dataset::{FeatureTable, InteractionSet, SplitSpec, SyntheticSpec};
pub use envid::{EnvModels, EnvPartition};
pub use error::{Error, Result};
pub use eval::RankingResult;
pub use maskgen::{MaskSample, MaskState};
pub use numgrad::{GradReport, ParamLayout, ParamVector};
pub use pareto::{DescentCheck, ParetoWeights};
pub use pipeline::{RunArtifacts, RunConfig};
