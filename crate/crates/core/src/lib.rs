//! Continuous-time sequential recommendation over a temporal user-item graph.
//!
//! Interactions form a bipartite multigraph whose edges carry timestamps
//! ([`ctbg`]). A user or item is embedded *at a query time* by stacked
//! temporal collaborative attention layers ([`tct`]) that attend over
//! neighbors sampled strictly before that time, with timestamps mapped through
//! a learnable harmonic encoding ([`time_encoding`]). Scores are dot products
//! of temporal embeddings ([`model`]); parameters are fit with a pairwise
//! ranking loss ([`training`]) and judged by full-catalog ranking
//! ([`evaluation`]).

pub mod config;
pub mod ctbg;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod synthetic;
pub mod tape;
pub mod tct;
pub mod tensor;
pub mod time_encoding;
pub mod training;

pub use ctbg::{chronological_split, Ctbg, Interaction, Neighbor, NodeRef, SplitDataset};
pub use error::{Error, Result};
pub use evaluation::{evaluate, EvalConfig, EvalMode, MetricsReport};
pub use model::{rank, score, temporal_embedding, top_attention, Aggregator, ModelConfig, ModelParams};
pub use time_encoding::{TimeEncoder, TimeMode, TimeNormalizer};
pub use training::{fit, LossKind, TrainConfig};
