//! Compound retrieval: learned selection and aggregation of relevance predictions.
//!
//! A compound retrieval system re-ranks a first-stage ranking using
//! predictions from several component models. Instead of the fixed top-K
//! structure of a cascade, the system learns two things jointly:
//!
//! - a **selection policy**: which pointwise and pairwise predictions to
//!   gather, addressed by first-stage rank and rank pair;
//! - a **score aggregation function**: a linear map from the gathered
//!   predictions to final document scores.
//!
//! Both are trained against a linear interpolation of a ranking loss and the
//! expected number of LLM calls, which traces an effectiveness-efficiency
//! trade-off curve as the interpolation weight varies.
//!
//! # Modules
//!
//! | module | contents |
//! |--------|----------|
//! | [`system`] | query/selection/parameter types, channel derivation, compound scoring |
//! | [`losses`] | DCG utilities, soft ranks, cutoff approximation, distillation loss, cost |
//! | [`nn`] | sigmoid MLPs with manual backprop, Adamax, straight-through factors |
//! | [`policy`] | policy networks, materialized tables, sampling, determinization |
//! | [`baselines`] | first-stage, pointwise cascade and PRP re-rankers plus their embeddings |
//! | [`data`] | JSON-Lines datasets, synthetic queries, seeded splits, PRP teachers |
//! | [`train`] | full-batch training of one compound system |
//! | [`sweep`] | trade-off sweeps, Pareto filtering, curves, TSV and manifests |
//! | [`cli`] | the `compound` command-line tool |
//!
//! Runnable walkthroughs live in `examples/`; start with
//! `cargo run --release --example quickstart`.

pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod policy;
pub mod sweep;
pub mod system;
pub mod train;

pub use error::{Error, Result};
pub use system::{
    compound_ranking, derive_channels, rank_by_scores, score_documents, score_documents_matrix,
    AggregationParams, PredictionChannels, QueryInstance, SelectionSample,
};
