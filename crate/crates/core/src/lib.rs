//! Anchor discovery over token embeddings and subspace-aware attention
//! reweighting.
//!
//! The pipeline solves a sparse self-expression problem over visual-token
//! embeddings, clusters tokens spectrally into subspaces, scores each token
//! by how much its subspace shares it, and turns those scores into per-token
//! query/key/value factors applied inside attention.

pub mod anchor_score;
pub mod attention;
pub mod config;
pub mod error;
pub mod kmeans;
pub mod layout;
pub mod ssc_admm;
pub mod subspace_graph;
pub mod synth_bench;
pub mod tensor_io;

pub use anchor_score::{AnchorScores, MassReduction, ScalerConfig, ScalerTriple, ScoreConfig, Scorer};
pub use attention::{AttentionInput, AttentionOutput, Variant};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use layout::TokenLayout;
pub use ssc_admm::{AdmmConfig, AdmmRun, AdmmState, EmbeddingMatrix, SelfExpressionMatrix};
pub use subspace_graph::{AffinityMatrix, GraphConfig, SubspaceAssignment};
pub use synth_bench::{LabeledEmbeddings, PipelineOutput, SynthConfig};
pub use tensor_io::{DType, Tensor};
