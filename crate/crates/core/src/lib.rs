//! Multi-interest candidate retrieval over user–item engagement graphs.

pub mod ann;
pub mod cluster;
pub mod codec;
pub mod embed;
pub mod error;
pub mod eval;
pub mod graph;
pub mod mixture;
pub mod pipeline;
pub mod retrieve;
pub mod synth;
pub mod vecmath;

pub use ann::{Backend, GraphParams, Hit, Metric, VectorIndex};
pub use cluster::{adjusted_rand_index, spherical_kmeans, ClusterModel};
pub use embed::{score, train, EmbeddingTable, TrainConfig};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalConfig, EvalReport};
pub use graph::{split_holdout, EngagementGraph, HoldoutSplit, Vocab};
pub use mixture::{build_mixtures, ClusterDist, MixtureConfig, MixtureTable, UserMixture};
pub use retrieve::{retrieve_mixture, retrieve_unimodal, Candidate, CandidateSet, ItemIndexes, Source};
pub use synth::{SynthConfig, SynthGraph};
pub use vecmath::Matrix;
