//! Unsupervised positive-pair mining and metric refinement.
//!
//! The crate is organized the way the pipeline runs:
//!
//! - [`embedding`]: feature storage, normalization and the exponential
//!   pairwise similarity `S[p][q] = exp(-||v_p - v_q||)`.
//! - [`mining`]: k-nearest and k-reciprocal neighbors, collaborator sets,
//!   collaborative-filtering similarity and positive-pair selection.
//! - [`synthetic`]: a parametric generator of identities, poses and camera
//!   styles used in place of image data.
//! - [`model`]: a small trainable embedder with a classifier head, the
//!   cross-entropy, triplet and combined losses, and plain SGD.
//! - [`pipeline`]: pretraining, per-epoch mining and fine-tuning, and the
//!   experiment harness.
//! - [`eval`]: CMC and mAP under a cross-camera protocol, plus mining
//!   diagnostics.
//! - [`io`] and [`config`]: on-disk formats and the run configuration.

pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod io;
pub mod mining;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synthetic;

pub use config::{Ablation, EvalConfig, GeneratorBlock, ModelConfig, RunConfig, TrainConfig};
pub use embedding::{
    l2_normalize, pairwise_similarity, EmbeddingMatrix, FeatureVector, ItemMeta, SimilarityMatrix,
};
pub use error::{Error, Result};
pub use eval::{cmc, mean_ap, mining_accuracy, rank_gallery, MetricsReport, RankedList};
pub use mining::{
    cf_similarity, collaborators, mine_all, mine_all_with, mine_positive_pair, reciprocal_set,
    top_k_neighbors, CollaboratorSet, MinedPair, MiningOutcome, NeighborIndex, PairSelection,
    ReciprocalSet,
};
pub use model::{EmbedderParams, ModelShape, NegativePool};
pub use synthetic::{camera_transform, generate, GeneratorConfig, Role, SyntheticDataset};
