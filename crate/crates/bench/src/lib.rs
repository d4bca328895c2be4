//! Fixtures shared by the benchmarks.

use cfmine_core::config::RunConfig;
use cfmine_core::embedding::{pairwise_similarity, EmbeddingMatrix, SimilarityMatrix};
use cfmine_core::model::EmbedderParams;
use cfmine_core::pipeline::{init_params, Datasets};

/// Benchmark-profile data scaled to `identities` real identities.
pub struct Fixture {
    pub config: RunConfig,
    pub datasets: Datasets,
    pub params: EmbedderParams,
    /// Real data embedded by `params`.
    pub embedded: EmbeddingMatrix,
    pub similarity: SimilarityMatrix,
}

impl Fixture {
    pub fn new(identities: usize) -> Self {
        let mut config = RunConfig::benchmark(0);
        config.generator.real.identities = identities;
        config.generator.virtual_data.identities = identities;
        let datasets = Datasets::generate(&config).expect("benchmark config is valid");
        let params = init_params(config.model_shape(), &config.train).expect("valid shape");
        let embedded = params
            .embed_matrix(&datasets.real.embeddings)
            .expect("finite data");
        let similarity = pairwise_similarity(&embedded).expect("normalized rows");
        Self {
            config,
            datasets,
            params,
            embedded,
            similarity,
        }
    }
}
