//! Training anomaly generators: noise masks, latent replacement and smudges.

mod inject;
mod perlin;
mod sampler;
mod smudge;

pub use inject::{inject_anomalies, inject_with_masks, AnomalyInjection};
pub use perlin::{perlin_mask, perlin_mask_with, MaskSpec, PerlinField, PerlinMask};
pub use sampler::{
    neighbor_at_rank, rank_neighbors, sample_replacement_index, sample_uniform_replacement,
    RankingStrategy, SamplerCounts, Sampling, SimilarityBound,
};
pub use smudge::{apply_smudge, paste_image_anomaly, simulate_smudge, SmudgeParams};
