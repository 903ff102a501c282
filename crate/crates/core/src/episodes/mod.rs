//! Embedding storage (the PFE1 file format) and the seeded episode sampler.

mod dataset;
mod sampler;

pub use dataset::{
    fnv1a, inspect_pfe1, load_pfe1, save_pfe1, ClassEmbeddings, EmbeddingDataset, Pfe1Summary,
    PFE1_MAGIC, PFE1_VERSION,
};
pub use sampler::{
    eligible_classes, episode_stream, partial_fisher_yates, sample_episode, Episode,
    EpisodeStream, SplitMix64,
};
