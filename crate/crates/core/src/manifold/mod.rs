//! Metric learning on the attention-gated embeddings: the margin objective,
//! pair construction, k-means clustering and the two training schedules
//! (plain, and divide-and-conquer with subspace learners).

pub mod kmeans;
pub mod loss;
pub mod train;

pub use kmeans::{cluster_embeddings, kmeans, split_dims, SubspacePartition, KMEANS_MAX_ITERS};
pub use loss::{
    all_pairs, batch_margin_loss, batch_margin_loss_with_grad, build_pairs,
    distance_weighted_pairs, margin_loss, MarginConfig, PairLabel, PairStrategy,
};
pub use train::{
    embed_all, train_dcml, train_ml, EpochRecord, FallbackEvent, ManifoldTrainConfig,
    PartitionSnapshot, Phase, TrainRun,
};
