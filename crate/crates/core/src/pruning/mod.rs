//! Dynamic distillation-set pruning driven by the current global model:
//! KMeans-based class balancing followed by confidence ("entropy") pruning.

mod kmeans;
mod select;

pub use kmeans::{kmeans_fit, nearest_centroid_distance, KMeansModel};
pub use select::{
    confidence_from_logits, confidence_score, entropy_prune, kmeans_balance, prune_pipeline, select_balanced,
    ConfidenceMode, EntropyHeuristic, EntropyPruneConfig, Heuristic, KMeansBalanceConfig,
    PruneReport, Pruner, StageStats,
};

use crate::error::Result;
use crate::nn::ModelState;
use crate::tensor::Tensor;

/// Embeddings and logits of a patch batch under the current global model.
/// The logits are computed by running the tail layers on the embeddings, so
/// they are bit-identical to a full forward pass.
pub fn score_patches(model: &ModelState, patches: &Tensor) -> Result<(Tensor, Tensor)> {
    let embeddings = model.embed(patches)?;
    let logits = model.forward_from_layer(model.arch().embedding_layer + 1, &embeddings)?;
    Ok((embeddings, logits))
}

/// Argmax class per row; ties resolve to the lowest class index.
pub fn pseudo_labels(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
