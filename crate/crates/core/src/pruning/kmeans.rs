//! Seeded Lloyd's clustering with k-means++ initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::tensor::Tensor;

const MAX_ITERS: usize = 300;
const SHIFT_TOL: f64 = 1e-6;

/// Fitted clustering model: `K` centroids in embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    /// `[K, E]`.
    pub centroids: Tensor,
    pub fit_seed: u64,
}

impl KMeansModel {
    pub fn embedding_dim(&self) -> usize {
        self.centroids.shape()[1]
    }
}

fn dist_sq(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Lloyd's iterations until the max centroid shift drops below 1e-6 or 300
/// iterations pass. Deterministic per seed; empty clusters are re-seeded to
/// the point farthest from its assigned centroid.
pub fn kmeans_fit(embeddings: &Tensor, k: usize, seed: u64) -> Result<KMeansModel> {
    let n = embeddings.rows();
    let dim = embeddings.row_len();
    if k == 0 {
        return Err(Error::InvalidConfig("cluster count must be >= 1".into()));
    }
    if n < k {
        return Err(Error::InsufficientPoints {
            points: n,
            clusters: k,
        });
    }
    embeddings.ensure_finite("kmeans_fit input")?;

    let mut rng = stream(seed, Purpose::KMeansInit, &[]);
    let mut centroids: Vec<f32> = Vec::with_capacity(k * dim);

    // k-means++: first center uniform, the rest D^2-weighted.
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(embeddings.row(first));
    let mut best_d2: Vec<f64> = (0..n)
        .map(|i| dist_sq(embeddings.row(i), &centroids[..dim]))
        .collect();
    let mut chosen = vec![false; n];
    chosen[first] = true;
    for c in 1..k {
        let total: f64 = best_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in best_d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            // All remaining mass is on already-chosen duplicates; take the
            // lowest unchosen index.
            (0..n).find(|&i| !chosen[i]).unwrap()
        };
        chosen[pick] = true;
        let row = embeddings.row(pick);
        centroids.extend_from_slice(row);
        let base = c * dim;
        for i in 0..n {
            let d = dist_sq(embeddings.row(i), &centroids[base..base + dim]);
            if d < best_d2[i] {
                best_d2[i] = d;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..MAX_ITERS {
        // Assign: nearest centroid, ties to the lowest cluster id.
        for (i, slot) in assignment.iter_mut().enumerate() {
            let row = embeddings.row(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = dist_sq(row, &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            *slot = best;
        }

        // Update in f64.
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(embeddings.row(i)) {
                *s += v as f64;
            }
        }

        // Re-seed empty clusters to the farthest point.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = dist_sq(
                        embeddings.row(a),
                        &centroids[assignment[a] * dim..(assignment[a] + 1) * dim],
                    );
                    let db = dist_sq(
                        embeddings.row(b),
                        &centroids[assignment[b] * dim..(assignment[b] + 1) * dim],
                    );
                    da.partial_cmp(&db).unwrap().then(b.cmp(&a))
                })
                .unwrap();
            let prev = assignment[far];
            counts[prev] -= 1;
            for (s, &v) in sums[prev * dim..(prev + 1) * dim]
                .iter_mut()
                .zip(embeddings.row(far))
            {
                *s -= v as f64;
            }
            assignment[far] = c;
            counts[c] = 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(embeddings.row(far)) {
                *s += v as f64;
            }
        }

        let mut shift: f64 = 0.0;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let mut delta = 0.0f64;
            for j in 0..dim {
                let new = (sums[c * dim + j] * inv) as f32;
                let d = new as f64 - centroids[c * dim + j] as f64;
                delta += d * d;
                centroids[c * dim + j] = new;
            }
            shift = shift.max(delta.sqrt());
        }
        if shift < SHIFT_TOL {
            break;
        }
    }

    Ok(KMeansModel {
        k,
        centroids: Tensor::new(vec![k, dim], centroids)?,
        fit_seed: seed,
    })
}

/// Euclidean distance from `z` to the nearest centroid.
pub fn nearest_centroid_distance(model: &KMeansModel, z: &[f32]) -> f32 {
    let dim = model.embedding_dim();
    assert_eq!(z.len(), dim, "embedding width mismatch");
    let mut best = f64::INFINITY;
    for c in 0..model.k {
        let d = dist_sq(z, &model.centroids.row(c));
        if d < best {
            best = d;
        }
    }
    best.sqrt() as f32
}
