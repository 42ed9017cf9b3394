//! Selection logic: per-class quota filling over cluster distances, then
//! confidence-ranked removal.
//!
//! All orderings are total: equal distances or scores break by ascending
//! patch index, so selections are deterministic across processes.

use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans_fit, nearest_centroid_distance, KMeansModel};
use super::{pseudo_labels, score_patches};
use crate::error::{Error, Result};
use crate::nn::{softmax_into, ModelState};
use crate::patchgen::PatchDataset;
use crate::rng::{stream, Purpose};

/// Per-class selection heuristic over nearest-centroid distances.
/// Easy favours small distances, Hard large ones, Mixed takes half of the
/// quota from each end (Easy half first, rounded up).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    Easy,
    Hard,
    Mixed,
}

/// Removal heuristic for the confidence stage. Top removes the most
/// confident examples, Bottom the least confident, Random a seeded sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyHeuristic {
    Top,
    Bottom,
    Random,
}

/// What the per-patch confidence score is: max softmax probability (the
/// default) or the raw maximum logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    MaxSoftmax,
    MaxLogit,
}

impl Default for ConfidenceMode {
    fn default() -> Self {
        ConfidenceMode::MaxSoftmax
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansBalanceConfig {
    /// Cluster count K.
    pub clusters: usize,
    /// Size of the balanced dataset s; `None` keeps the pool size, making the
    /// stage a pass-through in size while later stages prune.
    pub target_size: Option<usize>,
    /// Balancing factor F in [0, 1]; the per-class lower bound is
    /// `floor((s / C) * F)`.
    pub balancing_factor: f64,
    pub heuristic: Heuristic,
    pub seed: u64,
    /// Refit the clustering each round; `false` reuses the first fit.
    pub refit_each_round: bool,
}

impl Default for KMeansBalanceConfig {
    fn default() -> Self {
        Self {
            clusters: 1000,
            target_size: None,
            balancing_factor: 1.0,
            heuristic: Heuristic::Hard,
            seed: 0,
            refit_each_round: true,
        }
    }
}

impl KMeansBalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 {
            return Err(Error::InvalidConfig("kmeans clusters must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.balancing_factor) {
            return Err(Error::InvalidConfig(
                "balancing_factor must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntropyPruneConfig {
    /// Percentage of examples to remove, in [0, 100).
    pub removal_percent: f64,
    pub heuristic: EntropyHeuristic,
    /// Seed for the Random heuristic.
    pub seed: u64,
    pub confidence: ConfidenceMode,
}

impl Default for EntropyPruneConfig {
    fn default() -> Self {
        Self {
            removal_percent: 90.0,
            heuristic: EntropyHeuristic::Top,
            seed: 0,
            confidence: ConfidenceMode::MaxSoftmax,
        }
    }
}

impl EntropyPruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..100.0).contains(&self.removal_percent) {
            return Err(Error::InvalidConfig(
                "removal_percent must be in [0, 100)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub input_size: usize,
    pub output_size: usize,
}

/// Selection record for one round: which indices survived and why-shaped
/// counters for the logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    /// Unique, ascending indices into the patch dataset.
    pub selected: Vec<usize>,
    /// `(pseudo-class, count)` over the selected set, ascending by class.
    pub per_class_counts: Vec<(usize, usize)>,
    pub stages: Vec<StageStats>,
    /// Pseudo-label counts over the whole pool, indexed by class.
    pub pseudo_label_histogram: Vec<usize>,
}

impl PruneReport {
    fn empty() -> Self {
        Self {
            selected: Vec::new(),
            per_class_counts: Vec::new(),
            stages: Vec::new(),
            pseudo_label_histogram: Vec::new(),
        }
    }

    /// Newline-delimited index list: the simulated wire payload.
    pub fn indices_wire_format(&self) -> String {
        let mut s = String::new();
        for i in &self.selected {
            s.push_str(&i.to_string());
            s.push('\n');
        }
        s
    }
}

/// Orders `candidates` (positions into `distances`) by the heuristic;
/// `Mixed` is resolved by callers via the two base orderings.
fn order_by(candidates: &mut [usize], distances: &[f32], easy: bool) {
    candidates.sort_by(|&a, &b| {
        let cmp = distances[a].total_cmp(&distances[b]);
        let cmp = if easy { cmp } else { cmp.reverse() };
        cmp.then(a.cmp(&b))
    });
}

fn take_by_heuristic(
    mut candidates: Vec<usize>,
    distances: &[f32],
    quota: usize,
    heuristic: Heuristic,
) -> Vec<usize> {
    let quota = quota.min(candidates.len());
    match heuristic {
        Heuristic::Easy => {
            order_by(&mut candidates, distances, true);
            candidates.truncate(quota);
            candidates
        }
        Heuristic::Hard => {
            order_by(&mut candidates, distances, false);
            candidates.truncate(quota);
            candidates
        }
        Heuristic::Mixed => {
            let easy_quota = quota.div_ceil(2);
            order_by(&mut candidates, distances, true);
            let mut picked: Vec<usize> = candidates[..easy_quota].to_vec();
            let mut rest: Vec<usize> = candidates[easy_quota..].to_vec();
            order_by(&mut rest, distances, false);
            picked.extend_from_slice(&rest[..quota - easy_quota]);
            picked
        }
    }
}

/// Per-class quota selection followed by a global fill, exactly `target`
/// unique positions returned in ascending order.
///
/// Stage one walks pseudo-classes in ascending id and takes
/// `min(floor((target/C) * factor), class size)` members by the heuristic;
/// stage two fills the remainder from the leftover pool with the same
/// heuristic. Classes short of the lower bound spill their deficit into the
/// fill stage.
pub fn select_balanced(
    labels: &[usize],
    distances: &[f32],
    target: usize,
    balancing_factor: f64,
    heuristic: Heuristic,
) -> Result<Vec<usize>> {
    let n = labels.len();
    if distances.len() != n {
        return Err(Error::MisalignedTargets(format!(
            "{} labels vs {} distances",
            n,
            distances.len()
        )));
    }
    if target > n {
        return Err(Error::TargetTooLarge { target, pool: n });
    }

    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let class_count = classes.len().max(1);
    let lower_bound = ((target as f64 / class_count as f64) * balancing_factor).floor() as usize;

    let mut taken = vec![false; n];
    let mut selected: Vec<usize> = Vec::with_capacity(target);
    if lower_bound > 0 {
        for &class in &classes {
            let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
            let picked = take_by_heuristic(members, distances, lower_bound, heuristic);
            for i in picked {
                taken[i] = true;
                selected.push(i);
            }
        }
    }

    let remaining = target - selected.len();
    if remaining > 0 {
        let pool: Vec<usize> = (0..n).filter(|&i| !taken[i]).collect();
        for i in take_by_heuristic(pool, distances, remaining, heuristic) {
            selected.push(i);
        }
    }

    selected.sort_unstable();
    debug_assert_eq!(selected.len(), target);
    Ok(selected)
}

/// Max-softmax (or max-logit) confidence per patch, in `(0, 1]` for the
/// softmax mode.
pub fn confidence_score(
    model: &ModelState,
    patches: &crate::tensor::Tensor,
    mode: ConfidenceMode,
) -> Result<Vec<f32>> {
    let logits = model.forward(patches)?;
    Ok(confidence_from_logits(&logits, mode))
}

/// Confidence scores straight from a precomputed logit matrix.
pub fn confidence_from_logits(
    logits: &crate::tensor::Tensor,
    mode: ConfidenceMode,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(logits.rows());
    let mut probs = vec![0.0f32; logits.row_len()];
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let score = match mode {
            ConfidenceMode::MaxSoftmax => {
                softmax_into(row, &mut probs);
                probs.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
            }
            ConfidenceMode::MaxLogit => row.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
        };
        out.push(score);
    }
    out
}

/// Removes `floor(removal_percent% * len)` items and keeps the rest in their
/// input order. Top removes the highest scores (ties: lower index removed
/// first), Bottom the lowest, Random a seeded uniform sample.
pub fn entropy_prune(
    indices: &[usize],
    scores: &[f32],
    cfg: &EntropyPruneConfig,
) -> Result<(Vec<usize>, PruneReport)> {
    cfg.validate()?;
    if indices.len() != scores.len() {
        return Err(Error::MisalignedTargets(format!(
            "{} indices vs {} scores",
            indices.len(),
            scores.len()
        )));
    }
    let n = indices.len();
    let remove = ((cfg.removal_percent / 100.0) * n as f64).floor() as usize;

    let mut removed = vec![false; n];
    match cfg.heuristic {
        EntropyHeuristic::Top | EntropyHeuristic::Bottom => {
            let mut order: Vec<usize> = (0..n).collect();
            let top = cfg.heuristic == EntropyHeuristic::Top;
            order.sort_by(|&a, &b| {
                let cmp = scores[a].total_cmp(&scores[b]);
                let cmp = if top { cmp.reverse() } else { cmp };
                cmp.then(a.cmp(&b))
            });
            for &pos in order.iter().take(remove) {
                removed[pos] = true;
            }
        }
        EntropyHeuristic::Random => {
            let mut rng = stream(cfg.seed, Purpose::EntropyRandom, &[n as u64]);
            for pos in rand::seq::index::sample(&mut rng, n, remove) {
                removed[pos] = true;
            }
        }
    }

    let kept: Vec<usize> = (0..n).filter(|&p| !removed[p]).map(|p| indices[p]).collect();
    let report = PruneReport {
        selected: kept.clone(),
        per_class_counts: Vec::new(),
        stages: vec![StageStats {
            stage: "entropy".into(),
            input_size: n,
            output_size: kept.len(),
        }],
        pseudo_label_histogram: Vec::new(),
    };
    Ok((kept, report))
}

/// The KMeans balancing stage against a concrete model and patch pool.
/// Embeds the pool, pseudo-labels it, fits (or reuses) the clustering, and
/// selects by per-class quota. Returns ascending unique indices.
pub fn kmeans_balance(
    ds: &PatchDataset,
    global: &ModelState,
    cfg: &KMeansBalanceConfig,
) -> Result<(Vec<usize>, PruneReport)> {
    let mut pruner = Pruner::new(Some(cfg.clone()), None, ds.len());
    pruner.select(&ds.patches, global)
}

/// Both stages composed: KMeans balancing then entropy pruning. With both
/// stages disabled this is the "no selection" baseline: the first
/// `fallback_target` indices.
pub fn prune_pipeline(
    ds: &PatchDataset,
    global: &ModelState,
    kmeans_cfg: Option<&KMeansBalanceConfig>,
    entropy_cfg: Option<&EntropyPruneConfig>,
    fallback_target: usize,
) -> Result<(Vec<usize>, PruneReport)> {
    let mut pruner = Pruner::new(kmeans_cfg.cloned(), entropy_cfg.cloned(), fallback_target);
    pruner.select(&ds.patches, global)
}

/// Stateful pipeline wrapper; holds the fitted clustering when
/// `refit_each_round` is off.
#[derive(Debug, Clone)]
pub struct Pruner {
    pub kmeans: Option<KMeansBalanceConfig>,
    pub entropy: Option<EntropyPruneConfig>,
    /// Selection size when both stages are disabled.
    pub fallback_target: usize,
    cached_model: Option<KMeansModel>,
}

impl Pruner {
    pub fn new(
        kmeans: Option<KMeansBalanceConfig>,
        entropy: Option<EntropyPruneConfig>,
        fallback_target: usize,
    ) -> Self {
        Self {
            kmeans,
            entropy,
            fallback_target,
            cached_model: None,
        }
    }

    /// Final selection size for a pool of `pool` patches.
    pub fn output_size(&self, pool: usize) -> usize {
        let after_kmeans = match &self.kmeans {
            Some(k) => k.target_size.unwrap_or(pool).min(pool),
            None => pool,
        };
        match &self.entropy {
            Some(e) => {
                let remove = ((e.removal_percent / 100.0) * after_kmeans as f64).floor() as usize;
                after_kmeans - remove
            }
            None => {
                if self.kmeans.is_some() {
                    after_kmeans
                } else {
                    self.fallback_target.min(pool)
                }
            }
        }
    }

    /// Runs the configured stages over a `[P, C, H, W]` pool tensor
    /// (single-image patches or a labelled sample subset; labels never enter).
    pub fn select(
        &mut self,
        patches: &crate::tensor::Tensor,
        global: &ModelState,
    ) -> Result<(Vec<usize>, PruneReport)> {
        let pool = patches.rows();
        if pool == 0 {
            return Err(Error::EmptyData("pruning: empty patch pool".into()));
        }
        if let Some(k) = &self.kmeans {
            k.validate()?;
        }
        if let Some(e) = &self.entropy {
            e.validate()?;
        }

        let mut report = PruneReport::empty();

        // Both stages disabled: the "no selection" baseline.
        if self.kmeans.is_none() && self.entropy.is_none() {
            if self.fallback_target > pool {
                return Err(Error::TargetTooLarge {
                    target: self.fallback_target,
                    pool,
                });
            }
            let selected: Vec<usize> = (0..self.fallback_target).collect();
            report.stages.push(StageStats {
                stage: "none".into(),
                input_size: pool,
                output_size: selected.len(),
            });
            report.selected = selected.clone();
            return Ok((selected, report));
        }

        // Scores shared by both stages: one forward pass over the pool.
        let (embeddings, logits) = score_patches(global, patches)?;
        let labels = pseudo_labels(&logits);
        let mut histogram = vec![0usize; global.arch().num_classes];
        for &l in &labels {
            histogram[l] += 1;
        }
        report.pseudo_label_histogram = histogram;

        let mut current: Vec<usize> = (0..pool).collect();

        if let Some(kcfg) = self.kmeans.clone() {
            let target = kcfg.target_size.unwrap_or(pool);
            if target > pool {
                return Err(Error::TargetTooLarge { target, pool });
            }
            if target == pool {
                // Size pass-through; balancing cannot change a full selection.
                report.stages.push(StageStats {
                    stage: "kmeans(pass-through)".into(),
                    input_size: pool,
                    output_size: pool,
                });
            } else {
                if kcfg.refit_each_round || self.cached_model.is_none() {
                    self.cached_model = Some(kmeans_fit(&embeddings, kcfg.clusters, kcfg.seed)?);
                }
                let model = self.cached_model.as_ref().unwrap();
                let distances: Vec<f32> = (0..pool)
                    .map(|i| nearest_centroid_distance(model, embeddings.row(i)))
                    .collect();
                current = select_balanced(
                    &labels,
                    &distances,
                    target,
                    kcfg.balancing_factor,
                    kcfg.heuristic,
                )?;
                report.stages.push(StageStats {
                    stage: "kmeans".into(),
                    input_size: pool,
                    output_size: current.len(),
                });
            }
        }

        if let Some(ecfg) = &self.entropy {
            let scores: Vec<f32> = {
                let all = confidence_from_logits(&logits, ecfg.confidence);
                current.iter().map(|&i| all[i]).collect()
            };
            let (kept, stage_report) = entropy_prune(&current, &scores, ecfg)?;
            report.stages.extend(stage_report.stages);
            current = kept;
        }

        let mut counts = std::collections::BTreeMap::new();
        for &i in &current {
            *counts.entry(labels[i]).or_insert(0usize) += 1;
        }
        report.per_class_counts = counts.into_iter().collect();
        report.selected = current.clone();
        Ok((current, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchitectureSpec, LayerSpec, ModelState};
    use crate::patchgen::{generate_patches, AugmentationConfig, SourceImage};
    use crate::tensor::Tensor;

    #[test]
    fn balancing_example_two_per_class_hard() {
        // 12 patches, 3 pseudo-classes of 4 members, s = 6, F = 1 -> LB = 2;
        // Hard picks each class's two largest distances.
        let labels = vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2];
        let distances = vec![
            0.1, 0.9, 0.5, 0.3, // class 0: picks 1, 2
            0.8, 0.2, 0.7, 0.4, // class 1: picks 4, 6
            0.6, 0.65, 0.05, 0.33, // class 2: picks 8, 9
        ];
        let got = select_balanced(&labels, &distances, 6, 1.0, Heuristic::Hard).unwrap();
        assert_eq!(got, vec![1, 2, 4, 6, 8, 9]);
    }

    #[test]
    fn factor_zero_collapses_to_global_ordering() {
        let labels = vec![0, 1, 0, 1, 0, 1];
        let distances = vec![0.6, 0.1, 0.9, 0.8, 0.2, 0.5];
        let got = select_balanced(&labels, &distances, 3, 0.0, Heuristic::Hard).unwrap();
        // Global hard order: 2 (0.9), 3 (0.8), 0 (0.6).
        assert_eq!(got, vec![0, 2, 3]);
    }

    #[test]
    fn full_target_returns_everything() {
        let labels = vec![0, 1, 2, 0];
        let distances = vec![0.5, 0.25, 0.75, 0.1];
        let got = select_balanced(&labels, &distances, 4, 1.0, Heuristic::Easy).unwrap();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn easy_selects_per_class_minima() {
        let labels = vec![0, 0, 0, 1, 1, 1];
        let distances = vec![0.3, 0.1, 0.2, 0.9, 0.7, 0.8];
        let got = select_balanced(&labels, &distances, 2, 1.0, Heuristic::Easy).unwrap();
        assert_eq!(got, vec![1, 4]);
    }

    #[test]
    fn mixed_takes_both_ends() {
        let labels = vec![0; 6];
        let distances = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        // Quota 4 within one class: easy half {0, 1}, hard half {5, 4}.
        let got = select_balanced(&labels, &distances, 4, 1.0, Heuristic::Mixed).unwrap();
        assert_eq!(got, vec![0, 1, 4, 5]);
    }

    #[test]
    fn shortage_spills_into_global_fill() {
        // Class 1 has a single member; the deficit must come from class 0.
        let labels = vec![0, 0, 0, 0, 0, 1];
        let distances = vec![0.5, 0.4, 0.3, 0.2, 0.1, 0.6];
        let got = select_balanced(&labels, &distances, 4, 1.0, Heuristic::Hard).unwrap();
        // LB = 2: class 0 takes {0, 1}, class 1 takes {5}; fill takes 2 (0.3).
        assert_eq!(got, vec![0, 1, 2, 5]);
    }

    #[test]
    fn target_too_large_errors() {
        assert!(matches!(
            select_balanced(&[0, 1], &[0.1, 0.2], 3, 1.0, Heuristic::Hard),
            Err(Error::TargetTooLarge { target: 3, pool: 2 })
        ));
    }

    #[test]
    fn confidence_identities() {
        // Uniform logits -> 1/N; (10, -10) -> sigma(20).
        let logits = Tensor::new(vec![2, 2], vec![3.0, 3.0, 10.0, -10.0]).unwrap();
        let scores = confidence_from_logits(&logits, ConfidenceMode::MaxSoftmax);
        assert!((scores[0] - 0.5).abs() < 1e-7);
        assert!((scores[1] as f64 - 1.0 / (1.0 + (-20.0f64).exp())).abs() < 1e-7);
        let raw = confidence_from_logits(&logits, ConfidenceMode::MaxLogit);
        assert_eq!(raw, vec![3.0, 10.0]);
    }

    #[test]
    fn confidence_matches_independent_softmax() {
        let mut rng = crate::rng::stream(8, crate::rng::Purpose::Synth, &[6]);
        use rand::Rng;
        let data: Vec<f32> = (0..5 * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let logits = Tensor::new(vec![5, 4], data.clone()).unwrap();
        let scores = confidence_from_logits(&logits, ConfidenceMode::MaxSoftmax);
        for i in 0..5 {
            let row = &data[i * 4..(i + 1) * 4];
            // Plain textbook softmax, written independently of the engine.
            let exps: Vec<f64> = row.iter().map(|&v| (v as f64).exp()).collect();
            let z: f64 = exps.iter().sum();
            let want = exps.iter().map(|e| e / z).fold(f64::MIN, f64::max);
            assert!((scores[i] as f64 - want).abs() < 1e-7);
        }
    }

    #[test]
    fn entropy_prune_top_keeps_low_confidence() {
        let cfg = EntropyPruneConfig {
            removal_percent: 50.0,
            heuristic: EntropyHeuristic::Top,
            ..Default::default()
        };
        let indices = vec![10, 11, 12, 13];
        let scores = vec![0.9, 0.5, 0.7, 0.3];
        let (kept, report) = entropy_prune(&indices, &scores, &cfg).unwrap();
        assert_eq!(kept, vec![11, 13]);
        assert_eq!(report.stages[0].output_size, 2);
    }

    #[test]
    fn entropy_prune_zero_percent_is_identity() {
        let cfg = EntropyPruneConfig {
            removal_percent: 0.0,
            ..Default::default()
        };
        let (kept, _) = entropy_prune(&[5, 6, 7], &[0.1, 0.9, 0.4], &cfg).unwrap();
        assert_eq!(kept, vec![5, 6, 7]);
    }

    #[test]
    fn entropy_prune_bottom_and_random() {
        let indices: Vec<usize> = (0..10).collect();
        let scores: Vec<f32> = (0..10).map(|i| i as f32 / 10.0).collect();
        let bottom = EntropyPruneConfig {
            removal_percent: 30.0,
            heuristic: EntropyHeuristic::Bottom,
            ..Default::default()
        };
        let (kept, _) = entropy_prune(&indices, &scores, &bottom).unwrap();
        assert_eq!(kept, vec![3, 4, 5, 6, 7, 8, 9]);

        let random = EntropyPruneConfig {
            removal_percent: 30.0,
            heuristic: EntropyHeuristic::Random,
            seed: 5,
            ..Default::default()
        };
        let (kept_a, _) = entropy_prune(&indices, &scores, &random).unwrap();
        let (kept_b, _) = entropy_prune(&indices, &scores, &random).unwrap();
        assert_eq!(kept_a, kept_b);
        assert_eq!(kept_a.len(), 7);
    }

    #[test]
    fn entropy_rejects_full_removal() {
        let cfg = EntropyPruneConfig {
            removal_percent: 100.0,
            ..Default::default()
        };
        assert!(matches!(
            entropy_prune(&[0], &[0.5], &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    fn toy_model_and_pool() -> (ModelState, PatchDataset) {
        let arch = ArchitectureSpec::new(
            [3, 8, 8],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: 192,
                    out_dim: 8,
                },
                LayerSpec::Activation(crate::nn::ActivationKind::Tanh),
                LayerSpec::Dense {
                    in_dim: 8,
                    out_dim: 3,
                },
            ],
            2,
            3,
        )
        .unwrap();
        let model = ModelState::init(arch, 21).unwrap();
        let mut pixels = Vec::new();
        for i in 0..(24 * 24 * 3) {
            pixels.push(((i * 37 + 11) % 256) as u8);
        }
        let img = SourceImage::new(24, 24, 3, pixels).unwrap();
        let cfg = AugmentationConfig {
            patch_size: 8,
            ..Default::default()
        };
        let ds = generate_patches(&img, 64, 3, &cfg).unwrap();
        (model, ds)
    }

    #[test]
    fn pipeline_disabled_is_identity_prefix() {
        let (model, ds) = toy_model_and_pool();
        let (sel, _) = prune_pipeline(&ds, &model, None, None, 64).unwrap();
        assert_eq!(sel, (0..64).collect::<Vec<_>>());
        let (sel, _) = prune_pipeline(&ds, &model, None, None, 10).unwrap();
        assert_eq!(sel, (0..10).collect::<Vec<_>>());
        assert!(prune_pipeline(&ds, &model, None, None, 65).is_err());
    }

    #[test]
    fn pipeline_kmeans_only_equals_kmeans_balance() {
        let (model, ds) = toy_model_and_pool();
        let kcfg = KMeansBalanceConfig {
            clusters: 4,
            target_size: Some(20),
            seed: 9,
            ..Default::default()
        };
        let (a, _) = prune_pipeline(&ds, &model, Some(&kcfg), None, 0).unwrap();
        let (b, _) = kmeans_balance(&ds, &model, &kcfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
    }

    #[test]
    fn pipeline_composes_stages_and_reports_sizes() {
        let (model, ds) = toy_model_and_pool();
        let kcfg = KMeansBalanceConfig {
            clusters: 4,
            target_size: Some(32),
            seed: 9,
            ..Default::default()
        };
        let ecfg = EntropyPruneConfig {
            removal_percent: 50.0,
            ..Default::default()
        };
        let (sel, report) = prune_pipeline(&ds, &model, Some(&kcfg), Some(&ecfg), 0).unwrap();
        assert_eq!(sel.len(), 16);
        assert_eq!(report.stages.len(), 2);
        assert_eq!(report.stages[0].output_size, report.stages[1].input_size);
        let count_sum: usize = report.per_class_counts.iter().map(|&(_, c)| c).sum();
        assert_eq!(count_sum, 16);
        let hist_sum: usize = report.pseudo_label_histogram.iter().sum();
        assert_eq!(hist_sum, 64);
        // Report serializes to JSON for the round logs.
        let js = serde_json::to_string(&report).unwrap();
        assert!(js.contains("pseudo_label_histogram"));
        // Wire format round-trips through parse.
        let wire = report.indices_wire_format();
        let parsed: Vec<usize> = wire.lines().map(|l| l.parse().unwrap()).collect();
        assert_eq!(parsed, sel);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let (model, ds) = toy_model_and_pool();
        let kcfg = KMeansBalanceConfig {
            clusters: 3,
            target_size: Some(24),
            seed: 4,
            ..Default::default()
        };
        let ecfg = EntropyPruneConfig {
            removal_percent: 25.0,
            ..Default::default()
        };
        let (a, ra) = prune_pipeline(&ds, &model, Some(&kcfg), Some(&ecfg), 0).unwrap();
        let (b, rb) = prune_pipeline(&ds, &model, Some(&kcfg), Some(&ecfg), 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn selection_contents_survive_storage_permutation() {
        // Permute the pool positions (distinct scores) and check that the
        // selected contents are the same set under the permutation.
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let distances = vec![0.11, 0.52, 0.33, 0.24, 0.95, 0.46, 0.07, 0.68];
        let sel = select_balanced(&labels, &distances, 4, 1.0, Heuristic::Hard).unwrap();

        let perm = [5usize, 2, 7, 0, 4, 1, 6, 3]; // new[i] = old[perm[i]]
        let p_labels: Vec<usize> = perm.iter().map(|&o| labels[o]).collect();
        let p_dist: Vec<f32> = perm.iter().map(|&o| distances[o]).collect();
        let p_sel = select_balanced(&p_labels, &p_dist, 4, 1.0, Heuristic::Hard).unwrap();

        let mut orig: Vec<f32> = sel.iter().map(|&i| distances[i]).collect();
        let mut permuted: Vec<f32> = p_sel.iter().map(|&i| p_dist[i]).collect();
        orig.sort_by(f32::total_cmp);
        permuted.sort_by(f32::total_cmp);
        assert_eq!(orig, permuted);
    }
}
