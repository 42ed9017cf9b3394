//! Experiment configuration: one TOML file describes a full run, with field
//! names mirroring the round-loop vocabulary (`fedavg_init_rate_percent`,
//! `kmeans.heuristic`, ...) so experiment variants are one-line diffs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{DistillSchedule, LocalMode, PruningModelChoice, TeacherMode};
use crate::nn::{DistillConfig, Preset, TrainConfig};
use crate::patchgen::AugmentationConfig;
use crate::pruning::{ConfidenceMode, EntropyHeuristic, EntropyPruneConfig, Heuristic, KMeansBalanceConfig};

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_holdout() -> f64 {
    0.1
}

fn default_one() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// One full run per seed; results aggregate as mean +- sample std.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub clients: ClientsConfig,
    pub distillation_source: DistillationSourceConfig,
    #[serde(default)]
    pub selection: SelectionConfig,
    pub federation: FederationSection,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Class-conditional synthetic textures plus a montage single image.
    Synth {
        classes: usize,
        per_class: usize,
        test_per_class: usize,
        image_size: usize,
        separation: f64,
        seed: u64,
        #[serde(default = "default_holdout")]
        holdout_fraction: f64,
    },
    /// `images/*.png` + `labels.csv`; a stratified split carves the test set.
    PngDir {
        path: String,
        #[serde(default = "default_png_test_fraction")]
        test_fraction: f64,
        #[serde(default = "default_holdout")]
        holdout_fraction: f64,
    },
}

fn default_png_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub clients: usize,
    pub alpha: f64,
    /// Partition draw seed; defaults to the run's master seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientsConfig {
    /// One entry applies to every client; otherwise exactly one per client.
    pub presets: Vec<String>,
    pub local_epochs: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub fedprox_mu: f32,
}

fn default_mode() -> String {
    "plain".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum DistillationSourceConfig {
    /// Patches generated from the montage (or an explicit PNG) once per run.
    SingleImage {
        pool_patches: usize,
        /// Optional external image; the dataset montage is the default.
        image: Option<String>,
        /// Patch generation seed; defaults to the run's master seed.
        #[serde(default)]
        patch_seed: Option<u64>,
        augment: AugmentationConfig,
    },
    /// A fixed subset of labelled samples; labels are ignored by the KD path.
    LabelledSubset { count: usize },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default)]
    pub kmeans: Option<KMeansSection>,
    #[serde(default)]
    pub entropy: Option<EntropySection>,
    /// Selection size when both stages are disabled (the no-selection
    /// baseline under the same budget).
    #[serde(default)]
    pub fallback_target: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KMeansSection {
    pub clusters: usize,
    #[serde(default)]
    pub target_size: Option<usize>,
    #[serde(default = "default_one")]
    pub balancing_factor: f64,
    pub heuristic: String,
    #[serde(default = "default_true")]
    pub refit_each_round: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropySection {
    pub removal_percent: f64,
    pub heuristic: String,
    #[serde(default = "default_confidence")]
    pub confidence: String,
}

fn default_confidence() -> String {
    "max_softmax".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    pub rounds: usize,
    pub participation: f64,
    pub fedavg_init_rate_percent: f64,
    pub distill_learning_rate: f32,
    pub distill_batch_size: usize,
    #[serde(default = "default_temp")]
    pub distill_temperature: f32,
    #[serde(default)]
    pub distill_momentum: f32,
    #[serde(default = "default_teacher")]
    pub teacher_mode: String,
    #[serde(default = "default_pruning_model")]
    pub pruning_model: String,
    pub distill_schedule: DistillSchedule,
}

fn default_temp() -> f32 {
    1.0
}

fn default_teacher() -> String {
    "avg_logits".into()
}

fn default_pruning_model() -> String {
    "largest_group".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Checkpoint interval in rounds; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Write each round's selected indices as a newline-delimited list.
    pub write_round_indices: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: 0,
            write_round_indices: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Canonical snapshot; parsing it back re-serializes byte-identically.
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn num_clients(&self) -> usize {
        self.partition.clients
    }

    /// Per-client presets, broadcasting a single entry.
    pub fn resolved_presets(&self) -> Result<Vec<Preset>> {
        let n = self.partition.clients;
        let raw = &self.clients.presets;
        let list: Vec<&String> = match raw.len() {
            1 => vec![&raw[0]; n],
            len if len == n => raw.iter().collect(),
            len => {
                return Err(Error::InvalidConfig(format!(
                    "clients.presets must have 1 or {n} entries, got {len}"
                )))
            }
        };
        list.into_iter().map(|s| Preset::from_name(s)).collect()
    }

    pub fn local_mode(&self) -> Result<LocalMode> {
        match self.clients.mode.as_str() {
            "plain" => Ok(LocalMode::Plain),
            "fedprox" => {
                if !(self.clients.fedprox_mu > 0.0) {
                    return Err(Error::InvalidConfig(
                        "clients.fedprox_mu must be > 0 in fedprox mode".into(),
                    ));
                }
                Ok(LocalMode::FedProx {
                    mu: self.clients.fedprox_mu,
                })
            }
            other => Err(Error::InvalidConfig(format!(
                "clients.mode must be plain|fedprox, got '{other}'"
            ))),
        }
    }

    pub fn teacher_mode(&self) -> Result<TeacherMode> {
        match self.federation.teacher_mode.as_str() {
            "avg_logits" => Ok(TeacherMode::AvgLogits),
            "avg_probs" => Ok(TeacherMode::AvgProbs),
            other => Err(Error::InvalidConfig(format!(
                "federation.teacher_mode must be avg_logits|avg_probs, got '{other}'"
            ))),
        }
    }

    pub fn pruning_model(&self) -> Result<PruningModelChoice> {
        let raw = self.federation.pruning_model.as_str();
        if raw == "largest_group" {
            return Ok(PruningModelChoice::LargestGroup);
        }
        if let Some(idx) = raw.strip_prefix("group:") {
            let g: usize = idx.parse().map_err(|_| {
                Error::InvalidConfig(format!("federation.pruning_model: bad group index '{idx}'"))
            })?;
            return Ok(PruningModelChoice::Group(g));
        }
        Err(Error::InvalidConfig(format!(
            "federation.pruning_model must be largest_group|group:<i>, got '{raw}'"
        )))
    }

    pub fn kmeans_config(&self, master_seed: u64) -> Result<Option<KMeansBalanceConfig>> {
        let Some(k) = &self.selection.kmeans else {
            return Ok(None);
        };
        let heuristic = match k.heuristic.as_str() {
            "easy" => Heuristic::Easy,
            "hard" => Heuristic::Hard,
            "mixed" => Heuristic::Mixed,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "selection.kmeans.heuristic must be easy|hard|mixed, got '{other}'"
                )))
            }
        };
        let cfg = KMeansBalanceConfig {
            clusters: k.clusters,
            target_size: k.target_size,
            balancing_factor: k.balancing_factor,
            heuristic,
            seed: master_seed,
            refit_each_round: k.refit_each_round,
        };
        cfg.validate()?;
        Ok(Some(cfg))
    }

    pub fn entropy_config(&self, master_seed: u64) -> Result<Option<EntropyPruneConfig>> {
        let Some(e) = &self.selection.entropy else {
            return Ok(None);
        };
        let heuristic = match e.heuristic.as_str() {
            "top" => EntropyHeuristic::Top,
            "bottom" => EntropyHeuristic::Bottom,
            "random" => EntropyHeuristic::Random,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "selection.entropy.heuristic must be top|bottom|random, got '{other}'"
                )))
            }
        };
        let confidence = match e.confidence.as_str() {
            "max_softmax" => ConfidenceMode::MaxSoftmax,
            "max_logit" => ConfidenceMode::MaxLogit,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "selection.entropy.confidence must be max_softmax|max_logit, got '{other}'"
                )))
            }
        };
        let cfg = EntropyPruneConfig {
            removal_percent: e.removal_percent,
            heuristic,
            seed: master_seed,
            confidence,
        };
        cfg.validate()?;
        Ok(Some(cfg))
    }

    pub fn local_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.clients.learning_rate,
            epochs: self.clients.local_epochs,
            batch_size: self.clients.batch_size,
            rng_seed: 0,
            momentum: self.clients.momentum,
            proximal_mu: 0.0,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            learning_rate: self.federation.distill_learning_rate,
            batch_size: self.federation.distill_batch_size,
            rng_seed: 0,
            temperature: self.federation.distill_temperature,
            momentum: self.federation.distill_momentum,
        }
    }

    /// Cross-field validation with field-level diagnostics.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| {
            Err(Error::InvalidConfig(format!("{field}: {msg}")))
        };
        if self.name.is_empty() {
            return fail("name", "must not be empty".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds", "need at least one seed".into());
        }
        match &self.dataset {
            DatasetConfig::Synth {
                classes,
                per_class,
                test_per_class,
                image_size,
                separation,
                holdout_fraction,
                ..
            } => {
                if *classes < 2 {
                    return fail("dataset.classes", format!("must be >= 2, got {classes}"));
                }
                if *per_class == 0 || *test_per_class == 0 {
                    return fail("dataset.per_class", "train/test per-class must be >= 1".into());
                }
                if *image_size < 4 {
                    return fail("dataset.image_size", format!("must be >= 4, got {image_size}"));
                }
                if !(*separation > 0.0 && *separation <= 1.0) {
                    return fail(
                        "dataset.separation",
                        format!("must be in (0, 1], got {separation}"),
                    );
                }
                if !(*holdout_fraction > 0.0 && *holdout_fraction < 1.0) {
                    return fail(
                        "dataset.holdout_fraction",
                        format!("must be in (0, 1), got {holdout_fraction}"),
                    );
                }
            }
            DatasetConfig::PngDir {
                path,
                test_fraction,
                holdout_fraction,
            } => {
                if path.is_empty() {
                    return fail("dataset.path", "must not be empty".into());
                }
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return fail(
                        "dataset.test_fraction",
                        format!("must be in (0, 1), got {test_fraction}"),
                    );
                }
                if !(*holdout_fraction > 0.0 && *holdout_fraction < 1.0) {
                    return fail(
                        "dataset.holdout_fraction",
                        format!("must be in (0, 1), got {holdout_fraction}"),
                    );
                }
            }
        }
        if self.partition.clients == 0 {
            return fail("partition.clients", "must be >= 1".into());
        }
        if !(self.partition.alpha > 0.0) {
            return fail(
                "partition.alpha",
                format!("must be > 0, got {}", self.partition.alpha),
            );
        }
        self.resolved_presets()?;
        if !(self.clients.learning_rate > 0.0) {
            return fail("clients.learning_rate", "must be > 0".into());
        }
        if self.clients.local_epochs == 0 {
            return fail("clients.local_epochs", "must be >= 1".into());
        }
        if self.clients.batch_size == 0 {
            return fail("clients.batch_size", "must be >= 1".into());
        }
        self.local_mode()?;
        match &self.distillation_source {
            DistillationSourceConfig::SingleImage {
                pool_patches,
                augment,
                ..
            } => {
                if *pool_patches == 0 {
                    return fail("distillation_source.pool_patches", "must be >= 1".into());
                }
                augment.validate()?;
                if let DatasetConfig::Synth { image_size, .. } = &self.dataset {
                    if augment.patch_size != *image_size {
                        return fail(
                            "distillation_source.augment.patch_size",
                            format!(
                                "patch size {} must match the architecture input ({})",
                                augment.patch_size, image_size
                            ),
                        );
                    }
                }
            }
            DistillationSourceConfig::LabelledSubset { count } => {
                if *count == 0 {
                    return fail("distillation_source.count", "must be >= 1".into());
                }
            }
        }
        self.kmeans_config(0)?;
        self.entropy_config(0)?;
        if self.selection.kmeans.is_none()
            && self.selection.entropy.is_none()
            && self.selection.fallback_target.is_none()
        {
            return fail(
                "selection.fallback_target",
                "required when both selection stages are disabled".into(),
            );
        }
        let f = &self.federation;
        if f.rounds == 0 {
            return fail("federation.rounds", "must be >= 1".into());
        }
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return fail(
                "federation.participation",
                format!("must be in (0, 1], got {}", f.participation),
            );
        }
        if !(f.fedavg_init_rate_percent > 0.0 && f.fedavg_init_rate_percent <= 100.0) {
            return fail(
                "federation.fedavg_init_rate_percent",
                format!("must be in (0, 100], got {}", f.fedavg_init_rate_percent),
            );
        }
        if !(f.distill_learning_rate > 0.0) {
            return fail("federation.distill_learning_rate", "must be > 0".into());
        }
        if f.distill_batch_size == 0 {
            return fail("federation.distill_batch_size", "must be >= 1".into());
        }
        if !(f.distill_temperature > 0.0) {
            return fail("federation.distill_temperature", "must be > 0".into());
        }
        f.distill_schedule.validate()?;
        self.teacher_mode()?;
        self.pruning_model()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TOY: &str = r#"
name = "toy"
seeds = [1, 2]

[dataset]
kind = "synth"
classes = 4
per_class = 30
test_per_class = 10
image_size = 16
separation = 0.85
seed = 7

[partition]
clients = 4
alpha = 1.0

[clients]
presets = ["small"]
local_epochs = 2
learning_rate = 0.01
batch_size = 16

[distillation_source]
kind = "single_image"
pool_patches = 100

[distillation_source.augment]
patch_size = 16

[selection.kmeans]
clusters = 8
heuristic = "hard"

[selection.entropy]
removal_percent = 90.0
heuristic = "top"

[federation]
rounds = 2
participation = 0.5
fedavg_init_rate_percent = 20.0
distill_learning_rate = 0.005
distill_batch_size = 16

[federation.distill_schedule]
mode = "uniform"
steps_per_round = 5
"#;

    #[test]
    fn toy_config_parses_and_validates() {
        let cfg = ExperimentConfig::from_toml(TOY).unwrap();
        assert_eq!(cfg.partition.clients, 4);
        assert_eq!(cfg.resolved_presets().unwrap().len(), 4);
        assert!(matches!(cfg.local_mode().unwrap(), LocalMode::Plain));
        assert!(cfg.kmeans_config(5).unwrap().is_some());
        assert!(cfg.entropy_config(5).unwrap().is_some());
    }

    #[test]
    fn snapshot_round_trips_byte_identically() {
        let cfg = ExperimentConfig::from_toml(TOY).unwrap();
        let snap = cfg.to_canonical_toml();
        let back = ExperimentConfig::from_toml(&snap).unwrap();
        assert_eq!(snap, back.to_canonical_toml());
    }

    #[test]
    fn validation_names_the_bad_field() {
        let bad = TOY.replace("alpha = 1.0", "alpha = -0.5");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("partition.alpha"), "got: {err}");

        let bad = TOY.replace("participation = 0.5", "participation = 0.0");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("federation.participation"), "got: {err}");

        let bad = TOY.replace("patch_size = 16", "patch_size = 8");
        let err = ExperimentConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("patch_size"), "got: {err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = TOY.replace("[partition]", "[partition]\nbogus = 3");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn disabled_selection_requires_fallback_target() {
        let mut no_sel = String::new();
        for line in TOY.lines() {
            if line.starts_with("[selection")
                || line.starts_with("clusters")
                || line.starts_with("heuristic")
                || line.starts_with("removal_percent")
            {
                continue;
            }
            no_sel.push_str(line);
            no_sel.push('\n');
        }
        let err = ExperimentConfig::from_toml(&no_sel).unwrap_err().to_string();
        assert!(err.contains("fallback_target"), "got: {err}");
        let ok = no_sel.replace(
            "[federation]",
            "[selection]\nfallback_target = 10\n\n[federation]",
        );
        ExperimentConfig::from_toml(&ok).unwrap();
    }
}
