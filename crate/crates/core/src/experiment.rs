//! Experiment execution: build datasets, shards and the simulator from a
//! config, run every seed, and emit round CSVs, JSON logs, checkpoints, a
//! best-accuracy summary and an accuracy-vs-round SVG.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, DistillationSourceConfig, ExperimentConfig};
use crate::error::{Error, Result};
use crate::federation::{
    BytesAccounting, ClientSpec, FederationConfig, RoundRecord, Simulation,
};
use crate::nn::ModelState;
use crate::partition::{dirichlet_partition, holdout_split, load_png_dir, LabelledDataset, SynthSpec};
use crate::patchgen::{generate_patches, PatchDataset, SourceImage};
use crate::pruning::{confidence_from_logits, pseudo_labels, score_patches, ConfidenceMode, Pruner};
use crate::rng::{derive_seed, Purpose};

/// Everything assembled for one seeded run.
pub struct BuiltExperiment {
    pub train: LabelledDataset,
    pub validation: LabelledDataset,
    pub test: LabelledDataset,
    /// Present when the distillation source is generated from a single image.
    pub patch_dataset: Option<PatchDataset>,
    pub simulation: Simulation,
}

/// Builds datasets, partition, distillation pool and simulator for one seed.
pub fn build(cfg: &ExperimentConfig, master_seed: u64) -> Result<BuiltExperiment> {
    cfg.validate()?;

    // Datasets.
    let (full_train, test) = match &cfg.dataset {
        DatasetConfig::Synth {
            classes,
            per_class,
            test_per_class,
            image_size,
            separation,
            seed,
            ..
        } => {
            let spec = SynthSpec {
                classes: *classes,
                image_size: *image_size,
                separation: *separation,
                seed: *seed,
            };
            (spec.dataset(*per_class, 0)?, spec.dataset(*test_per_class, 1)?)
        }
        DatasetConfig::PngDir {
            path,
            test_fraction,
            ..
        } => {
            let all = load_png_dir(Path::new(path))?;
            let (rest, test) = holdout_split(&all, *test_fraction, derive_seed(
                master_seed,
                Purpose::Holdout,
                &[1],
            ))?;
            (rest, test)
        }
    };
    let holdout_fraction = match &cfg.dataset {
        DatasetConfig::Synth {
            holdout_fraction, ..
        }
        | DatasetConfig::PngDir {
            holdout_fraction, ..
        } => *holdout_fraction,
    };
    let (train, validation) = holdout_split(
        &full_train,
        holdout_fraction,
        derive_seed(master_seed, Purpose::Holdout, &[0]),
    )?;

    // Distillation pool.
    let (pool, patch_dataset) = match &cfg.distillation_source {
        DistillationSourceConfig::SingleImage {
            pool_patches,
            image,
            patch_seed,
            augment,
        } => {
            let source = match image {
                Some(path) => SourceImage::from_png(Path::new(path))?,
                None => match &cfg.dataset {
                    DatasetConfig::Synth {
                        classes,
                        image_size,
                        separation,
                        seed,
                        ..
                    } => SynthSpec {
                        classes: *classes,
                        image_size: *image_size,
                        separation: *separation,
                        seed: *seed,
                    }
                    .montage((image_size * 4).max(32))?,
                    DatasetConfig::PngDir { .. } => {
                        return Err(Error::InvalidConfig(
                            "distillation_source.image: png_dir datasets need an explicit single image".into(),
                        ))
                    }
                },
            };
            let ds = generate_patches(
                &source,
                *pool_patches,
                patch_seed.unwrap_or(master_seed),
                augment,
            )?;
            (ds.patches.clone(), Some(ds))
        }
        DistillationSourceConfig::LabelledSubset { count } => {
            let pool = match &cfg.dataset {
                DatasetConfig::Synth {
                    classes,
                    image_size,
                    separation,
                    seed,
                    ..
                } => {
                    // Fresh labelled draws, disjoint from train/test streams.
                    let spec = SynthSpec {
                        classes: *classes,
                        image_size: *image_size,
                        separation: *separation,
                        seed: *seed,
                    };
                    let per_class = count.div_ceil(*classes);
                    let ds = spec.dataset(per_class, 2)?;
                    ds.inputs.gather_rows(&(0..*count).collect::<Vec<_>>())?
                }
                DatasetConfig::PngDir { .. } => {
                    if *count > validation.len() {
                        return Err(Error::InvalidConfig(format!(
                            "distillation_source.count: {count} exceeds the {} held-out samples",
                            validation.len()
                        )));
                    }
                    validation
                        .inputs
                        .gather_rows(&(0..*count).collect::<Vec<_>>())?
                }
            };
            (pool, None)
        }
    };

    // Partition and clients.
    let partition = dirichlet_partition(
        &train.labels,
        cfg.partition.clients,
        cfg.partition.alpha,
        cfg.partition.seed.unwrap_or(master_seed),
    )?;
    let presets = cfg.resolved_presets()?;
    let local = cfg.local_train_config();
    let clients: Vec<ClientSpec> = (0..cfg.partition.clients)
        .map(|id| ClientSpec {
            id,
            preset: presets[id],
            shard: partition.client_indices[id].clone(),
            local: local.clone(),
        })
        .collect();

    let fed = FederationConfig {
        rounds: cfg.federation.rounds,
        participation: cfg.federation.participation,
        fedavg_init_rate: cfg.federation.fedavg_init_rate_percent,
        local_mode: cfg.local_mode()?,
        distill: cfg.distill_config(),
        distill_schedule: cfg.federation.distill_schedule.clone(),
        teacher_mode: cfg.teacher_mode()?,
        pruning_model: cfg.pruning_model()?,
        master_seed,
    };
    let pool_len = pool.rows();
    let pruner = Pruner::new(
        cfg.kmeans_config(master_seed)?,
        cfg.entropy_config(master_seed)?,
        cfg.selection.fallback_target.unwrap_or(pool_len),
    );
    let simulation = Simulation::new(fed, clients, &train, &test, pool, pruner)?;
    Ok(BuiltExperiment {
        train,
        validation,
        test,
        patch_dataset,
        simulation,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best_macro_accuracy: f64,
    pub best_round: usize,
    pub final_macro_accuracy: f64,
    pub per_group_best: Vec<(String, f64)>,
    pub total_bytes: BytesAccounting,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    /// Mean and sample standard deviation of max-over-rounds macro accuracy.
    pub mean_best_macro: f64,
    pub std_best_macro: f64,
    pub seeds: Vec<SeedSummary>,
}

impl ExperimentSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("summary.json"))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("summary.json: {e}")))
    }
}

fn summarize_records(seed: u64, records: &[RoundRecord]) -> SeedSummary {
    let mut best_macro = 0.0;
    let mut best_round = 0;
    let mut per_group: std::collections::BTreeMap<String, f64> = Default::default();
    let mut total = BytesAccounting::default();
    for r in records {
        if r.macro_avg_accuracy > best_macro {
            best_macro = r.macro_avg_accuracy;
            best_round = r.round;
        }
        for g in &r.groups {
            let e = per_group.entry(g.preset.clone()).or_insert(0.0);
            *e = e.max(g.post_distill_accuracy);
        }
        total.params_up += r.bytes.params_up;
        total.params_down += r.bytes.params_down;
        total.logits_up += r.bytes.logits_up;
        total.indices_down += r.bytes.indices_down;
    }
    SeedSummary {
        seed,
        best_macro_accuracy: best_macro,
        best_round,
        final_macro_accuracy: records.last().map_or(0.0, |r| r.macro_avg_accuracy),
        per_group_best: per_group.into_iter().collect(),
        total_bytes: total,
    }
}

fn write_rounds_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("csv: {e}")))?;
    let presets: Vec<String> = records
        .first()
        .map(|r| r.groups.iter().map(|g| g.preset.clone()).collect())
        .unwrap_or_default();
    let mut header = vec![
        "round".to_string(),
        "fedavg_init".to_string(),
        "selected_count".to_string(),
    ];
    for p in &presets {
        header.push(format!("acc_{p}"));
    }
    header.extend(
        [
            "macro_acc",
            "bytes_params_up",
            "bytes_params_down",
            "bytes_logits_up",
            "bytes_indices_down",
            "wall_ms",
        ]
        .map(String::from),
    );
    w.write_record(&header)
        .map_err(|e| Error::Format(format!("csv: {e}")))?;
    for r in records {
        let mut row = vec![
            r.round.to_string(),
            (r.fedavg_init as u8).to_string(),
            r.selected_indices.len().to_string(),
        ];
        for g in &r.groups {
            row.push(format!("{:.6}", g.post_distill_accuracy));
        }
        row.extend([
            format!("{:.6}", r.macro_avg_accuracy),
            r.bytes.params_up.to_string(),
            r.bytes.params_down.to_string(),
            r.bytes.logits_up.to_string(),
            r.bytes.indices_down.to_string(),
            r.wall_ms.to_string(),
        ]);
        w.write_record(&row)
            .map_err(|e| Error::Format(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Minimal accuracy-vs-round polyline chart, one series per seed.
fn write_accuracy_svg(path: &Path, series: &[(String, Vec<f64>)]) -> Result<()> {
    let (w, h, ml, mb) = (640.0, 400.0, 50.0, 40.0);
    let rounds = series.iter().map(|(_, v)| v.len()).max().unwrap_or(1).max(1);
    let sx = (w - ml - 20.0) / rounds as f64;
    let sy = h - mb - 20.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<line x1=\"{ml}\" y1=\"20\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - mb, h - mb, w - 20.0, h - mb
    ));
    for tick in 0..=5 {
        let acc = tick as f64 / 5.0;
        let y = h - mb - acc * sy;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{acc:.1}</text>\n",
            ml - 6.0,
            y + 4.0
        ));
        svg.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#dddddd\"/>\n",
            w - 20.0
        ));
    }
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    for (i, (label, values)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(r, &acc)| {
                format!("{:.1},{:.1}", ml + (r as f64 + 1.0) * sx, h - mb - acc * sy)
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{label}</text>\n",
            w - 120.0,
            30.0 + 14.0 * i as f64
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">round</text>\n</svg>\n",
        (w + ml) / 2.0,
        h - 8.0
    ));
    std::fs::write(path, svg)?;
    Ok(())
}

#[derive(Serialize)]
struct RunLog<'a> {
    config: &'a ExperimentConfig,
    master_seed: u64,
    train_size: usize,
    validation_size: usize,
    test_size: usize,
    pool_size: usize,
    records: &'a [RoundRecord],
}

/// Runs every configured seed and writes all artifacts under `out_dir`.
/// Refuses to reuse a directory that already holds a summary, so reruns
/// never mutate prior results.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    if out_dir.join("summary.json").exists() {
        return Err(Error::InvalidConfig(format!(
            "output directory {} already contains a run; use a fresh directory",
            out_dir.display()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), cfg.to_canonical_toml())?;

    let mut seed_summaries = Vec::new();
    let mut macro_series: Vec<(String, Vec<f64>)> = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = out_dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&seed_dir)?;
        let mut built = build(cfg, seed)?;
        if let Some(ds) = &built.patch_dataset {
            std::fs::write(seed_dir.join("pool_hash.txt"), ds.content_hash_hex())?;
        }

        let checkpoint_every = cfg.output.checkpoint_every;
        if cfg.output.write_round_indices {
            std::fs::create_dir_all(seed_dir.join("indices"))?;
        }
        if checkpoint_every > 0 {
            std::fs::create_dir_all(seed_dir.join("checkpoints"))?;
        }
        for round in 1..=cfg.federation.rounds {
            let record = built.simulation.run_round()?;
            if cfg.output.write_round_indices {
                let mut text = String::new();
                for i in &record.selected_indices {
                    text.push_str(&format!("{i}\n"));
                }
                std::fs::write(
                    seed_dir.join("indices").join(format!("round_{round:04}.txt")),
                    text,
                )?;
                if let Some(report) = built.simulation.last_prune_report() {
                    std::fs::write(
                        seed_dir
                            .join("indices")
                            .join(format!("round_{round:04}.report.json")),
                        serde_json::to_string_pretty(report)
                            .map_err(|e| Error::Format(e.to_string()))?,
                    )?;
                }
            }
            if checkpoint_every > 0 && round % checkpoint_every == 0 {
                for g in built.simulation.groups() {
                    g.model.save(&seed_dir.join("checkpoints").join(format!(
                        "round_{round:04}_{}.fpm",
                        g.preset.name()
                    )))?;
                }
            }
        }
        let records = built.simulation.records();
        write_rounds_csv(&seed_dir.join("rounds.csv"), records)?;
        let log = RunLog {
            config: cfg,
            master_seed: seed,
            train_size: built.train.len(),
            validation_size: built.validation.len(),
            test_size: built.test.len(),
            pool_size: built.simulation.pool_size(),
            records,
        };
        std::fs::write(
            seed_dir.join("log.json"),
            serde_json::to_string_pretty(&log).map_err(|e| Error::Format(e.to_string()))?,
        )?;
        macro_series.push((
            format!("seed {seed}"),
            records.iter().map(|r| r.macro_avg_accuracy).collect(),
        ));
        seed_summaries.push(summarize_records(seed, records));
    }

    let n = seed_summaries.len() as f64;
    let mean = seed_summaries
        .iter()
        .map(|s| s.best_macro_accuracy)
        .sum::<f64>()
        / n;
    let std = if seed_summaries.len() > 1 {
        (seed_summaries
            .iter()
            .map(|s| (s.best_macro_accuracy - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt()
    } else {
        0.0
    };
    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        mean_best_macro: mean,
        std_best_macro: std,
        seeds: seed_summaries,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?,
    )?;

    let mut txt = String::new();
    txt.push_str(&format!(
        "{}: best_macro_acc = {:.4} +- {:.4} over {} seed(s)\n",
        summary.name,
        summary.mean_best_macro,
        summary.std_best_macro,
        summary.seeds.len()
    ));
    for s in &summary.seeds {
        txt.push_str(&format!(
            "seed {}: best {:.4} (round {}), final {:.4}, bytes up {} (params) + {} (logits)\n",
            s.seed,
            s.best_macro_accuracy,
            s.best_round,
            s.final_macro_accuracy,
            s.total_bytes.params_up,
            s.total_bytes.logits_up
        ));
    }
    std::fs::write(out_dir.join("summary.txt"), txt)?;
    write_accuracy_svg(&out_dir.join("accuracy.svg"), &macro_series)?;
    Ok(summary)
}

/// One CSV row per patch: index, pseudo-label, confidence, embedding
/// components. Returns the row count.
pub fn dump_embeddings(
    model: &ModelState,
    ds: &PatchDataset,
    out: &mut impl Write,
) -> Result<usize> {
    let (embeddings, logits) = score_patches(model, &ds.patches)?;
    let labels = pseudo_labels(&logits);
    let confidence = confidence_from_logits(&logits, ConfidenceMode::MaxSoftmax);
    let dim = embeddings.row_len();
    let mut header = String::from("index,pseudo_label,confidence");
    for e in 0..dim {
        header.push_str(&format!(",e{e}"));
    }
    writeln!(out, "{header}")?;
    for i in 0..ds.len() {
        let mut row = format!("{i},{},{:.7}", labels[i], confidence[i]);
        for v in embeddings.row(i) {
            row.push_str(&format!(",{v:.7}"));
        }
        writeln!(out, "{row}")?;
    }
    Ok(ds.len())
}
