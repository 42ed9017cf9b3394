//! Command-line harness: run experiments, generate patch containers, dump
//! embeddings, and compare finished runs.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedpatch::config::ExperimentConfig;
use fedpatch::experiment::{dump_embeddings, run_experiment, ExperimentSummary};
use fedpatch::nn::ModelState;
use fedpatch::patchgen::{generate_patches, AugmentationConfig, PatchDataset, SourceImage};

#[derive(Parser)]
#[command(name = "fedpatch", version, about = "Single-image federated distillation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config.
    Run(RunArgs),
    /// Generate a patch container from a PNG and print its content hash.
    GenPatches(GenPatchesArgs),
    /// Dump per-patch embeddings, pseudo-labels and confidences to CSV.
    DumpEmbeddings(DumpArgs),
    /// Compare the summaries of two or more finished runs.
    Compare(CompareArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to $FEDPATCH_OUT/<name> or runs/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's seed list (comma separated).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override the number of rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Override the FedAvg initialization rate (percent).
    #[arg(long)]
    fedavg_init_rate: Option<f64>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct GenPatchesArgs {
    /// Source PNG (8-bit RGB or grayscale).
    #[arg(long)]
    image: PathBuf,
    /// Number of patches to generate.
    #[arg(long)]
    count: usize,
    /// Generation seed.
    #[arg(long)]
    seed: u64,
    /// Output container path.
    #[arg(long)]
    out: PathBuf,
    /// Patch edge in pixels.
    #[arg(long, default_value_t = 16)]
    patch_size: usize,
    /// Crop area-scale range.
    #[arg(long, default_value_t = 0.08)]
    crop_scale_min: f32,
    #[arg(long, default_value_t = 1.0)]
    crop_scale_max: f32,
    /// Rotation bound in degrees.
    #[arg(long, default_value_t = 35.0)]
    rotation: f32,
    /// Horizontal flip probability.
    #[arg(long, default_value_t = 0.5)]
    flip_prob: f32,
    /// Color jitter strength (applied to brightness/contrast/saturation).
    #[arg(long, default_value_t = 0.4)]
    jitter: f32,
    /// Disable rotation / flip / jitter stages.
    #[arg(long)]
    no_rotation: bool,
    #[arg(long)]
    no_flip: bool,
    #[arg(long)]
    no_jitter: bool,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct DumpArgs {
    /// Model checkpoint (.fpm).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Patch container (.fpc).
    #[arg(long)]
    patches: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more run directories containing summary.json.
    #[arg(required = true, num_args = 2..)]
    runs: Vec<PathBuf>,
}

fn init_threads(threads: usize) {
    if threads > 0 {
        // Ignore failure when a pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    init_threads(args.threads);
    let mut cfg = ExperimentConfig::load(&args.config)
        .with_context(|| format!("loading {}", args.config.display()))?;
    if let Some(seeds) = args.seeds {
        cfg.seeds = seeds;
    }
    if let Some(rounds) = args.rounds {
        cfg.federation.rounds = rounds;
    }
    if let Some(rate) = args.fedavg_init_rate {
        cfg.federation.fedavg_init_rate_percent = rate;
    }
    cfg.validate().context("config validation")?;

    let out = match args.out {
        Some(p) => p,
        None => match std::env::var_os("FEDPATCH_OUT") {
            Some(root) => PathBuf::from(root).join(&cfg.name),
            None => PathBuf::from("runs").join(&cfg.name),
        },
    };
    eprintln!("running '{}' -> {}", cfg.name, out.display());
    let summary = run_experiment(&cfg, &out)?;
    for s in &summary.seeds {
        eprintln!(
            "seed {}: best macro accuracy {:.4} at round {}",
            s.seed, s.best_macro_accuracy, s.best_round
        );
    }
    println!("best_macro_acc={:.6}", summary.mean_best_macro);
    Ok(())
}

fn cmd_gen_patches(args: GenPatchesArgs) -> Result<()> {
    if args.count == 0 {
        bail!("--count must be at least 1");
    }
    init_threads(args.threads);
    let img = SourceImage::from_png(&args.image)
        .with_context(|| format!("reading {}", args.image.display()))?;
    let cfg = AugmentationConfig {
        patch_size: args.patch_size,
        crop_scale: (args.crop_scale_min, args.crop_scale_max),
        rotation_degrees: args.rotation,
        flip_prob: args.flip_prob,
        brightness: args.jitter,
        contrast: args.jitter,
        saturation: args.jitter,
        enable_rotation: !args.no_rotation,
        enable_flip: !args.no_flip,
        enable_color_jitter: !args.no_jitter,
    };
    let ds = generate_patches(&img, args.count, args.seed, &cfg)?;
    ds.save(&args.out)?;
    eprintln!(
        "{} patches of {}px from {} (source digest {})",
        ds.len(),
        args.patch_size,
        args.image.display(),
        img.digest_hex()
    );
    println!("{}", ds.content_hash_hex());
    Ok(())
}

fn cmd_dump(args: DumpArgs) -> Result<()> {
    let model = ModelState::load(&args.checkpoint)
        .with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let ds = PatchDataset::load(&args.patches)
        .with_context(|| format!("reading {}", args.patches.display()))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    let rows = dump_embeddings(&model, &ds, &mut out)
        .context("architecture/container mismatch or write failure")?;
    eprintln!("wrote {rows} rows to {}", args.out.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let mut rows = Vec::new();
    for dir in &args.runs {
        let summary = ExperimentSummary::load(dir)
            .with_context(|| format!("no summary.json under {}", dir.display()))?;
        rows.push((dir.clone(), summary));
    }
    println!(
        "{:<24} {:>10} {:>8} {:>14} {:>14} {:>14}",
        "run", "best_acc", "+-", "params_up_B", "logits_up_B", "indices_B"
    );
    for (dir, s) in &rows {
        let (pu, lu, iu) = s.seeds.iter().fold((0u64, 0u64, 0u64), |acc, seed| {
            (
                acc.0 + seed.total_bytes.params_up,
                acc.1 + seed.total_bytes.logits_up,
                acc.2 + seed.total_bytes.indices_down,
            )
        });
        println!(
            "{:<24} {:>10.4} {:>8.4} {:>14} {:>14} {:>14}",
            label_for(dir),
            s.mean_best_macro,
            s.std_best_macro,
            pu,
            lu,
            iu
        );
    }
    Ok(())
}

fn label_for(dir: &Path) -> String {
    dir.file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::GenPatches(args) => cmd_gen_patches(args),
        Command::DumpEmbeddings(args) => cmd_dump(args),
        Command::Compare(args) => cmd_compare(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
