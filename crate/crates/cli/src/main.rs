//! Command-line driver: dataset generation, pretraining, evaluation,
//! similarity analysis, the loss-by-seed matrix and the self-check suite.
//!
//! Every subcommand validates its inputs, echoes the resolved configuration
//! into the output directory and is idempotent given identical inputs.

mod config;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sicl_core::harness::{self, EncoderStack, MatrixSpec, RunConfig};
use sicl_core::losses::{self, Temperature};
use sicl_core::model;
use sicl_core::synthgen::{self, DatasetManifest, SensorWindow};
use sicl_core::verify;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "sicl",
    version,
    about = "Subject-invariant contrastive learning lab on a synthetic multi-subject benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long)]
    out: PathBuf,
    /// Dotted-key override, e.g. --set world.noise_sigma=0.2 (repeatable;
    /// wins over file values).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset container and its manifest.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Contrastively pretrain encoders on the train-subject windows.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset container produced by `gen`.
        #[arg(long)]
        dataset: PathBuf,
        /// Also dump per-anchor subject-decomposition diagnostics
        /// (anchor_debug.csv) for one batch of trained embeddings.
        #[arg(long)]
        debug_anchors: bool,
    },
    /// Train a linear head on frozen representations and score it on the
    /// held-out subjects.
    LinearEval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Finetune encoder and head jointly; starts from random weights when no
    /// checkpoint is given.
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Cosine-similarity distribution analysis of a checkpoint over the
    /// dataset's held-out subjects (all windows if no manifest is found).
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the losses-by-seeds comparison matrix.
    Matrix {
        #[command(flatten)]
        common: CommonArgs,
        /// Parallel cells.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the oracle, gradient, reduction-lattice and determinism suite;
    /// exit code 0 iff everything passes.
    Verify,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Gen { common } => gen(&common),
        Command::Pretrain {
            common,
            dataset,
            debug_anchors,
        } => pretrain(&common, &dataset, debug_anchors),
        Command::LinearEval {
            common,
            checkpoint,
            dataset,
        } => linear_eval(&common, &checkpoint, &dataset),
        Command::Finetune {
            common,
            checkpoint,
            dataset,
        } => finetune(&common, checkpoint.as_deref(), &dataset),
        Command::Analyze {
            checkpoint,
            dataset,
            out,
            seed,
        } => analyze(&checkpoint, &dataset, &out, seed),
        Command::Matrix { common, jobs } => matrix(&common, jobs),
        Command::Verify => run_verify(),
    }
}

fn prepare(common: &CommonArgs) -> Result<config::ConfigFile> {
    let file = config::load(common.config.as_deref(), &common.overrides, common.seed)?;
    file.run
        .validate()
        .context("invalid run configuration")?;
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating output directory {}", common.out.display()))?;
    let echo = serde_json::to_string_pretty(&file)?;
    fs::write(common.out.join("config_echo.json"), echo)?;
    Ok(file)
}

fn read_windows(path: &Path) -> Result<Vec<SensorWindow>> {
    let file = fs::File::open(path)
        .with_context(|| format!("opening dataset container {}", path.display()))?;
    synthgen::read_dataset(std::io::BufReader::new(file))
        .with_context(|| format!("reading dataset container {}", path.display()))
}

fn read_stack(path: &Path) -> Result<EncoderStack> {
    let entries = model::load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    EncoderStack::from_checkpoint(&entries).context("decoding checkpoint tensors")
}

fn gen(common: &CommonArgs) -> Result<()> {
    let file = prepare(common)?;
    let config = &file.run;
    let windows = synthgen::generate(&config.world)?;
    let container = common.out.join("dataset.sicl");
    let out = fs::File::create(&container)?;
    let mut writer = std::io::BufWriter::new(out);
    synthgen::write_dataset(&mut writer, &windows)?;
    use std::io::Write as _;
    writer.flush()?;
    let manifest = DatasetManifest {
        window_count: windows.len(),
        num_subjects: config.world.num_subjects,
        num_activities: config.world.num_activities,
        t_steps: synthgen::T_STEPS,
        world: config.world.clone(),
        train_subjects: config.split.train_subjects.clone(),
        test_subjects: config.split.test_subjects.clone(),
    };
    fs::write(
        common.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    log::info!(
        "wrote {} windows to {}",
        windows.len(),
        container.display()
    );
    Ok(())
}

fn pretrain(common: &CommonArgs, dataset: &Path, debug_anchors: bool) -> Result<()> {
    let file = prepare(common)?;
    let config = &file.run;
    let windows = read_windows(dataset)?;
    let output = harness::pretrain(config, &windows)?;
    let entries = output.encoders.checkpoint_entries();
    model::save_checkpoint(common.out.join("checkpoint.sickpt"), &entries)?;
    fs::write(
        common.out.join("loss_curve.csv"),
        harness::curve_csv(&output.loss_curve),
    )?;
    if debug_anchors {
        let csv = anchor_debug_csv(config, &output.encoders, &windows)?;
        fs::write(common.out.join("anchor_debug.csv"), csv)?;
    }
    log::info!(
        "pretrained {} for {} epochs; final mean loss {:.4}",
        config.loss,
        config.pretrain_epochs,
        output.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Per-anchor {p, Q, loss} diagnostics of the subject decomposition over one
/// batch of trained train-split embeddings, consecutive windows paired.
fn anchor_debug_csv(
    config: &RunConfig,
    stack: &EncoderStack,
    windows: &[SensorWindow],
) -> Result<String> {
    let (train, _) = synthgen::split(
        windows,
        &config.split.train_set(),
        &config.split.test_set(),
    )?;
    let (z, subjects) = harness::primary_embeddings(stack, &train)?;
    let n = (subjects.len().min(config.batch_size) / 2) * 2;
    if n < 4 {
        bail!("debug anchors: need at least 4 windows");
    }
    let d = z.shape()[1];
    let z = sicl_core::numerics::Tensor::from_vec(vec![n, d], z.data()[..n * d].to_vec())?;
    let pairing: Vec<usize> = (0..n).map(|i| if i % 2 == 0 { i + 1 } else { i - 1 }).collect();
    let batch =
        losses::EmbeddingBatch::new(z, subjects[..n].to_vec(), None, Some(pairing))?;
    let diags = losses::sicl_diagnostics(&batch, Temperature::new(config.tau)?)?;
    Ok(harness::anchor_diagnostics_csv(&diags))
}

fn linear_eval(common: &CommonArgs, checkpoint: &Path, dataset: &Path) -> Result<()> {
    let file = prepare(common)?;
    let config = &file.run;
    let stack = read_stack(checkpoint)?;
    let windows = read_windows(dataset)?;
    let report = harness::linear_eval(&stack, config, &windows)?;
    fs::write(
        common.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    log::info!(
        "linear eval: mean class accuracy {:.4}, similarity gap {:.4}",
        report.mean_class_accuracy,
        report.sim_stats.gap
    );
    Ok(())
}

fn finetune(common: &CommonArgs, checkpoint: Option<&Path>, dataset: &Path) -> Result<()> {
    let file = prepare(common)?;
    let config = &file.run;
    let stack = checkpoint.map(read_stack).transpose()?;
    let windows = read_windows(dataset)?;
    let report = harness::finetune(stack.as_ref(), config, &windows)?;
    fs::write(
        common.out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    log::info!(
        "finetune ({} init): mean class accuracy {:.4}",
        if stack.is_some() { "pretrained" } else { "random" },
        report.mean_class_accuracy
    );
    Ok(())
}

fn analyze(checkpoint: &Path, dataset: &Path, out: &Path, seed: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    let stack = read_stack(checkpoint)?;
    let windows = read_windows(dataset)?;
    // restrict to held-out subjects when the sibling manifest is available
    let manifest_path = dataset.with_file_name("manifest.json");
    let windows = match fs::read(&manifest_path) {
        Ok(bytes) => {
            let manifest: DatasetManifest = serde_json::from_slice(&bytes)
                .with_context(|| format!("parsing {}", manifest_path.display()))?;
            let test: std::collections::BTreeSet<u16> =
                manifest.test_subjects.iter().copied().collect();
            windows
                .into_iter()
                .filter(|w| test.contains(&w.subject_id))
                .collect()
        }
        Err(_) => windows,
    };
    let analysis = harness::analyze_similarities(&stack, &windows, seed)?;
    fs::write(
        out.join("sim_stats.json"),
        serde_json::to_string_pretty(&analysis)?,
    )?;
    fs::write(out.join("histogram.csv"), harness::histogram_csv(&analysis))?;
    fs::write(
        out.join("analyze_echo.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "checkpoint": checkpoint.display().to_string(),
            "dataset": dataset.display().to_string(),
            "seed": seed,
        }))?,
    )?;
    log::info!(
        "similarity gap {:.4} over {} pairs ({} intra-subject)",
        analysis.stats.gap,
        analysis.pairs_all,
        analysis.pairs_intra
    );
    Ok(())
}

fn matrix(common: &CommonArgs, jobs: usize) -> Result<()> {
    let file = prepare(common)?;
    let spec = MatrixSpec {
        base: file.run.clone(),
        losses: file.matrix.losses.clone(),
        seeds: file.matrix.seeds_for(file.run.seed),
    };
    let outcomes = harness::run_matrix(&spec, jobs);
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for (loss, seed, outcome) in outcomes {
        match outcome {
            Ok(cell) => cells.push(cell),
            Err(e) => {
                log::error!("cell ({loss}, {seed}) failed: {e}");
                failures.push((loss, seed, e));
            }
        }
    }
    fs::write(
        common.out.join("comparison.csv"),
        harness::comparison_csv(&cells),
    )?;
    for cell in &cells {
        fs::write(
            common.out.join(format!("report_{}_{}.json", cell.loss, cell.seed)),
            serde_json::to_string_pretty(&cell.report)?,
        )?;
    }
    if !failures.is_empty() {
        bail!("{} matrix cells failed", failures.len());
    }
    Ok(())
}

fn run_verify() -> Result<()> {
    let report = verify::verify_all();
    print!("{}", report.render());
    if report.all_passed() {
        Ok(())
    } else {
        bail!("verification failed");
    }
}
