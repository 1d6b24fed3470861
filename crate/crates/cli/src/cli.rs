//! Subcommand wiring: argument parsing, config loading, and the text/file
//! output of each command.
//!
//! Exit codes: 0 success (including --help/--version), 1 usage errors caught
//! by the argument parser, 2 anything that fails after parsing (bad config,
//! unreadable or mismatched files, invalid method/shift strings, runtime
//! failures).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use ttn_lab::adaptation::{
    channel_sensitivity_ranking, hybrid_forward_with, hybrid_random_scores_with,
    hybrid_ttn_predict_with, layer_limited_ttn, predict_with_method, top_fraction_overlap,
    AdaptationPlan, ClassPrior, HybridConfig, MethodId,
};
use ttn_lab::data::{corrupt, sample_label_shift, synth_dataset_with, LabeledDataset};
use ttn_lab::model::ModelCheckpoint;
use ttn_lab::rng::derive_seed_indexed;
use ttn_lab::scoring::{compute_score_table, load_score_table, save_score_table, ScoreTable};
use ttn_lab::tensor::Tensor;
use ttn_lab::train::{accuracy, train};
use ttn_lab::{Error, Result};

use crate::config::{parse_grid_corruption, GridShift, LabConfig};
use crate::grid::{run_grid, GridPlan};
use crate::report::{format_sig6, load_report, median_rank, save_report};

#[derive(Parser)]
#[command(
    name = "ttnlab",
    version,
    about = "Train a small CNN and study test-time batch-norm adaptation under label shift"
)]
struct Cli {
    /// Config file; omitted means the built-in defaults (configs/default.conf).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for batch sampling, corruption noise, and stochastic methods.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model on the configured synthetic dataset.
    Train {
        /// Checkpoint output path.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Parameter initialization seed.
        #[arg(long, default_value_t = 42)]
        init_seed: u64,
    },
    /// Build the per-class channel sensitivity table for a checkpoint.
    Score {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Score table output path.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Classify one sampled batch with a chosen adaptation method.
    Adapt {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Score table; required by the hybrid methods.
        #[arg(long, value_name = "FILE")]
        scores: Option<PathBuf>,
        /// source, ttn, hybrid_ttn, hybrid_uniform, hybrid_oracle,
        /// hybrid_random_scores, or layer_limited_ttn_<k>.
        #[arg(long, default_value = "hybrid_ttn")]
        method: String,
        /// balanced, nclass:<n>, or dirichlet:<alpha>.
        #[arg(long, default_value = "nclass:1")]
        shift: String,
        /// none or <kind>:<severity>.
        #[arg(long, default_value = "none")]
        corruption: String,
        /// Overrides [eval] batch_size.
        #[arg(long)]
        batch_size: Option<usize>,
        /// Write the realized per-layer adaptation masks as JSON.
        #[arg(long, value_name = "FILE")]
        mask_dump: Option<PathBuf>,
    },
    /// Evaluate the configured method set across the corruption x shift grid.
    EvalGrid {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        scores: Option<PathBuf>,
        /// Report output path, .csv or .json.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Overrides [eval] repeats.
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Sweep the depth cutoff of batch-stat adaptation: layers 1..k adapt,
    /// the rest keep source statistics.
    AnalyzeLayers {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "nclass:1")]
        shift: String,
        #[arg(long, default_value = "none")]
        corruption: String,
        #[arg(long)]
        repeats: Option<usize>,
        /// Optional CSV output; the table always prints to stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Per-layer overlap of the most shift-sensitive channels between two
    /// batch compositions.
    AnalyzeOverlap {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "nclass:1")]
        shift_a: String,
        #[arg(long, default_value = "balanced")]
        shift_b: String,
        /// Top fraction of channels to compare, in (0, 1].
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Median accuracy rank of each method across the scenarios of a report.
    Rank {
        /// Report file written by eval-grid (.csv or .json).
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
        /// Optional CSV output; the table always prints to stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<LabConfig> {
    match path {
        None => Ok(LabConfig::default_config()),
        Some(p) => LabConfig::load(p),
    }
}

fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    ttn_lab::checkpoint::load_checkpoint(path)
}

fn load_table(path: &Path, model: &ModelCheckpoint) -> Result<ScoreTable> {
    load_score_table(path, Some(model))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

/// Samples one shifted (and optionally corrupted) batch from the held-out pool.
fn sample_flag_batch(
    cfg: &LabConfig,
    pool: &LabeledDataset,
    shift: &str,
    corruption: &str,
    batch_size: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>, String)> {
    let shift = GridShift::parse(shift)?;
    let spec = shift.to_spec(pool.class_count, derive_seed_indexed(seed, "adapt_shift", 0));
    let (clean, labels) = sample_label_shift(pool, &spec, batch_size)?;
    let corruption = parse_grid_corruption(corruption)?;
    let (batch, desc) = match corruption {
        None => (clean, format!("shift={shift} corruption=none")),
        Some(c) => (
            corrupt(&clean, &c, &cfg.corruptions, derive_seed_indexed(seed, "adapt_corrupt", 0))?,
            format!("shift={shift} corruption={}:{}", c.kind.name(), c.severity),
        ),
    };
    Ok((batch, labels, desc))
}

fn hybrid_config(cfg: &LabConfig) -> HybridConfig {
    HybridConfig { depth_rule: cfg.adapt.depth_rule, fraction_override: None, soft_prior: cfg.adapt.soft_prior }
}

/// Runs a hybrid-family method and returns its realized plan for auditing.
fn predict_with_plan(
    model: &ModelCheckpoint,
    batch: &Tensor,
    table: Option<&ScoreTable>,
    method: MethodId,
    labels: &[usize],
    config: &HybridConfig,
    seed: u64,
) -> Result<(Vec<usize>, AdaptationPlan)> {
    let need_table = || {
        table.ok_or_else(|| Error::InvalidArgument(format!("method {method} needs a score table")))
    };
    match method {
        MethodId::HybridTtn => {
            let t = need_table()?;
            let (_, _, prior) = hybrid_ttn_predict_with(model, batch, t, config)?;
            hybrid_forward_with(model, batch, t, &prior, config)
        }
        MethodId::HybridUniform => {
            let t = need_table()?;
            let uniform = ClassPrior::uniform(t.class_count())?;
            hybrid_forward_with(model, batch, t, &uniform, config)
        }
        MethodId::HybridOracle => {
            let t = need_table()?;
            let prior = ClassPrior::from_labels(labels, t.class_count())?;
            hybrid_forward_with(model, batch, t, &prior, config)
        }
        MethodId::HybridRandomScores => hybrid_random_scores_with(model, batch, seed, config),
        other => Err(Error::InvalidArgument(format!(
            "method {other} has no adaptation plan to dump"
        ))),
    }
}

fn mask_dump_json(method: MethodId, plan: &AdaptationPlan) -> String {
    let layers: Vec<serde_json::Value> = plan
        .masks
        .iter()
        .enumerate()
        .map(|(k, mask)| {
            let bits: Vec<u8> = mask.bits().iter().map(|b| u8::from(*b)).collect();
            serde_json::json!({
                "layer": k,
                "channels": mask.len(),
                "adapted": mask.len() - mask.kept_count(),
                "kept_at_source": mask.kept_count(),
                "excluded_fraction": plan.fractions[k],
                "bits": bits,
            })
        })
        .collect();
    let value = serde_json::json!({
        "method": method.to_string(),
        "prior": plan.prior.probs(),
        "layers": layers,
    });
    serde_json::to_string_pretty(&value).expect("mask dump serializes")
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config)?;
    let seed = cli.seed;
    match cli.command {
        Command::Train { out, init_seed } => {
            let dataset = synth_dataset_with(&cfg.dataset.train_spec())?;
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = seed;
            println!(
                "training on {} samples ({} classes, {}x{}x{}), {} epochs",
                dataset.len(),
                dataset.class_count,
                cfg.dataset.channels,
                cfg.dataset.image_size,
                cfg.dataset.image_size,
                train_cfg.epochs
            );
            let outcome = train(&dataset, &cfg.arch, init_seed, &train_cfg)?;
            for (i, loss) in outcome.epoch_losses.iter().enumerate() {
                println!("epoch {:>3}: loss {}", i + 1, format_sig6(*loss));
            }
            ttn_lab::checkpoint::save_checkpoint(&outcome.model, &out)?;
            println!("train accuracy {}", format_sig6(outcome.train_accuracy));
            println!("wrote checkpoint to {}", out.display());
            Ok(())
        }
        Command::Score { checkpoint, out } => {
            let model = load_model(&checkpoint)?;
            let dataset = synth_dataset_with(&cfg.dataset.train_spec())?;
            let table = compute_score_table(&model, &dataset, cfg.score.per_class_cap, seed)?;
            save_score_table(&table, &out)?;
            println!(
                "score table: {} classes x {} BN layers, per-class counts {:?}",
                table.class_count(),
                table.bn_layer_count(),
                table.per_class_counts()
            );
            println!("wrote scores to {}", out.display());
            Ok(())
        }
        Command::Adapt { checkpoint, scores, method, shift, corruption, batch_size, mask_dump } => {
            let model = load_model(&checkpoint)?;
            let table = scores.as_deref().map(|p| load_table(p, &model)).transpose()?;
            let method = MethodId::parse(&method)?;
            let pool = synth_dataset_with(&cfg.dataset.eval_spec())?;
            let batch_size = batch_size.unwrap_or(cfg.eval.batch_size);
            let (batch, labels, desc) =
                sample_flag_batch(&cfg, &pool, &shift, &corruption, batch_size, seed)?;
            let config = hybrid_config(&cfg);

            let preds = match &mask_dump {
                Some(path) => {
                    let (preds, plan) =
                        predict_with_plan(&model, &batch, table.as_ref(), method, &labels, &config, seed)?;
                    write_text(path, &mask_dump_json(method, &plan))?;
                    println!("wrote adaptation masks to {}", path.display());
                    preds
                }
                None => predict_with_method(&model, &batch, table.as_ref(), method, Some(&labels), seed)?,
            };
            let source_preds =
                predict_with_method(&model, &batch, table.as_ref(), MethodId::Source, Some(&labels), seed)?;
            let acc = accuracy(&preds, &labels)?;
            let source_acc = accuracy(&source_preds, &labels)?;
            println!("{desc} batch={batch_size}");
            println!(
                "method {method}: accuracy {} (source {}, delta {})",
                format_sig6(acc),
                format_sig6(source_acc),
                format_sig6(acc - source_acc)
            );
            Ok(())
        }
        Command::EvalGrid { checkpoint, scores, out, repeats } => {
            let model = load_model(&checkpoint)?;
            let table = scores.as_deref().map(|p| load_table(p, &model)).transpose()?;
            let needs_table = cfg.grid.methods.iter().any(|m| {
                matches!(
                    m,
                    MethodId::HybridTtn | MethodId::HybridUniform | MethodId::HybridOracle
                )
            });
            if needs_table && table.is_none() {
                return Err(Error::InvalidArgument(
                    "the configured grid includes hybrid methods; pass --scores".into(),
                ));
            }
            let plan = GridPlan::from_lists(
                &cfg.grid.corruptions,
                &cfg.grid.shifts,
                &cfg.grid.methods,
                cfg.eval.batch_size,
                repeats.unwrap_or(cfg.eval.repeats),
                seed,
            )?;
            let pool = synth_dataset_with(&cfg.dataset.eval_spec())?;
            println!(
                "grid: {} scenarios x {} repeats x {} methods, batch {}",
                plan.scenarios.len(),
                plan.repeats,
                plan.methods.len(),
                plan.batch_size
            );
            let report = run_grid(&model, table.as_ref(), &plan, &pool, &cfg.corruptions)?;
            save_report(&report, &out)?;
            // Per-method mean accuracy across all cells, for a quick read.
            for method in &plan.methods {
                let accs: Vec<f64> = report
                    .rows
                    .iter()
                    .filter(|r| r.method == *method)
                    .map(|r| r.accuracy)
                    .collect();
                let mean = accs.iter().sum::<f64>() / accs.len() as f64;
                println!("  {:<22} mean accuracy {}", method.to_string(), format_sig6(mean));
            }
            println!("wrote {} rows to {}", report.rows.len(), out.display());
            Ok(())
        }
        Command::AnalyzeLayers { checkpoint, shift, corruption, repeats, out } => {
            let model = load_model(&checkpoint)?;
            let pool = synth_dataset_with(&cfg.dataset.eval_spec())?;
            let repeats = repeats.unwrap_or(cfg.eval.repeats).max(1);
            let shift_parsed = GridShift::parse(&shift)?;
            let corruption_parsed = parse_grid_corruption(&corruption)?;
            let mut batches = Vec::with_capacity(repeats);
            for r in 0..repeats {
                let spec =
                    shift_parsed.to_spec(pool.class_count, derive_seed_indexed(seed, "layers_shift", r));
                let (clean, labels) = sample_label_shift(&pool, &spec, cfg.eval.batch_size)?;
                let batch = match &corruption_parsed {
                    None => clean,
                    Some(c) => {
                        corrupt(&clean, c, &cfg.corruptions, derive_seed_indexed(seed, "layers_corrupt", r))?
                    }
                };
                batches.push((batch, labels));
            }
            let k_count = model.bn_layer_count();
            let mut lines = vec!["layers_adapted,mean_accuracy".to_string()];
            println!("shift={shift} corruption={corruption} repeats={repeats}");
            println!("{:>14}  {}", "layers_adapted", "mean_accuracy");
            for up_to in 0..=k_count {
                let mut sum = 0.0;
                for (batch, labels) in &batches {
                    let preds = layer_limited_ttn(&model, batch, up_to)?;
                    sum += accuracy(&preds, labels)?;
                }
                let mean = sum / repeats as f64;
                println!("{up_to:>14}  {}", format_sig6(mean));
                lines.push(format!("{up_to},{}", format_sig6(mean)));
            }
            if let Some(path) = out {
                write_text(&path, &(lines.join("\n") + "\n"))?;
                println!("wrote sweep to {}", path.display());
            }
            Ok(())
        }
        Command::AnalyzeOverlap { checkpoint, shift_a, shift_b, fraction, repeats, out } => {
            let model = load_model(&checkpoint)?;
            let pool = synth_dataset_with(&cfg.dataset.eval_spec())?;
            let repeats = repeats.unwrap_or(cfg.eval.repeats).max(1);
            let a = GridShift::parse(&shift_a)?;
            let b = GridShift::parse(&shift_b)?;
            let k_count = model.bn_layer_count();
            let mut sums = vec![0.0f64; k_count];
            for r in 0..repeats {
                let spec_a = a.to_spec(pool.class_count, derive_seed_indexed(seed, "overlap_a", r));
                let spec_b = b.to_spec(pool.class_count, derive_seed_indexed(seed, "overlap_b", r));
                let (batch_a, _) = sample_label_shift(&pool, &spec_a, cfg.eval.batch_size)?;
                let (batch_b, _) = sample_label_shift(&pool, &spec_b, cfg.eval.batch_size)?;
                let rank_a = channel_sensitivity_ranking(&model, &batch_a)?;
                let rank_b = channel_sensitivity_ranking(&model, &batch_b)?;
                for (k, overlap) in top_fraction_overlap(&rank_a, &rank_b, fraction)?.iter().enumerate() {
                    sums[k] += overlap;
                }
            }
            let channels = model.bn_channel_counts();
            let mut lines = vec!["layer,channels,mean_overlap".to_string()];
            println!("shift_a={shift_a} shift_b={shift_b} fraction={fraction} repeats={repeats}");
            println!("{:>5}  {:>8}  {}", "layer", "channels", "mean_overlap");
            for k in 0..k_count {
                let mean = sums[k] / repeats as f64;
                println!("{k:>5}  {:>8}  {}", channels[k], format_sig6(mean));
                lines.push(format!("{k},{},{}", channels[k], format_sig6(mean)));
            }
            if let Some(path) = out {
                write_text(&path, &(lines.join("\n") + "\n"))?;
                println!("wrote overlaps to {}", path.display());
            }
            Ok(())
        }
        Command::Rank { report, out } => {
            let parsed = load_report(&report)?;
            let table = median_rank(&parsed)?;
            println!(
                "{} scenarios, {} methods ({} rows)",
                table.scenario_count,
                table.rows.len(),
                parsed.rows.len()
            );
            println!("{:<22} {:>11}  {}", "method", "median_rank", "mean_accuracy");
            let mut lines = vec!["method,median_rank,mean_accuracy".to_string()];
            for row in &table.rows {
                println!(
                    "{:<22} {:>11}  {}",
                    row.method.to_string(),
                    format_sig6(row.median_rank),
                    format_sig6(row.mean_accuracy)
                );
                lines.push(format!(
                    "{},{},{}",
                    row.method,
                    format_sig6(row.median_rank),
                    format_sig6(row.mean_accuracy)
                ));
            }
            if let Some(path) = out {
                write_text(&path, &(lines.join("\n") + "\n"))?;
                println!("wrote ranks to {}", path.display());
            }
            Ok(())
        }
    }
}
