//! Command-line entry point wiring the whole pipeline: synthetic benchmark
//! generation, training, evaluation, style probing, causal-oracle checks,
//! and feature export. Every command is reproducible from (config, seed).

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use tdcrl_core::config::{default_run_config, RunConfig};
use tdcrl_core::encoder::SyntheticEncoder;
use tdcrl_core::error::Error;
use tdcrl_core::eval::{evaluate, export_features, style_probe, ExportStage, ProbeConfig};
use tdcrl_core::oracle::run_identity_trials;
use tdcrl_core::scenario::{build_benchmark, read_basis, write_benchmark};
use tdcrl_core::tdeb::EmbeddingTable;
use tdcrl_core::trainer::{load_checkpoint, save_checkpoint, train, TrainMode};
use tdcrl_core::LossGKind;

#[derive(Parser)]
#[command(name = "tdcrl", version, about = "Embedding-space causal representation learning")]
struct Cli {
    /// Configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark: style basis plus train-style and
    /// held-out-style image tables.
    GenSynthetic,
    /// Train the intervention network and classifier.
    Train(TrainArgs),
    /// Evaluate a checkpoint on image tables: accuracy plus invariance
    /// diagnostics.
    Eval(EvalArgs),
    /// Style-classification probe before and after intervention.
    Probe(ProbeArgs),
    /// Verify the backdoor-adjustment identity on random discrete tables.
    Oracle(OracleArgs),
    /// Export raw or intervened features as an embedding table.
    ExportFeatures(ExportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Style basis table (defaults to <out>/style_basis.tdeb).
    #[arg(long)]
    basis: Option<PathBuf>,
    /// Image table for per-epoch accuracy reporting.
    #[arg(long)]
    eval_table: Option<PathBuf>,
    /// Checkpoint destination (defaults to <out>/checkpoint.tdeb).
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    /// Metrics destination, one JSON record per epoch (defaults to
    /// <out>/metrics.jsonl).
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Epoch-count override.
    #[arg(long)]
    epochs: Option<usize>,
    /// Pipeline override: the full objective or the ablation.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Alignment-loss override.
    #[arg(long, value_enum)]
    loss_g: Option<LossArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Tdcrl,
    NoCi,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Infonce,
    L2,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image tables to evaluate (one report per table).
    #[arg(long, required = true, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Report destination (defaults to <out>/report.json).
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    /// Probe report destination (defaults to <out>/probe.json).
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 6)]
    max_classes: usize,
    #[arg(long, default_value_t = 6)]
    max_styles: usize,
    #[arg(long, default_value_t = 6)]
    max_labels: usize,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Destination table (defaults to <out>/features_<stage>.tdeb).
    #[arg(long)]
    out_file: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Raw,
    Intervened,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Format { .. } => 4,
        Error::Numeric(_) => 5,
        Error::Dimension(_)
        | Error::Domain(_)
        | Error::Range(_)
        | Error::DegenerateBatch(_)
        | Error::SingularConditional(_) => 7,
    }
}

const ORACLE_FAIL_CODE: u8 = 6;

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => default_run_config(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("report serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<u8, Error> {
    match &cli.command {
        Command::GenSynthetic => {
            let cfg = load_config(cli)?;
            let bench = build_benchmark(&cfg)?;
            let paths = write_benchmark(&bench, &cli.out)?;
            println!("wrote {}", paths.basis.display());
            println!(
                "wrote {} ({} records)",
                paths.train_images.display(),
                bench.train_images.len()
            );
            println!(
                "wrote {} ({} records)",
                paths.heldout_images.display(),
                bench.heldout_images.len()
            );
            Ok(0)
        }
        Command::Train(args) => {
            let cfg = load_config(cli)?;
            let basis_path = args
                .basis
                .clone()
                .unwrap_or_else(|| cli.out.join("style_basis.tdeb"));
            let basis = read_basis(&basis_path)?;
            let mut tc = cfg.train_config();
            if let Some(epochs) = args.epochs {
                tc.epochs = epochs;
            }
            if let Some(mode) = args.mode {
                tc.mode = match mode {
                    ModeArg::Tdcrl => TrainMode::Tdcrl,
                    ModeArg::NoCi => TrainMode::NoCi,
                };
            }
            if let Some(loss) = args.loss_g {
                tc.loss_g = match loss {
                    LossArg::Infonce => LossGKind::Infonce,
                    LossArg::L2 => LossGKind::L2,
                };
            }
            tc.validate(basis.len())?;
            let encoder = SyntheticEncoder::new(cfg.synthetic.clone(), basis.clone(), tc.seed)?;
            let eval_table = match &args.eval_table {
                Some(p) => Some(EmbeddingTable::read(p)?),
                None => None,
            };

            let (state, trace) = train(&tc, &encoder, &basis, eval_table.as_ref())?;

            std::fs::create_dir_all(&cli.out)?;
            let ckpt_path = args
                .checkpoint_out
                .clone()
                .unwrap_or_else(|| cli.out.join("checkpoint.tdeb"));
            save_checkpoint(&state, &ckpt_path)?;
            let metrics_path = args
                .metrics_out
                .clone()
                .unwrap_or_else(|| cli.out.join("metrics.jsonl"));
            let mut file = std::fs::File::create(&metrics_path)?;
            for record in &trace {
                let line = serde_json::to_string(record)
                    .map_err(|e| Error::Config(format!("metrics serialization: {e}")))?;
                writeln!(file, "{line}")?;
            }
            println!("wrote {}", ckpt_path.display());
            println!("wrote {} ({} epochs)", metrics_path.display(), trace.len());
            if let Some(last) = trace.last() {
                match last.loss_g {
                    Some(lg) => println!(
                        "final losses: classification {:.6}, alignment {:.6}",
                        last.loss_c, lg
                    ),
                    None => println!("final losses: classification {:.6}", last.loss_c),
                }
            }
            Ok(0)
        }
        Command::Eval(args) => {
            let cfg = load_config(cli)?;
            let state = load_checkpoint(&args.checkpoint)?;
            let mut reports = Vec::new();
            for path in &args.images {
                let table = EmbeddingTable::read(path)?;
                if table.is_empty() {
                    return Err(Error::Domain(format!(
                        "evaluation table {} is empty",
                        path.display()
                    )));
                }
                let report = evaluate(&state, &table, cfg.eval.mmd_bandwidth)?;
                println!(
                    "{}: mean accuracy {:.4}, mmd {:.4} -> {:.4}, probe ce {:.4} -> {:.4}",
                    path.display(),
                    report.mean_accuracy,
                    report.mean_mmd_pre,
                    report.mean_mmd_post,
                    report.probe_ce_pre,
                    report.probe_ce_post
                );
                reports.push(serde_json::json!({
                    "table": path.display().to_string(),
                    "report": report,
                }));
            }
            let report_path = args
                .report_out
                .clone()
                .unwrap_or_else(|| cli.out.join("report.json"));
            write_json(&report_path, &reports)?;
            println!("wrote {}", report_path.display());
            Ok(0)
        }
        Command::Probe(args) => {
            let state = load_checkpoint(&args.checkpoint)?;
            let table = EmbeddingTable::read(&args.images)?;
            let domains: Vec<usize> = table
                .records()
                .iter()
                .map(|r| r.style_or_domain_id as usize)
                .collect();
            let pre_features: Vec<Vec<f64>> = table
                .records()
                .iter()
                .map(|r| r.vector.iter().map(|&v| v as f64).collect())
                .collect();
            let post_matrix =
                tdcrl_core::eval::intervened_features(&state.net, &state.dict, &table)?;
            let post_features: Vec<Vec<f64>> =
                (0..table.len()).map(|i| post_matrix.row(i).to_vec()).collect();
            let probe_cfg = ProbeConfig::default();
            let pre = style_probe(&pre_features, &domains, probe_cfg)?;
            let post = style_probe(&post_features, &domains, probe_cfg)?;
            println!("probe ce: raw {pre:.4}, intervened {post:.4}");
            let report_path = args
                .report_out
                .clone()
                .unwrap_or_else(|| cli.out.join("probe.json"));
            write_json(
                &report_path,
                &serde_json::json!({ "probe_ce_pre": pre, "probe_ce_post": post }),
            )?;
            println!("wrote {}", report_path.display());
            Ok(0)
        }
        Command::Oracle(args) => {
            let cfg = load_config(cli)?;
            let summary = run_identity_trials(
                args.trials,
                args.max_classes,
                args.max_styles,
                args.max_labels,
                args.tol,
                cfg.master_seed(),
            )?;
            println!(
                "{}: {} trials, max deviation {:.3e} (tolerance {:.1e})",
                if summary.pass { "PASS" } else { "FAIL" },
                summary.trials,
                summary.max_deviation,
                summary.tolerance
            );
            Ok(if summary.pass { 0 } else { ORACLE_FAIL_CODE })
        }
        Command::ExportFeatures(args) => {
            let state = load_checkpoint(&args.checkpoint)?;
            let table = EmbeddingTable::read(&args.images)?;
            let stage = match args.stage {
                StageArg::Raw => ExportStage::Raw,
                StageArg::Intervened => ExportStage::Intervened,
            };
            let out = export_features(&state, &table, stage)?;
            let out_path = args.out_file.clone().unwrap_or_else(|| {
                cli.out.join(match args.stage {
                    StageArg::Raw => "features_raw.tdeb",
                    StageArg::Intervened => "features_intervened.tdeb",
                })
            });
            if let Some(parent) = out_path.parent() {
                if !parent.as_os_str().is_empty() {
                    std::fs::create_dir_all(parent)?;
                }
            }
            out.write(&out_path)?;
            println!("wrote {} ({} records)", out_path.display(), out.len());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
