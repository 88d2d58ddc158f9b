use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rlora::checkpoint::{load_checkpoint, read_header};
use rlora::diagnostics::{export_head_vectors, report};
use rlora::experiment::{compare_dirs, run, ExperimentConfig};
use rlora::tasks::TaskSuiteConfig;
use rlora::trainer::evaluate;
use rlora::{Error, Scalar};

#[derive(Parser)]
#[command(name = "rlora", version, about = "Train and analyze low-rank adapter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Generate tasks, build and adapt the backbone, train, and write artifacts.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dotted `key=value` override, e.g. `lora.variant=MultiHead`. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; defaults to `output_dir` or `$RLORA_OUTPUT_ROOT/<name>-<hash>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print per-task and macro metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `recorded` regenerates the suite from the config inside the
        /// checkpoint; otherwise a JSON file holding an experiment config or a
        /// bare tasks section.
        #[arg(long, default_value = "recorded")]
        tasks: String,
    },
    /// Head-similarity report of a multi-head checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write head vectors as JSON lines.
        #[arg(long)]
        export_heads: Option<PathBuf>,
    },
    /// Side-by-side table of finished runs; deltas against the first.
    Compare {
        #[arg(long, num_args = 2.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        format: Format,
    },
    /// Write a config's task suite as `train.jsonl` and `eval.jsonl`.
    ExportTasks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit status per error class.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::NonFiniteLoss { .. } => 3,
        Error::Checkpoint(_) | Error::StructureMismatch(_) => 4,
        Error::NothingToCompare(_) => 5,
        Error::MissingArtifact(_) => 6,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json(v: &impl serde::Serialize) -> rlora::Result<()> {
    emit(&(serde_json::to_string_pretty(v)? + "\n"));
    Ok(())
}

fn dispatch(cmd: Command) -> rlora::Result<()> {
    match cmd {
        Command::Train { config, overrides, out } => {
            let cfg = ExperimentConfig::from_file(&config, &overrides)?;
            let dir = out.unwrap_or_else(|| cfg.default_output_dir());
            let res = run(&cfg, &dir)?;
            eprintln!(
                "{}: {} steps, train loss {:.6} -> {:.6}, eval macro {:.6}",
                dir.display(),
                res.summary.steps,
                res.summary.initial_train_loss,
                res.summary.final_train_loss,
                res.summary.final_eval.macro_avg
            );
            print_json(&res.summary)
        }
        Command::Eval { checkpoint, tasks } => match read_header(&checkpoint)?.0.dtype.as_str() {
            "f64" => eval::<f64>(&checkpoint, &tasks),
            _ => eval::<f32>(&checkpoint, &tasks),
        },
        Command::Analyze {
            checkpoint,
            export_heads,
        } => match read_header(&checkpoint)?.0.dtype.as_str() {
            "f64" => analyze::<f64>(&checkpoint, export_heads.as_deref()),
            _ => analyze::<f32>(&checkpoint, export_heads.as_deref()),
        },
        Command::Compare { runs, format } => {
            let cmp = compare_dirs(&runs)?;
            if matches!(format, Format::Text | Format::Both) {
                emit(&cmp.to_text());
            }
            if matches!(format, Format::Json | Format::Both) {
                print_json(&cmp)?;
            }
            Ok(())
        }
        Command::ExportTasks { config, overrides, out } => {
            let cfg = ExperimentConfig::from_file(&config, &overrides)?;
            let suite = cfg.build_tasks::<f64>()?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            suite.train.write_jsonl(&out.join("train.jsonl"))?;
            suite.eval.write_jsonl(&out.join("eval.jsonl"))?;
            eprintln!("{} train / {} eval examples", suite.train.len(), suite.eval.len());
            Ok(())
        }
    }
}

fn suite_config(checkpoint_cfg: Option<ExperimentConfig>, tasks: &str) -> rlora::Result<ExperimentConfig> {
    let missing = || Error::Config {
        field: "tasks".into(),
        message: "checkpoint carries no experiment config; pass --tasks <file>".into(),
    };
    if tasks == "recorded" {
        return checkpoint_cfg.ok_or_else(missing);
    }
    let text = std::fs::read_to_string(tasks).map_err(|e| Error::Io {
        path: tasks.into(),
        source: e,
    })?;
    if let Ok(cfg) = ExperimentConfig::from_json(&text, &[]) {
        return Ok(cfg);
    }
    let section: TaskSuiteConfig = serde_json::from_str(&text).map_err(|e| Error::Config {
        field: "tasks".into(),
        message: format!("{tasks}: neither an experiment config nor a tasks section: {e}"),
    })?;
    let mut cfg = checkpoint_cfg.ok_or_else(missing)?;
    cfg.tasks = section;
    Ok(cfg)
}

fn eval<T: Scalar>(path: &Path, tasks: &str) -> rlora::Result<()> {
    let ckpt = load_checkpoint::<T>(path)?;
    let recorded = ckpt.experiment.map(ExperimentConfig::from_value).transpose()?;
    let mut cfg = suite_config(recorded, tasks)?;
    cfg.backbone = ckpt.model.backbone().config().clone();
    let suite = cfg.build_tasks::<T>()?;
    print_json(&evaluate(&ckpt.model, &suite.eval)?)
}

fn analyze<T: Scalar>(path: &Path, export: Option<&Path>) -> rlora::Result<()> {
    let ckpt = load_checkpoint::<T>(path)?;
    let seed = ckpt
        .experiment
        .as_ref()
        .and_then(|v| v.get("seed"))
        .and_then(serde_json::Value::as_u64);
    let rep = report(&ckpt.model, seed, ckpt.step)?;
    if let Some(p) = export {
        export_head_vectors(&ckpt.model, p)?;
    }
    print_json(&rep)
}
