//! Experiment configs and the tasks → backbone → adapters → train pipeline.
//!
//! Every module draws from its own stream: `derive_seed(seed, module, "")` for
//! `backbone`, `adapters`, `tasks` and `trainer`, unless the nested config pins
//! its own seed. Adapter sites further derive per site.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{InitScheme, LoraConfig, Variant};
use crate::backbone::{inject_adapters, AdaptedModel, Backbone, BackboneConfig, BackboneKind};
use crate::checkpoint::save_checkpoint;
use crate::diagnostics::{report, SimilarityReport};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::scalar::Scalar;
use crate::tasks::{TaskKind, TaskSuite, TaskSuiteConfig};
use crate::trainer::{evaluate, train_with, EvalMetrics, TrainConfig, CSV_HEADER};

pub const OUTPUT_ROOT_ENV: &str = "RLORA_OUTPUT_ROOT";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SIMILARITY_FILE: &str = "similarity.json";
pub const SIMILARITY_CSV_FILE: &str = "similarity.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";
pub const META_FILE: &str = "run_meta.json";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dtype: Dtype,
    pub backbone: BackboneConfig,
    pub lora: LoraConfig,
    /// Adapted sites; every site of the backbone when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<String>>,
    #[serde(default)]
    pub train: TrainConfig,
    pub tasks: TaskSuiteConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Sets `key.path = value` in a JSON document. `value` is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(doc: &mut serde_json::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key.path=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::config(key, "empty path segment"));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(parts[..i].join("."), "is not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}

impl ExperimentConfig {
    pub fn from_value(doc: serde_json::Value) -> Result<Self> {
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let field = e.path().to_string();
            Error::config(if field == "." { "<root>".into() } else { field }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config("<root>", format!("not valid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_value(doc)
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.lora.validate()?;
        self.train.validate()?;
        let valid = self.backbone.site_names();
        if let Some(targets) = &self.targets {
            for t in targets {
                if !valid.contains(t) {
                    return Err(Error::config("targets", format!("unknown site `{t}`; valid: {valid:?}")));
                }
            }
        }
        match (self.tasks.kind, self.backbone.kind) {
            (TaskKind::TeacherRegression, BackboneKind::Mlp) | (TaskKind::SequenceClassify, BackboneKind::TinyTransformer) => {
                Ok(())
            }
            (kind, bb) => Err(Error::config("tasks.kind", format!("{kind:?} cannot run on a {bb:?} backbone"))),
        }
    }

    pub fn targets(&self) -> Vec<String> {
        self.targets.clone().unwrap_or_else(|| self.backbone.site_names())
    }

    /// Copy with every module seed made explicit and the output dir removed,
    /// i.e. exactly what determines a run's outputs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.output_dir = None;
        c.backbone.seed.get_or_insert(derive_seed(self.seed, "backbone", ""));
        c.lora.seed.get_or_insert(derive_seed(self.seed, "adapters", ""));
        c.tasks.seed.get_or_insert(derive_seed(self.seed, "tasks", ""));
        c.train.seed.get_or_insert(derive_seed(self.seed, "trainer", ""));
        c.targets = Some(self.targets());
        c
    }

    /// Hex SHA-256 of the resolved config's JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.resolved()).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `output_dir`, else `$RLORA_OUTPUT_ROOT` (or `runs`) / `<name>-<hash12>`.
    pub fn default_output_dir(&self) -> PathBuf {
        if let Some(d) = &self.output_dir {
            return d.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(format!("{}-{}", self.name.as_deref().unwrap_or("run"), &self.hash()[..12]))
    }

    pub fn build_model<T: Scalar>(&self) -> Result<AdaptedModel<T>> {
        let r = self.resolved();
        let backbone = Backbone::build(&r.backbone, &mut Rng::new(r.backbone.seed.expect("resolved")))?;
        inject_adapters(backbone, &r.lora, &r.targets())
    }

    pub fn build_tasks<T: Scalar>(&self) -> Result<TaskSuite<T>> {
        let r = self.resolved();
        r.tasks
            .generate(&r.backbone, &mut Rng::new(r.tasks.seed.expect("resolved")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintRow {
    pub multi_head_mask_elements: usize,
    pub input_mask_elements: usize,
    pub ratio: f64,
    /// Which mask the configuration actually draws.
    pub active: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub variant: Variant,
    pub init_scheme: InitScheme,
    pub multi_head_dropout: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub trainable_params: usize,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub step1_grad_norm: f64,
    pub initial_eval: EvalMetrics,
    pub final_eval: EvalMetrics,
    pub overall_similarity: Option<f64>,
    pub footprint: BTreeMap<String, FootprintRow>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunMeta {
    config_hash: String,
    output_dir: PathBuf,
    started_unix: f64,
    finished_unix: f64,
    version: String,
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Outcome of [`run`]: the summary plus the trained model's similarity report.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub similarity: Option<SimilarityReport>,
}

/// Runs an experiment into `dir`, writing checkpoint, metrics CSV, similarity
/// report, eval metrics, summary, resolved config and a timestamped sidecar.
pub fn run(config: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    match config.dtype {
        Dtype::F32 => run_typed::<f32>(config, dir),
        Dtype::F64 => run_typed::<f64>(config, dir),
    }
}

fn run_typed<T: Scalar>(config: &ExperimentConfig, dir: &Path) -> Result<RunOutput> {
    config.validate()?;
    let started = now();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let _lock = Lock::acquire(dir)?;
    let resolved = config.resolved();
    let hash = config.hash();

    let suite = config.build_tasks::<T>()?;
    let mut model = config.build_model::<T>()?;
    let initial_eval = evaluate(&model, &suite.eval)?;

    let metrics_path = dir.join(METRICS_FILE);
    let mut csv = std::io::BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);
    writeln!(csv, "{CSV_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    let log = train_with(&mut model, &suite.train, Some(&suite.eval), &resolved.train, |rec| {
        csv.write_all(rec.csv_rows().as_bytes())
            .and_then(|_| csv.flush())
            .map_err(|e| Error::io(&metrics_path, e))
    })?;
    drop(csv);

    let steps = log.steps.len();
    let snapshot = serde_json::to_value(&resolved)?;
    save_checkpoint(&model, steps as u64, Some(&snapshot), &dir.join(CHECKPOINT_FILE))?;

    let similarity = if resolved.lora.variant.is_multi_head() && resolved.lora.n_heads >= 2 {
        let rep = report(&model, Some(resolved.seed), steps as u64)?;
        write_json(&dir.join(SIMILARITY_FILE), &rep)?;
        let p = dir.join(SIMILARITY_CSV_FILE);
        fs::write(&p, rep.summary_csv()).map_err(|e| Error::io(&p, e))?;
        Some(rep)
    } else {
        None
    };

    let final_eval = log
        .evals
        .last()
        .map(|e| e.metrics.clone())
        .expect("train always evaluates at the end");
    write_json(&dir.join(EVAL_FILE), &final_eval)?;

    let mhd = resolved.lora.uses_multi_head_dropout();
    let footprint = model
        .adapters()
        .iter()
        .map(|(site, a)| {
            let f = a.mask_footprint(resolved.train.batch_size);
            let row = FootprintRow {
                multi_head_mask_elements: f.multi_head,
                input_mask_elements: f.input,
                ratio: f.ratio(),
                active: if mhd { "multi_head" } else { "input" }.into(),
            };
            (site.clone(), row)
        })
        .collect();
    let summary = RunSummary {
        config_hash: hash.clone(),
        variant: resolved.lora.variant,
        init_scheme: resolved.lora.init(),
        multi_head_dropout: mhd,
        steps,
        batch_size: resolved.train.batch_size,
        trainable_params: model.trainable_count(),
        initial_train_loss: log.initial_loss().unwrap_or(f64::NAN),
        final_train_loss: log.final_loss().unwrap_or(f64::NAN),
        step1_grad_norm: log.steps.first().map_or(f64::NAN, |s| s.grad_norm),
        initial_eval,
        final_eval,
        overall_similarity: similarity.as_ref().and_then(|r| r.overall_off_diagonal_mean),
        footprint,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    write_json(&dir.join(CONFIG_FILE), &resolved)?;
    write_json(
        &dir.join(META_FILE),
        &RunMeta {
            config_hash: hash,
            output_dir: dir.to_path_buf(),
            started_unix: started,
            finished_unix: now(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    )?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        summary,
        similarity,
    })
}

/// Artifacts of a finished run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub summary: RunSummary,
    pub similarity: Option<SimilarityReport>,
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    if !path.is_file() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

impl RunArtifacts {
    pub fn load(dir: &Path) -> Result<Self> {
        let metrics = dir.join(METRICS_FILE);
        if !metrics.is_file() {
            return Err(Error::MissingArtifact(metrics));
        }
        let config: ExperimentConfig = read_json(&dir.join(CONFIG_FILE))?;
        let summary: RunSummary = read_json(&dir.join(SUMMARY_FILE))?;
        let sim_path = dir.join(SIMILARITY_FILE);
        let similarity = if config.lora.variant.is_multi_head() && config.lora.n_heads >= 2 {
            Some(read_json(&sim_path)?)
        } else {
            None
        };
        Ok(RunArtifacts {
            dir: dir.to_path_buf(),
            config,
            summary,
            similarity,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub dir: PathBuf,
    pub config_hash: String,
    pub variant: Variant,
    pub init_scheme: InitScheme,
    pub multi_head_dropout: bool,
    pub final_train_loss: f64,
    pub eval_metric: crate::trainer::MetricKind,
    pub per_task: BTreeMap<usize, f64>,
    pub macro_metric: f64,
    pub overall_similarity: Option<f64>,
    pub footprint: BTreeMap<String, FootprintRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDelta {
    pub dir: PathBuf,
    pub final_train_loss: f64,
    pub macro_metric: f64,
    pub per_task: BTreeMap<usize, f64>,
    pub similarity: Option<crate::diagnostics::ComparisonSummary>,
}

/// Side-by-side view of runs; deltas are each run minus the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: Vec<RunRow>,
    pub deltas: Vec<RunDelta>,
    pub distinct_config_hashes: usize,
}

pub fn compare_dirs(dirs: &[PathBuf]) -> Result<Comparison> {
    if dirs.len() < 2 {
        return Err(Error::NothingToCompare("compare needs at least two run directories".into()));
    }
    let runs = dirs.iter().map(|d| RunArtifacts::load(d)).collect::<Result<Vec<_>>>()?;
    let rows: Vec<RunRow> = runs
        .iter()
        .map(|r| RunRow {
            dir: r.dir.clone(),
            config_hash: r.summary.config_hash.clone(),
            variant: r.summary.variant,
            init_scheme: r.summary.init_scheme,
            multi_head_dropout: r.summary.multi_head_dropout,
            final_train_loss: r.summary.final_train_loss,
            eval_metric: r.summary.final_eval.metric,
            per_task: r.summary.final_eval.per_task.clone(),
            macro_metric: r.summary.final_eval.macro_avg,
            overall_similarity: r.summary.overall_similarity,
            footprint: r.summary.footprint.clone(),
        })
        .collect();
    let base = &runs[0];
    let deltas = runs
        .iter()
        .map(|r| {
            let similarity = match (&r.similarity, &base.similarity) {
                (Some(a), Some(b)) => crate::diagnostics::compare_runs(a, b).ok(),
                _ => None,
            };
            RunDelta {
                dir: r.dir.clone(),
                final_train_loss: r.summary.final_train_loss - base.summary.final_train_loss,
                macro_metric: r.summary.final_eval.macro_avg - base.summary.final_eval.macro_avg,
                per_task: r
                    .summary
                    .final_eval
                    .per_task
                    .iter()
                    .map(|(t, v)| (*t, v - base.summary.final_eval.per_task.get(t).copied().unwrap_or(f64::NAN)))
                    .collect(),
                similarity,
            }
        })
        .collect();
    let mut hashes: Vec<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    Ok(Comparison {
        distinct_config_hashes: hashes.len(),
        runs: rows,
        deltas,
    })
}

impl Comparison {
    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut lines = vec![format!(
            "{:<28} {:<14} {:<10} {:<22} {:>4} {:>12} {:>12} {:>10} {:>12}",
            "run", "hash", "variant", "init", "mhd", "train_loss", "eval_macro", "sim", "d_macro"
        )];
        for (r, d) in self.runs.iter().zip(&self.deltas) {
            let name = r.dir.file_name().map_or_else(|| r.dir.display().to_string(), |n| n.to_string_lossy().into());
            lines.push(format!(
                "{:<28} {:<14} {:<10} {:<22} {:>4} {:>12.6} {:>12.6} {:>10} {:>+12.6}",
                name,
                &r.config_hash[..12.min(r.config_hash.len())],
                format!("{:?}", r.variant),
                format!("{:?}", r.init_scheme),
                if r.multi_head_dropout { "on" } else { "off" },
                r.final_train_loss,
                r.macro_metric,
                fmt_opt(r.overall_similarity),
                d.macro_metric
            ));
        }
        lines.push(format!("distinct config hashes: {}", self.distinct_config_hashes));
        lines.join("\n") + "\n"
    }
}
