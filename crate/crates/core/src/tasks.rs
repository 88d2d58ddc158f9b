//! Synthetic multi-task suites.
//!
//! Teacher regression: task `i` maps `x ~ N(0, I)` to
//! `y = (λ·S + (1−λ)·Tᵢ)·x + ε` with a shared `S` and per-task `Tᵢ`, both
//! `N(0, 1/d)` entrywise. Sequence classification: uniform random tokens
//! labelled by one deterministic rule per task. Task identity is never part of
//! the model input.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::rng::{sample_gaussian, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Input<T> {
    /// `[b×d]` feature rows.
    Features(Tensor<T>),
    /// `b` concatenated sequences of `seq_len` token ids.
    Tokens { ids: Vec<usize>, seq_len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target<T> {
    Regression(Tensor<T>),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub input: Input<T>,
    pub target: Target<T>,
    pub task_ids: Vec<usize>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.task_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.task_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    TeacherRegression,
    SequenceClassify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SequenceRule {
    /// Label is the last token.
    CopyLast,
    /// Label is the first token mirrored through the vocabulary: `vocab − 1 − t₀`.
    ReverseFirst,
    /// Label is the token sum modulo the vocabulary size.
    ModularSum,
    /// Label is the parity of how many tokens are `>= vocab / 2`.
    Parity,
}

impl SequenceRule {
    pub const ALL: [SequenceRule; 4] = [
        SequenceRule::CopyLast,
        SequenceRule::ReverseFirst,
        SequenceRule::ModularSum,
        SequenceRule::Parity,
    ];

    pub fn label(self, tokens: &[usize], vocab: usize) -> usize {
        match self {
            SequenceRule::CopyLast => *tokens.last().expect("non-empty sequence"),
            SequenceRule::ReverseFirst => vocab - 1 - tokens[0],
            SequenceRule::ModularSum => tokens.iter().sum::<usize>() % vocab,
            SequenceRule::Parity => tokens.iter().filter(|t| **t >= vocab / 2).count() % 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub kind: TaskKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule: Option<SequenceRule>,
    pub train_size: usize,
    pub eval_size: usize,
    pub noise_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExampleInput<T> {
    Features(Vec<T>),
    Tokens(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExampleTarget<T> {
    Vector(Vec<T>),
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example<T> {
    pub input: ExampleInput<T>,
    pub target: ExampleTarget<T>,
    pub task_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskDataset<T> {
    pub split: Split,
    pub kind: TaskKind,
    pub examples: Vec<Example<T>>,
}

/// A generated suite: task descriptions, both splits, and teacher matrices
/// (regression only).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite<T> {
    pub specs: Vec<TaskSpec>,
    pub train: MultiTaskDataset<T>,
    pub eval: MultiTaskDataset<T>,
    pub teachers: Vec<Tensor<f64>>,
}

impl<T: Scalar> MultiTaskDataset<T> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn task_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for e in &self.examples {
            *h.entry(e.task_id).or_insert(0) += 1;
        }
        h
    }

    /// Stacks the selected examples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        let first = indices
            .first()
            .ok_or_else(|| Error::InvalidParameter("empty batch".into()))?;
        let picked: Vec<&Example<T>> = indices.iter().map(|i| &self.examples[*i]).collect();
        let task_ids = picked.iter().map(|e| e.task_id).collect();
        let input = match &self.examples[*first].input {
            ExampleInput::Features(f) => {
                let d = f.len();
                let mut data = Vec::with_capacity(d * picked.len());
                for e in &picked {
                    match &e.input {
                        ExampleInput::Features(f) if f.len() == d => data.extend_from_slice(f),
                        _ => return Err(Error::InvalidParameter("mixed example inputs".into())),
                    }
                }
                Input::Features(Tensor::new(&[picked.len(), d], data)?)
            }
            ExampleInput::Tokens(t) => {
                let seq_len = t.len();
                let mut ids = Vec::with_capacity(seq_len * picked.len());
                for e in &picked {
                    match &e.input {
                        ExampleInput::Tokens(t) if t.len() == seq_len => ids.extend_from_slice(t),
                        _ => return Err(Error::InvalidParameter("mixed example inputs".into())),
                    }
                }
                Input::Tokens { ids, seq_len }
            }
        };
        let target = match &self.examples[*first].target {
            ExampleTarget::Vector(v) => {
                let d = v.len();
                let mut data = Vec::with_capacity(d * picked.len());
                for e in &picked {
                    match &e.target {
                        ExampleTarget::Vector(v) if v.len() == d => data.extend_from_slice(v),
                        _ => return Err(Error::InvalidParameter("mixed example targets".into())),
                    }
                }
                Target::Regression(Tensor::new(&[picked.len(), d], data)?)
            }
            ExampleTarget::Class(_) => Target::Classes(
                picked
                    .iter()
                    .map(|e| match e.target {
                        ExampleTarget::Class(c) => Ok(c),
                        _ => Err(Error::InvalidParameter("mixed example targets".into())),
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Batch {
            input,
            target,
            task_ids,
        })
    }

    /// Line-delimited JSON, one `{input, target, task_id, split}` object per example.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for e in &self.examples {
            let input = match &e.input {
                ExampleInput::Features(f) => serde_json::json!(f.iter().map(|v| v.as_f64()).collect::<Vec<_>>()),
                ExampleInput::Tokens(t) => serde_json::json!(t),
            };
            let target = match &e.target {
                ExampleTarget::Vector(v) => serde_json::json!(v.iter().map(|v| v.as_f64()).collect::<Vec<_>>()),
                ExampleTarget::Class(c) => serde_json::json!(c),
            };
            let line = serde_json::json!({
                "input": input,
                "target": target,
                "task_id": e.task_id,
                "split": self.split,
            });
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn check_sizes(n_tasks: usize, train_size: usize, eval_size: usize) -> Result<()> {
    if n_tasks < 2 {
        return Err(Error::config("tasks.n_tasks", format!("need at least 2 tasks, got {n_tasks}")));
    }
    if train_size == 0 || eval_size == 0 {
        return Err(Error::config("tasks.train_size", "split sizes must be >= 1"));
    }
    Ok(())
}

/// Teacher-regression suite; sizes are per task. `input_shift > 0` moves each
/// task's inputs to mean `input_shift·uᵢ` for a random unit vector `uᵢ`.
#[allow(clippy::too_many_arguments)]
pub fn gen_teacher_suite<T: Scalar>(
    rng: &mut Rng,
    n_tasks: usize,
    d_model: usize,
    lambda: f64,
    train_size: usize,
    eval_size: usize,
    noise_std: f64,
    input_shift: f64,
) -> Result<TaskSuite<T>> {
    check_sizes(n_tasks, train_size, eval_size)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config("tasks.lambda", format!("{lambda} not in [0, 1]")));
    }
    if !noise_std.is_finite() || noise_std < 0.0 {
        return Err(Error::config("tasks.noise_std", "must be finite and >= 0"));
    }
    if d_model == 0 {
        return Err(Error::config("backbone.d_model", "must be >= 1"));
    }
    let std = (1.0 / d_model as f64).sqrt();
    let shared: Tensor<f64> = sample_gaussian(rng, 0.0, std, &[d_model, d_model])?;
    let mut teachers = Vec::with_capacity(n_tasks);
    let mut shifts = Vec::with_capacity(n_tasks);
    for _ in 0..n_tasks {
        let own: Tensor<f64> = sample_gaussian(rng, 0.0, std, &[d_model, d_model])?;
        teachers.push(shared.scale(lambda).add(&own.scale(1.0 - lambda))?);
        let u: Tensor<f64> = sample_gaussian(rng, 0.0, 1.0, &[d_model])?;
        let norm = u.sq_norm().sqrt();
        shifts.push(u.scale(input_shift / norm));
    }

    let mut train = Vec::with_capacity(n_tasks * train_size);
    let mut eval = Vec::with_capacity(n_tasks * eval_size);
    for (task_id, teacher) in teachers.iter().enumerate() {
        for k in 0..train_size + eval_size {
            let x: Tensor<f64> = sample_gaussian::<f64>(rng, 0.0, 1.0, &[1, d_model])?.add(&shifts[task_id])?;
            let mut y = x.matmul_t(teacher)?;
            if noise_std > 0.0 {
                y = y.add(&sample_gaussian::<f64>(rng, 0.0, noise_std, &[1, d_model])?)?;
            }
            let ex = Example {
                input: ExampleInput::Features(x.data().iter().map(|v| T::of(*v)).collect()),
                target: ExampleTarget::Vector(y.data().iter().map(|v| T::of(*v)).collect()),
                task_id,
            };
            if k < train_size {
                train.push(ex);
            } else {
                eval.push(ex);
            }
        }
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut eval);
    let specs = (0..n_tasks)
        .map(|task_id| TaskSpec {
            task_id,
            kind: TaskKind::TeacherRegression,
            lambda: Some(lambda),
            rule: None,
            train_size,
            eval_size,
            noise_std,
        })
        .collect();
    Ok(TaskSuite {
        specs,
        train: MultiTaskDataset {
            split: Split::Train,
            kind: TaskKind::TeacherRegression,
            examples: train,
        },
        eval: MultiTaskDataset {
            split: Split::Eval,
            kind: TaskKind::TeacherRegression,
            examples: eval,
        },
        teachers,
    })
}

/// Sequence-classification suite using the first `n_tasks` rules of
/// [`SequenceRule::ALL`]; sizes are per task.
pub fn gen_sequence_suite<T: Scalar>(
    rng: &mut Rng,
    n_tasks: usize,
    vocab: usize,
    seq_len: usize,
    train_size: usize,
    eval_size: usize,
) -> Result<TaskSuite<T>> {
    check_sizes(n_tasks, train_size, eval_size)?;
    if vocab < 4 {
        return Err(Error::config("backbone.vocab_size", format!("need >= 4, got {vocab}")));
    }
    if seq_len < 2 {
        return Err(Error::config("tasks.seq_len", format!("need >= 2, got {seq_len}")));
    }
    if n_tasks > SequenceRule::ALL.len() {
        return Err(Error::config(
            "tasks.n_tasks",
            format!("{n_tasks} tasks requested but only {} sequence rules exist", SequenceRule::ALL.len()),
        ));
    }
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (task_id, rule) in SequenceRule::ALL[..n_tasks].iter().enumerate() {
        for k in 0..train_size + eval_size {
            let tokens: Vec<usize> = (0..seq_len).map(|_| rng.below(vocab)).collect();
            let ex = Example {
                target: ExampleTarget::Class(rule.label(&tokens, vocab)),
                input: ExampleInput::Tokens(tokens),
                task_id,
            };
            if k < train_size {
                train.push(ex);
            } else {
                eval.push(ex);
            }
        }
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut eval);
    let specs = SequenceRule::ALL[..n_tasks]
        .iter()
        .enumerate()
        .map(|(task_id, rule)| TaskSpec {
            task_id,
            kind: TaskKind::SequenceClassify,
            lambda: None,
            rule: Some(*rule),
            train_size,
            eval_size,
            noise_std: 0.0,
        })
        .collect();
    Ok(TaskSuite {
        specs,
        train: MultiTaskDataset {
            split: Split::Train,
            kind: TaskKind::SequenceClassify,
            examples: train,
        },
        eval: MultiTaskDataset {
            split: Split::Eval,
            kind: TaskKind::SequenceClassify,
            examples: eval,
        },
        teachers: Vec::new(),
    })
}

/// One epoch of shuffled, mixed-task index batches; the last may be short.
pub fn epoch_order(len: usize, batch_size: usize, rng: &mut Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be >= 1"));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut idx);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Materialized batches for one epoch.
pub fn batches<'a, T: Scalar>(
    dataset: &'a MultiTaskDataset<T>,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<impl Iterator<Item = Result<Batch<T>>> + 'a> {
    let order = epoch_order(dataset.len(), batch_size, rng)?;
    Ok(order.into_iter().map(move |idx| dataset.batch(&idx)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSuiteConfig {
    pub kind: TaskKind,
    #[serde(default = "default_tasks")]
    pub n_tasks: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Examples per task in the train split.
    #[serde(default = "default_train")]
    pub train_size: usize,
    /// Examples per task in the eval split.
    #[serde(default = "default_eval")]
    pub eval_size: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub input_shift: f64,
    /// Sequence length; defaults to the backbone's `max_seq_len`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_tasks() -> usize {
    3
}
fn default_lambda() -> f64 {
    0.5
}
fn default_train() -> usize {
    256
}
fn default_eval() -> usize {
    64
}

impl TaskSuiteConfig {
    pub fn teacher(n_tasks: usize, lambda: f64) -> Self {
        TaskSuiteConfig {
            kind: TaskKind::TeacherRegression,
            n_tasks,
            lambda,
            train_size: default_train(),
            eval_size: default_eval(),
            noise_std: 0.0,
            input_shift: 0.0,
            seq_len: None,
            seed: None,
        }
    }

    pub fn generate<T: Scalar>(&self, backbone: &BackboneConfig, rng: &mut Rng) -> Result<TaskSuite<T>> {
        match self.kind {
            TaskKind::TeacherRegression => gen_teacher_suite(
                rng,
                self.n_tasks,
                backbone.d_model,
                self.lambda,
                self.train_size,
                self.eval_size,
                self.noise_std,
                self.input_shift,
            ),
            TaskKind::SequenceClassify => {
                let seq_len = self.seq_len.unwrap_or(backbone.max_seq_len);
                if seq_len > backbone.max_seq_len {
                    return Err(Error::config(
                        "tasks.seq_len",
                        format!("{seq_len} exceeds backbone.max_seq_len {}", backbone.max_seq_len),
                    ));
                }
                gen_sequence_suite(rng, self.n_tasks, backbone.vocab_size, seq_len, self.train_size, self.eval_size)
            }
        }
    }
}
