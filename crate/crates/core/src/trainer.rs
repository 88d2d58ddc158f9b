//! AdamW training loop, warmup-cosine schedule, grad-norm telemetry and evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbone::AdaptedModel;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tasks::{epoch_order, MultiTaskDataset, Target, TaskKind};
use crate::tensor::{Param, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_warmup")]
    pub warmup_ratio: f64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// When set, training runs exactly this many steps, cycling epochs as needed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_log_every")]
    pub grad_log_every: usize,
    /// Global-norm clipping threshold; off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

fn default_lr() -> f64 {
    2e-4
}
fn default_warmup() -> f64 {
    0.03
}
fn default_epochs() -> usize {
    1
}
fn default_batch() -> usize {
    32
}
fn default_log_every() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            warmup_ratio: default_warmup(),
            schedule: Schedule::Cosine,
            epochs: default_epochs(),
            max_steps: None,
            batch_size: default_batch(),
            optimizer: AdamWConfig::default(),
            seed: None,
            grad_log_every: default_log_every(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted as the frozen-update degenerate case.
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config("train.learning_rate", format!("{} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("train.warmup_ratio", format!("{} not in [0, 1)", self.warmup_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.max_steps.is_none() && self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("train.max_steps", "must be >= 1"));
        }
        if self.grad_log_every == 0 {
            return Err(Error::config("train.grad_log_every", "must be >= 1"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("train.optimizer", "betas must lie in [0, 1)"));
        }
        if o.eps.is_nan() || o.eps <= 0.0 || o.weight_decay.is_nan() || o.weight_decay < 0.0 {
            return Err(Error::config("train.optimizer", "eps must be > 0 and weight_decay >= 0"));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("train.grad_clip", "must be > 0"));
            }
        }
        Ok(())
    }

    pub fn total_steps(&self, train_len: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * train_len.div_ceil(self.batch_size))
    }
}

/// Linear warmup over `⌈warmup_ratio·total⌉` steps, then cosine decay to 0 at `total`.
pub fn lr_at(config: &TrainConfig, step: usize, total_steps: usize) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidParameter(format!("step {step} beyond total {total_steps}")));
    }
    let lr = config.learning_rate;
    let warm = (config.warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warm {
        return Ok(lr * step as f64 / warm as f64);
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let progress = (step - warm) as f64 / (total_steps - warm) as f64;
    Ok(lr * 0.5 * (1.0 + (PI * progress).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradNorms {
    pub global: f64,
    pub per_site: BTreeMap<String, f64>,
}

/// Global L2 norm over the gradients of `params`.
pub fn grad_norm<T: Scalar>(params: &[(String, &Param<T>)]) -> Result<f64> {
    let mut sq = 0.0;
    for (name, p) in params {
        let g = p.grad.as_ref().ok_or_else(|| Error::MissingGrad(name.clone()))?;
        sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
    }
    Ok(sq.sqrt())
}

pub fn grad_norms<T: Scalar>(model: &AdaptedModel<T>) -> Result<GradNorms> {
    let mut per_site = BTreeMap::new();
    let mut sq = 0.0;
    for (site, layer) in model.adapters() {
        let n = grad_norm(&layer.trainables())?;
        sq += n * n;
        per_site.insert(site.clone(), n);
    }
    Ok(GradNorms {
        global: sq.sqrt(),
        per_site,
    })
}

struct Moments<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: i32,
}

pub struct AdamW<T> {
    config: AdamWConfig,
    state: Option<Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, state: None }
    }

    /// One update on every `requires_grad` parameter; frozen ones are skipped.
    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
        let st = self.state.get_or_insert_with(|| Moments {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            t: 0,
        });
        if st.m.len() != params.len() {
            return Err(Error::StructureMismatch(format!(
                "optimizer tracks {} tensors, got {}",
                st.m.len(),
                params.len()
            )));
        }
        st.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(st.t));
        let bc2 = T::of(1.0 - c.beta2.powi(st.t));
        let (lr, eps, wd) = (T::of(lr), T::of(c.eps), T::of(c.weight_decay));
        let one = T::one();
        for (k, p) in params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let g = p.grad.as_ref().ok_or_else(|| Error::MissingGrad(format!("tensor {k}")))?.clone();
            let m = st.m[k].data_mut();
            let v = st.v[k].data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let upd = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps) + wd * w[i];
                w[i] = w[i] - lr * upd;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub site_grad_norms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Mse,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub metric: MetricKind,
    pub per_task: BTreeMap<usize, f64>,
    #[serde(rename = "macro")]
    pub macro_avg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub epoch: usize,
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

pub const CSV_HEADER: &str = "step,lr,loss,grad_norm,site,site_grad_norm";

impl StepRecord {
    /// One CSV row per adapted site.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (site, n) in &self.site_grad_norms {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{},{:e}\n",
                self.step, self.lr, self.loss, self.grad_norm, site, n
            ));
        }
        out
    }
}

impl MetricsLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|s| s.loss)
    }

    /// CSV of the records logged every `every` steps (step 1 always included).
    pub fn to_csv(&self, every: usize) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in self.steps.iter().filter(|r| (r.step - 1) % every.max(1) == 0) {
            out.push_str(&r.csv_rows());
        }
        out
    }
}

/// Runs the loop over `train`, evaluating on `eval` after every epoch and at the end.
pub fn train<T: Scalar>(
    model: &mut AdaptedModel<T>,
    train: &MultiTaskDataset<T>,
    eval: Option<&MultiTaskDataset<T>>,
    config: &TrainConfig,
) -> Result<MetricsLog> {
    train_with(model, train, eval, config, |_| Ok(()))
}

/// As [`train`], calling `on_step` with each record as soon as it is produced.
pub fn train_with<T: Scalar>(
    model: &mut AdaptedModel<T>,
    train: &MultiTaskDataset<T>,
    eval: Option<&MultiTaskDataset<T>>,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<MetricsLog> {
    config.validate()?;
    if model.trainable_count() == 0 {
        return Err(Error::InvalidParameter("model has no trainable tensors".into()));
    }
    if train.is_empty() {
        return Err(Error::EmptyTask(0));
    }
    let seed = config.seed.unwrap_or(0);
    let mut shuffle_rng = Rng::derived(seed, "trainer", "shuffle");
    let mut dropout_rng = Rng::derived(seed, "trainer", "dropout");
    let total = config.total_steps(train.len());
    let mut opt = AdamW::new(config.optimizer.clone());
    let mut log = MetricsLog::default();

    let mut order = Vec::new().into_iter();
    let mut epoch = 0;
    for s in 0..total {
        let idx = match order.next() {
            Some(idx) => idx,
            None => {
                if epoch > 0 {
                    if let Some(ev) = eval {
                        log.evals.push(EvalRecord {
                            step: s,
                            epoch,
                            metrics: evaluate(model, ev)?,
                        });
                    }
                }
                epoch += 1;
                order = epoch_order(train.len(), config.batch_size, &mut shuffle_rng)?.into_iter();
                order.next().expect("non-empty epoch")
            }
        };
        let batch = train.batch(&idx)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.input, true, Some(&mut dropout_rng))?;
        let loss = model.loss(&mut g, out, &batch.target)?;
        let loss_value = g.value(loss).data()[0].as_f64();
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: s + 1,
                value: loss_value,
            });
        }
        g.backward(loss)?;
        for (name, p) in model.trainables_mut() {
            p.grad = Some(match g.named_grad(&name) {
                Some(gr) => gr.clone(),
                None => Tensor::zeros(p.value.shape()),
            });
        }
        let norms = grad_norms(model)?;
        if let Some(clip) = config.grad_clip {
            if norms.global > clip {
                let f = T::of(clip / norms.global);
                for (_, p) in model.trainables_mut() {
                    if let Some(gr) = p.grad.as_mut() {
                        *gr = gr.scale(f);
                    }
                }
            }
        }
        let lr = lr_at(config, s, total)?;
        let mut params: Vec<&mut Param<T>> = model.trainables_mut().into_iter().map(|(_, p)| p).collect();
        opt.step(&mut params, lr)?;

        let rec = StepRecord {
            step: s + 1,
            lr,
            loss: loss_value,
            grad_norm: norms.global,
            site_grad_norms: norms.per_site,
        };
        if s % config.grad_log_every == 0 {
            on_step(&rec)?;
        }
        log.steps.push(rec);
    }
    if let Some(ev) = eval {
        log.evals.push(EvalRecord {
            step: total,
            epoch,
            metrics: evaluate(model, ev)?,
        });
    }
    Ok(log)
}

const EVAL_CHUNK: usize = 256;

/// Eval-mode metrics per task: MSE for regression, accuracy for classification.
pub fn evaluate<T: Scalar>(model: &AdaptedModel<T>, dataset: &MultiTaskDataset<T>) -> Result<EvalMetrics> {
    let hist = dataset.task_histogram();
    let n_tasks = hist.keys().next_back().map_or(0, |k| k + 1);
    if n_tasks == 0 {
        return Err(Error::EmptyTask(0));
    }
    if let Some(missing) = (0..n_tasks).find(|t| !hist.contains_key(t)) {
        return Err(Error::EmptyTask(missing));
    }
    let mut sums = vec![0.0; n_tasks];
    let mut counts = vec![0.0; n_tasks];
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = dataset.batch(chunk)?;
        let pred = model.predict(&batch.input)?;
        match &batch.target {
            Target::Regression(y) => {
                let d = y.shape()[1];
                for (row, task) in batch.task_ids.iter().enumerate() {
                    let se: f64 = (0..d)
                        .map(|j| (pred.data()[row * d + j].as_f64() - y.data()[row * d + j].as_f64()).powi(2))
                        .sum();
                    sums[*task] += se;
                    counts[*task] += d as f64;
                }
            }
            Target::Classes(labels) => {
                for (row, task) in batch.task_ids.iter().enumerate() {
                    let argmax = argmax_row(pred.row(row));
                    sums[*task] += f64::from(u8::from(argmax == labels[row]));
                    counts[*task] += 1.0;
                }
            }
        }
    }
    let per_task: BTreeMap<usize, f64> = (0..n_tasks).map(|t| (t, sums[t] / counts[t])).collect();
    let macro_avg = per_task.values().sum::<f64>() / n_tasks as f64;
    Ok(EvalMetrics {
        metric: match dataset.kind {
            TaskKind::TeacherRegression => MetricKind::Mse,
            TaskKind::SequenceClassify => MetricKind::Accuracy,
        },
        per_task,
        macro_avg,
    })
}

fn argmax_row<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean eval-mode loss over a dataset.
pub fn eval_loss<T: Scalar>(model: &AdaptedModel<T>, dataset: &MultiTaskDataset<T>) -> Result<f64> {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = dataset.batch(chunk)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch.input, false, None)?;
        let loss = model.loss(&mut g, out, &batch.target)?;
        total += g.value(loss).data()[0].as_f64() * chunk.len() as f64;
    }
    Ok(total / dataset.len().max(1) as f64)
}
