//! Frozen base models and adapter injection.
//!
//! `Mlp` is `fc2(silu(fc1(x)))` with sites `fc1`, `fc2`. `TinyTransformer` is
//! a pre-norm decoder: token embedding plus fixed sinusoidal positions, causal
//! multi-head attention, then a gated FFN `down(silu(gate(x)) ⊙ up(x))`, with
//! the final-position hidden state projected to vocabulary logits. Only the FFN
//! projections `layers.{l}.{gate,up,down}_proj` are adaptation sites.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{AdapterLayer, LoraConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{sample_gaussian, Rng};
use crate::scalar::Scalar;
use crate::tasks::{Input, Target};
use crate::tensor::{Param, Tensor};

const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-6;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    Mlp,
    TinyTransformer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub d_model: usize,
    pub d_ff: usize,
    #[serde(default = "one")]
    pub n_layers: usize,
    #[serde(default = "one")]
    pub n_attn_heads: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default = "default_seq")]
    pub max_seq_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn one() -> usize {
    1
}
fn default_vocab() -> usize {
    16
}
fn default_seq() -> usize {
    8
}

impl BackboneConfig {
    pub fn mlp(d_model: usize, d_ff: usize) -> Self {
        BackboneConfig {
            kind: BackboneKind::Mlp,
            d_model,
            d_ff,
            n_layers: 1,
            n_attn_heads: 1,
            vocab_size: default_vocab(),
            max_seq_len: default_seq(),
            seed: None,
        }
    }

    /// Default transformer: `d_model = 256`, `d_ff = 512`, 4 attention heads.
    pub fn transformer() -> Self {
        BackboneConfig {
            kind: BackboneKind::TinyTransformer,
            d_model: 256,
            d_ff: 512,
            n_layers: 1,
            n_attn_heads: 4,
            vocab_size: default_vocab(),
            max_seq_len: default_seq(),
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("backbone.d_model", self.d_model),
            ("backbone.d_ff", self.d_ff),
            ("backbone.n_layers", self.n_layers),
            ("backbone.n_attn_heads", self.n_attn_heads),
            ("backbone.vocab_size", self.vocab_size),
            ("backbone.max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_attn_heads) {
            return Err(Error::config(
                "backbone.n_attn_heads",
                format!("d_model {} not divisible by {}", self.d_model, self.n_attn_heads),
            ));
        }
        Ok(())
    }

    /// Frozen tensors in construction order.
    pub(crate) fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        match self.kind {
            BackboneKind::Mlp => vec![("fc1".into(), vec![f, d]), ("fc2".into(), vec![d, f])],
            BackboneKind::TinyTransformer => {
                let mut out = vec![("embed".to_string(), vec![self.vocab_size, d])];
                for l in 0..self.n_layers {
                    for (name, shape) in [
                        ("q_proj", [d, d]),
                        ("k_proj", [d, d]),
                        ("v_proj", [d, d]),
                        ("o_proj", [d, d]),
                        ("gate_proj", [f, d]),
                        ("up_proj", [f, d]),
                        ("down_proj", [d, f]),
                    ] {
                        out.push((format!("layers.{l}.{name}"), shape.to_vec()));
                    }
                }
                out.push(("lm_head".into(), vec![self.vocab_size, d]));
                out
            }
        }
    }

    pub fn site_names(&self) -> Vec<String> {
        match self.kind {
            BackboneKind::Mlp => vec!["fc1".into(), "fc2".into()],
            BackboneKind::TinyTransformer => (0..self.n_layers)
                .flat_map(|l| ["gate_proj", "up_proj", "down_proj"].map(|s| format!("layers.{l}.{s}")))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T> {
    config: BackboneConfig,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Backbone<T> {
    /// Gaussian(0, 0.02²) weights drawn in layout order from `rng`.
    pub fn build(config: &BackboneConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in config.layout() {
            params.insert(name, sample_gaussian(rng, 0.0, INIT_STD, &shape)?);
        }
        Ok(Backbone {
            config: config.clone(),
            params,
        })
    }

    pub fn from_params(config: &BackboneConfig, params: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::StructureMismatch(format!(
                "backbone expects {} tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::StructureMismatch(format!(
                        "backbone.{name}: shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::StructureMismatch(format!("backbone.{name} missing"))),
            }
        }
        Ok(Backbone {
            config: config.clone(),
            params,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn site_names(&self) -> Vec<String> {
        self.config.site_names()
    }

    fn tensor(&self, name: &str) -> &Tensor<T> {
        &self.params[name]
    }

    /// SHA-256 over every frozen tensor's name, shape and little-endian bytes.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            buf.clear();
            for v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A backbone with adapters replacing some of its projection sites.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel<T> {
    backbone: Backbone<T>,
    lora: LoraConfig,
    adapters: BTreeMap<String, AdapterLayer<T>>,
}

/// Wraps each target site with an adapter seeded by
/// `derive_seed(lora.seed, "adapters", site)`. Random-head schemes get their
/// one-time weight offset here, so the fresh model reproduces the backbone.
pub fn inject_adapters<T: Scalar>(backbone: Backbone<T>, lora: &LoraConfig, targets: &[String]) -> Result<AdaptedModel<T>> {
    lora.validate()?;
    let valid = backbone.site_names();
    let mut adapters = BTreeMap::new();
    for site in targets {
        if !valid.contains(site) {
            return Err(Error::UnknownSite {
                name: site.clone(),
                valid,
            });
        }
        let mut rng = Rng::derived(lora.seed.unwrap_or(0), "adapters", site);
        let mut layer = AdapterLayer::new(site.clone(), backbone.tensor(site).clone(), lora, &mut rng)?;
        if !lora.init().zero_heads() {
            layer.apply_weight_offset()?;
        }
        adapters.insert(site.clone(), layer);
    }
    Ok(AdaptedModel {
        backbone,
        lora: lora.clone(),
        adapters,
    })
}

impl<T: Scalar> AdaptedModel<T> {
    pub fn from_parts(backbone: Backbone<T>, lora: LoraConfig, adapters: Vec<AdapterLayer<T>>) -> Result<Self> {
        let valid = backbone.site_names();
        let mut map = BTreeMap::new();
        for a in adapters {
            if !valid.iter().any(|s| s == a.site()) {
                return Err(Error::UnknownSite {
                    name: a.site().to_string(),
                    valid,
                });
            }
            map.insert(a.site().to_string(), a);
        }
        Ok(AdaptedModel {
            backbone,
            lora,
            adapters: map,
        })
    }

    pub fn backbone(&self) -> &Backbone<T> {
        &self.backbone
    }

    pub fn lora(&self) -> &LoraConfig {
        &self.lora
    }

    pub fn adapters(&self) -> &BTreeMap<String, AdapterLayer<T>> {
        &self.adapters
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut AdapterLayer<T>> {
        self.adapters.values_mut()
    }

    pub fn targets(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn trainables(&self) -> Vec<(String, &Param<T>)> {
        self.adapters.values().flat_map(|a| a.trainables()).collect()
    }

    pub fn trainables_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.adapters.values_mut().flat_map(|a| a.trainables_mut()).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters.values().map(|a| a.trainable_count()).sum()
    }

    fn site(&self, g: &mut Graph<T>, name: &str, x: Var, training: bool, rng: Option<&mut Rng>) -> Result<Var> {
        match self.adapters.get(name) {
            Some(a) => a.forward(g, x, training, rng),
            None => {
                let w = g.constant(self.backbone.tensor(name).clone());
                g.linear(x, w)
            }
        }
    }

    /// Regression outputs `[b×d_model]` (MLP) or final-position logits `[b×vocab]`.
    pub fn forward(&self, g: &mut Graph<T>, input: &Input<T>, training: bool, rng: Option<&mut Rng>) -> Result<Var> {
        let cfg = &self.backbone.config;
        match (cfg.kind, input) {
            (BackboneKind::Mlp, Input::Features(x)) => {
                let (_, d) = x.dims2()?;
                if d != cfg.d_model {
                    return Err(Error::Shape {
                        op: "mlp forward",
                        left: vec![cfg.d_ff, cfg.d_model],
                        right: x.shape().to_vec(),
                    });
                }
                self.forward_mlp(g, x, training, rng)
            }
            (BackboneKind::TinyTransformer, Input::Tokens { ids, seq_len }) => {
                self.forward_transformer(g, ids, *seq_len, training, rng)
            }
            (kind, _) => Err(Error::InvalidParameter(format!("input kind does not match backbone {kind:?}"))),
        }
    }

    fn forward_mlp(&self, g: &mut Graph<T>, x: &Tensor<T>, training: bool, mut rng: Option<&mut Rng>) -> Result<Var> {
        let x = g.constant(x.clone());
        let h = self.site(g, "fc1", x, training, rng.as_deref_mut())?;
        let h = g.silu(h);
        self.site(g, "fc2", h, training, rng)
    }

    fn forward_transformer(
        &self,
        g: &mut Graph<T>,
        ids: &[usize],
        seq_len: usize,
        training: bool,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let cfg = &self.backbone.config;
        if seq_len == 0 || seq_len > cfg.max_seq_len || !ids.len().is_multiple_of(seq_len) || ids.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "{} tokens do not form sequences of length {seq_len} (max {})",
                ids.len(),
                cfg.max_seq_len
            )));
        }
        let batch = ids.len() / seq_len;
        let d = cfg.d_model;
        let n_heads = cfg.n_attn_heads;
        let dh = d / n_heads;
        let eps = T::of(NORM_EPS);

        let embed = g.constant(self.backbone.tensor("embed").clone());
        let tok = g.gather_rows(embed, ids)?;
        let pos = g.constant(positions(batch, seq_len, d));
        let mut x = g.add(tok, pos)?;
        let causal = g.constant(causal_mask(seq_len));
        let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());

        for l in 0..cfg.n_layers {
            let xn = g.rms_norm(x, eps)?;
            let proj = |name: &str, g: &mut Graph<T>| -> Result<Var> {
                let w = g.constant(self.backbone.tensor(&format!("layers.{l}.{name}")).clone());
                g.linear(xn, w)
            };
            let q = proj("q_proj", g)?;
            let k = proj("k_proj", g)?;
            let v = proj("v_proj", g)?;
            let mut seqs = Vec::with_capacity(batch);
            for s in 0..batch {
                let (qs, ks, vs) = (
                    g.slice_rows(q, s * seq_len, seq_len)?,
                    g.slice_rows(k, s * seq_len, seq_len)?,
                    g.slice_rows(v, s * seq_len, seq_len)?,
                );
                let mut heads = Vec::with_capacity(n_heads);
                for h in 0..n_heads {
                    let qh = g.slice_cols(qs, h * dh, dh)?;
                    let kh = g.slice_cols(ks, h * dh, dh)?;
                    let vh = g.slice_cols(vs, h * dh, dh)?;
                    let scores = g.linear(qh, kh)?;
                    let scores = g.scale(scores, inv_sqrt);
                    let scores = g.add(scores, causal)?;
                    let attn = g.softmax(scores, 1)?;
                    heads.push(g.matmul(attn, vh)?);
                }
                seqs.push(g.concat_cols(&heads)?);
            }
            let ctx = g.concat_rows(&seqs)?;
            let wo = g.constant(self.backbone.tensor(&format!("layers.{l}.o_proj")).clone());
            let attn_out = g.linear(ctx, wo)?;
            x = g.add(x, attn_out)?;

            let xn = g.rms_norm(x, eps)?;
            let gate = self.site(g, &format!("layers.{l}.gate_proj"), xn, training, rng.as_deref_mut())?;
            let up = self.site(g, &format!("layers.{l}.up_proj"), xn, training, rng.as_deref_mut())?;
            let gate = g.silu(gate);
            let hidden = g.mul(gate, up)?;
            let down = self.site(g, &format!("layers.{l}.down_proj"), hidden, training, rng.as_deref_mut())?;
            x = g.add(x, down)?;
        }
        let xf = g.rms_norm(x, eps)?;
        let last: Vec<usize> = (0..batch).map(|s| s * seq_len + seq_len - 1).collect();
        let last = g.gather_rows(xf, &last)?;
        let head = g.constant(self.backbone.tensor("lm_head").clone());
        g.linear(last, head)
    }

    pub fn loss(&self, g: &mut Graph<T>, out: Var, target: &Target<T>) -> Result<Var> {
        match target {
            Target::Regression(y) => {
                let y = g.constant(y.clone());
                g.mse_loss(out, y)
            }
            Target::Classes(labels) => g.cross_entropy(out, labels),
        }
    }

    /// Eval-mode outputs as a plain tensor.
    pub fn predict(&self, input: &Input<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input, false, None)?;
        Ok(g.value(out).clone())
    }
}

/// Fixed sinusoidal encodings tiled over `batch` sequences: `[batch·len × d]`.
/// Amplitude matches the embedding init so position does not drown token identity.
fn positions<T: Scalar>(batch: usize, len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        for p in 0..len {
            for i in 0..d {
                let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let angle = p as f64 * freq;
                data.push(T::of(INIT_STD * if i % 2 == 0 { angle.sin() } else { angle.cos() }));
            }
        }
    }
    Tensor::new(&[batch * len, d], data).expect("positions shape")
}

fn causal_mask<T: Scalar>(len: usize) -> Tensor<T> {
    let data = (0..len * len)
        .map(|k| if k % len > k / len { T::of(MASKED) } else { T::zero() })
        .collect();
    Tensor::new(&[len, len], data).expect("mask shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Variant;

    fn tiny_transformer() -> BackboneConfig {
        BackboneConfig {
            kind: BackboneKind::TinyTransformer,
            d_model: 8,
            d_ff: 16,
            n_layers: 1,
            n_attn_heads: 2,
            vocab_size: 6,
            max_seq_len: 4,
            seed: None,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let a = Backbone::<f32>::build(&tiny_transformer(), &mut Rng::new(4)).unwrap();
        let b = Backbone::<f32>::build(&tiny_transformer(), &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = Backbone::<f32>::build(&tiny_transformer(), &mut Rng::new(5)).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn site_enumeration() {
        assert_eq!(BackboneConfig::mlp(8, 16).site_names().len(), 2);
        assert_eq!(
            tiny_transformer().site_names(),
            vec!["layers.0.gate_proj", "layers.0.up_proj", "layers.0.down_proj"]
        );
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_transformer();
        c.n_attn_heads = 3;
        assert!(c.validate().is_err());
        c.n_attn_heads = 2;
        c.d_ff = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_site_lists_valid_names() {
        let bb = Backbone::<f32>::build(&BackboneConfig::mlp(4, 8), &mut Rng::new(0)).unwrap();
        let err = inject_adapters(bb, &LoraConfig::default(), &["fc3".into()]).unwrap_err();
        match err {
            Error::UnknownSite { name, valid } => {
                assert_eq!(name, "fc3");
                assert_eq!(valid, vec!["fc1", "fc2"]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn parameter_counts_match_shapes() {
        let cfg = BackboneConfig::transformer();
        let bb = Backbone::<f32>::build(&cfg, &mut Rng::new(0)).unwrap();
        let lora = LoraConfig::with_variant(Variant::MultiHead, 4, 3);
        let model = inject_adapters(bb.clone(), &lora, &cfg.site_names()).unwrap();
        let (d, f, r, n) = (256, 512, 4, 3);
        let per = |m: usize, inp: usize| r * inp + n * m * r + n * inp;
        assert_eq!(model.trainable_count(), per(f, d) + per(f, d) + per(d, f));
        let empty = inject_adapters(bb, &lora, &[]).unwrap();
        assert_eq!(empty.trainable_count(), 0);
    }

    #[test]
    fn causal_attention_ignores_future_tokens() {
        let cfg = tiny_transformer();
        let bb = Backbone::<f64>::build(&cfg, &mut Rng::new(1)).unwrap();
        let model = inject_adapters(bb, &LoraConfig::default(), &cfg.site_names()).unwrap();
        // Only the last position is read out, so change an earlier-position
        // token and check the output moves, then confirm sequences are independent.
        let a = model.predict(&Input::Tokens { ids: vec![1, 2, 3, 4, 0, 0, 0, 5], seq_len: 4 }).unwrap();
        let b = model.predict(&Input::Tokens { ids: vec![1, 2, 3, 4], seq_len: 4 }).unwrap();
        assert_eq!(a.row(0), b.row(0));
        let c = model.predict(&Input::Tokens { ids: vec![5, 2, 3, 4], seq_len: 4 }).unwrap();
        assert_ne!(b.row(0), c.row(0));
    }

    #[test]
    fn vocab_and_length_violations() {
        let cfg = tiny_transformer();
        let bb = Backbone::<f64>::build(&cfg, &mut Rng::new(1)).unwrap();
        let model = inject_adapters(bb, &LoraConfig::default(), &[]).unwrap();
        assert!(model.predict(&Input::Tokens { ids: vec![6, 0], seq_len: 2 }).is_err());
        assert!(model.predict(&Input::Tokens { ids: vec![0; 5], seq_len: 5 }).is_err());
        assert!(model.predict(&Input::Features(Tensor::zeros(&[1, 8]))).is_err());
    }
}
