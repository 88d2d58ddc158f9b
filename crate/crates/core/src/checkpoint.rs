//! Checkpoint container.
//!
//! Layout: an 8-byte little-endian header length `h`, `h` bytes of JSON header,
//! then the payload. Each manifest entry names a contiguous row-major
//! little-endian slice of the payload. The header is fully checked against the
//! file size before any tensor is read.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterLayer, LoraConfig};
use crate::backbone::{AdaptedModel, Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const BACKBONE_PREFIX: &str = "backbone.";
const ADAPTER_PREFIX: &str = "adapter.";
/// Refuse headers larger than this before allocating for them.
const MAX_HEADER_BYTES: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub backbone: BackboneConfig,
    pub lora: LoraConfig,
    pub targets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub dtype: String,
    pub model: ModelSnapshot,
    /// Full experiment config, when the checkpoint came from an experiment run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<serde_json::Value>,
    pub offsets_applied: BTreeMap<String, bool>,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: AdaptedModel<T>,
    pub step: u64,
    pub experiment: Option<serde_json::Value>,
}

fn down_name(site: &str, lora: &LoraConfig, i: usize) -> String {
    if lora.variant.shares_down() {
        format!("{site}.A")
    } else {
        format!("{site}.A.{i}")
    }
}

/// Named tensors in payload order.
fn tensors_of<T: Scalar>(model: &AdaptedModel<T>) -> Vec<(String, &Tensor<T>)> {
    let mut out: Vec<(String, &Tensor<T>)> = model
        .backbone()
        .params()
        .iter()
        .map(|(k, t)| (format!("{BACKBONE_PREFIX}{k}"), t))
        .collect();
    for (site, layer) in model.adapters() {
        out.push((format!("{ADAPTER_PREFIX}{site}.W"), &layer.weight.value));
        for (name, p) in layer.trainables() {
            out.push((format!("{ADAPTER_PREFIX}{name}"), &p.value));
        }
    }
    out
}

/// Serializes to bytes; `save_checkpoint` writes these atomically.
pub fn encode<T: Scalar>(model: &AdaptedModel<T>, step: u64, experiment: Option<&serde_json::Value>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut manifest = Vec::new();
    for (name, t) in tensors_of(model) {
        let offset = payload.len() as u64;
        for v in t.data() {
            v.write_le(&mut payload);
        }
        manifest.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            nbytes: payload.len() as u64 - offset,
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        model: ModelSnapshot {
            backbone: model.backbone().config().clone(),
            lora: model.lora().clone(),
            targets: model.targets(),
        },
        experiment: experiment.cloned(),
        offsets_applied: model
            .adapters()
            .iter()
            .map(|(k, a)| (k.clone(), a.offset_applied()))
            .collect(),
        step,
        tensors: manifest,
        payload_bytes: payload.len() as u64,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(
    model: &AdaptedModel<T>,
    step: u64,
    experiment: Option<&serde_json::Value>,
    path: &Path,
) -> Result<()> {
    let bytes = encode(model, step, experiment)?;
    let tmp = path.with_extension("bin.tmp");
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Reads and checks the header only. Returns it with the payload's file offset.
pub fn read_header(path: &Path) -> Result<(Header, u64)> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    read_header_from(&mut f, file_len, path)
}

fn read_header_from(f: &mut File, file_len: u64, path: &Path) -> Result<(Header, u64)> {
    if file_len < 8 {
        return Err(corrupt(format!("file is {file_len} bytes; the length prefix alone needs 8")));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
    let header_len = u64::from_le_bytes(len);
    if header_len > MAX_HEADER_BYTES || 8 + header_len > file_len {
        return Err(corrupt(format!(
            "header declares {header_len} bytes at offset 8 but the file has {} bytes after the prefix",
            file_len - 8
        )));
    }
    let mut buf = vec![0u8; header_len as usize];
    f.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    let header: Header =
        serde_json::from_slice(&buf).map_err(|e| corrupt(format!("header JSON unreadable: {e}")))?;
    let payload_start = 8 + header_len;
    check_header(&header, file_len - payload_start, payload_start)?;
    Ok((header, payload_start))
}

fn check_header(h: &Header, available: u64, payload_start: u64) -> Result<()> {
    if h.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            h.format_version
        )));
    }
    let elem = match h.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(corrupt(format!("unknown dtype `{other}`"))),
    };
    if available < h.payload_bytes {
        return Err(corrupt(format!(
            "truncated payload: header declares {} bytes starting at file offset {payload_start}, only {available} present (file ends at offset {})",
            h.payload_bytes,
            payload_start + available
        )));
    }
    if available > h.payload_bytes {
        return Err(corrupt(format!(
            "{} trailing bytes after payload end at file offset {}",
            available - h.payload_bytes,
            payload_start + h.payload_bytes
        )));
    }
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(h.tensors.len());
    for t in &h.tensors {
        if t.dtype != h.dtype {
            return Err(corrupt(format!("{}: dtype {} in a {} checkpoint", t.name, t.dtype, h.dtype)));
        }
        let numel = t.shape.iter().try_fold(1u64, |acc, d| acc.checked_mul(*d as u64));
        if numel.and_then(|n| n.checked_mul(elem)) != Some(t.nbytes) || t.shape.contains(&0) {
            return Err(corrupt(format!("{}: {} bytes do not match shape {:?}", t.name, t.nbytes, t.shape)));
        }
        match t.offset.checked_add(t.nbytes) {
            Some(end) if end <= h.payload_bytes => spans.push((t.offset, end, &t.name)),
            _ => {
                return Err(corrupt(format!(
                    "{}: bytes {}..{} exceed payload of {} bytes",
                    t.name,
                    t.offset,
                    t.offset.saturating_add(t.nbytes),
                    h.payload_bytes
                )))
            }
        }
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(corrupt(format!("{} overlaps {} at payload offset {}", w[1].2, w[0].2, w[1].0)));
        }
    }
    h.model.backbone.validate()?;
    h.model.lora.validate()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = f.metadata().map_err(|e| Error::io(path, e))?.len();
    let (header, payload_start) = read_header_from(&mut f, file_len, path)?;
    if header.dtype != T::DTYPE {
        return Err(corrupt(format!("checkpoint holds {} tensors, requested {}", header.dtype, T::DTYPE)));
    }
    f.seek(SeekFrom::Start(payload_start)).map_err(|e| Error::io(path, e))?;
    let mut payload = vec![0u8; header.payload_bytes as usize];
    f.read_exact(&mut payload).map_err(|e| Error::io(path, e))?;

    let mut tensors: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for t in &header.tensors {
        let bytes = &payload[t.offset as usize..(t.offset + t.nbytes) as usize];
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        if tensors.insert(t.name.clone(), Tensor::new(&t.shape, data)?).is_some() {
            return Err(corrupt(format!("duplicate tensor {}", t.name)));
        }
    }
    let model = assemble(&header, tensors)?;
    Ok(Checkpoint {
        model,
        step: header.step,
        experiment: header.experiment,
    })
}

fn assemble<T: Scalar>(header: &Header, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<AdaptedModel<T>> {
    let snap = &header.model;
    let mut take = |name: String| {
        tensors
            .remove(&name)
            .ok_or_else(|| Error::StructureMismatch(format!("checkpoint lacks tensor {name}")))
    };
    let mut frozen = BTreeMap::new();
    for (name, _) in snap.backbone.layout() {
        let t = take(format!("{BACKBONE_PREFIX}{name}"))?;
        frozen.insert(name, t);
    }
    let backbone = Backbone::from_params(&snap.backbone, frozen)?;

    let lora = &snap.lora;
    let mut layers = Vec::new();
    for site in &snap.targets {
        let w = take(format!("{ADAPTER_PREFIX}{site}.W"))?;
        let down = (0..lora.n_down())
            .map(|i| take(format!("{ADAPTER_PREFIX}{}", down_name(site, lora, i))))
            .collect::<Result<Vec<_>>>()?;
        let heads = (0..lora.n_heads)
            .map(|i| take(format!("{ADAPTER_PREFIX}{site}.B.{i}")))
            .collect::<Result<Vec<_>>>()?;
        let router = if lora.variant.has_router() {
            Some(take(format!("{ADAPTER_PREFIX}{site}.router"))?)
        } else {
            None
        };
        let applied = header.offsets_applied.get(site).copied().unwrap_or(false);
        layers.push(AdapterLayer::from_parts(site.clone(), lora, w, down, heads, router, applied)?);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::StructureMismatch(format!("unexpected tensor {extra}")));
    }
    AdaptedModel::from_parts(backbone, lora.clone(), layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Variant;
    use crate::backbone::inject_adapters;
    use crate::rng::Rng;

    fn model() -> AdaptedModel<f32> {
        let cfg = BackboneConfig::mlp(4, 6);
        let bb = Backbone::build(&cfg, &mut Rng::new(1)).unwrap();
        let lora = LoraConfig::with_variant(Variant::RLoRA, 2, 3);
        inject_adapters(bb, &lora, &cfg.site_names()).unwrap()
    }

    #[test]
    fn round_trip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let m = model();
        save_checkpoint(&m, 7, None, &p).unwrap();
        let c = load_checkpoint::<f32>(&p).unwrap();
        assert_eq!(c.model, m);
        assert_eq!(c.step, 7);
        let q = dir.path().join("d.bin");
        save_checkpoint(&c.model, 7, None, &q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        let (h, _) = read_header(&p).unwrap();
        assert_eq!(h.tensors.len(), 2 + 2 * (1 + 1 + 3 + 1));
    }

    #[test]
    fn truncation_and_dtype_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        save_checkpoint(&model(), 0, None, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_checkpoint::<f32>(&p).unwrap_err().to_string();
        assert!(err.contains("truncated payload") && err.contains("offset"), "{err}");
        std::fs::write(&p, &bytes[..4]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&p), Err(Error::Checkpoint(_))));
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f64>(&p), Err(Error::Checkpoint(_))));
    }
}
