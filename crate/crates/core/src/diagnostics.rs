//! Head-similarity analysis. Everything here runs in `f64`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::Variant;
use crate::backbone::AdaptedModel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-major flattening to `f64`.
pub fn flatten_head<T: Scalar>(b: &Tensor<T>) -> Vec<f64> {
    b.to_f64_vec()
}

/// `None` when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "cosine_similarity",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(Some((dot / (na * nb)).clamp(-1.0, 1.0)))
}

/// Pairwise similarities; rows and columns of zero vectors are `None`.
pub fn cosine_similarity_matrix(heads: &[Vec<f64>]) -> Result<Vec<Vec<Option<f64>>>> {
    let n = heads.len();
    let mut m = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = cosine_similarity(&heads[i], &heads[j])?;
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSimilarity {
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Mean over defined off-diagonal entries.
    pub off_diagonal_mean: Option<f64>,
    /// Mean over all defined entries, diagonal included.
    pub full_mean: Option<f64>,
    /// At least one head is the zero matrix.
    pub degenerate: bool,
}

impl SiteSimilarity {
    pub fn from_heads(heads: &[Vec<f64>]) -> Result<Self> {
        let matrix = cosine_similarity_matrix(heads)?;
        let degenerate = heads.iter().any(|h| h.iter().all(|v| *v == 0.0));
        let mean = |diag: bool| {
            let vals: Vec<f64> = matrix
                .iter()
                .enumerate()
                .flat_map(|(i, row)| row.iter().enumerate().filter(move |(j, _)| diag || i != *j).filter_map(|(_, v)| *v))
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Ok(SiteSimilarity {
            off_diagonal_mean: mean(false),
            full_mean: mean(true),
            matrix,
            degenerate,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub variant: Variant,
    pub seed: Option<u64>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub meta: ReportMeta,
    pub sites: BTreeMap<String, SiteSimilarity>,
    /// Mean of the per-site off-diagonal means over sites where it is defined.
    pub overall_off_diagonal_mean: Option<f64>,
    pub overall_full_mean: Option<f64>,
}

fn mean_defined(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl SimilarityReport {
    pub fn from_sites(meta: ReportMeta, sites: BTreeMap<String, SiteSimilarity>) -> Self {
        SimilarityReport {
            overall_off_diagonal_mean: mean_defined(sites.values().map(|s| s.off_diagonal_mean)),
            overall_full_mean: mean_defined(sites.values().map(|s| s.full_mean)),
            meta,
            sites,
        }
    }

    pub fn all_degenerate(&self) -> bool {
        self.sites.values().all(|s| s.degenerate)
    }

    /// `site,mean,step` rows.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("site,mean,step\n");
        for (site, s) in &self.sites {
            let mean = s.off_diagonal_mean.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{site},{mean},{}\n", self.meta.step));
        }
        out
    }
}

/// Similarity report over every adapted site of a multi-head model.
pub fn report<T: Scalar>(model: &AdaptedModel<T>, seed: Option<u64>, step: u64) -> Result<SimilarityReport> {
    let lora = model.lora();
    if lora.n_heads < 2 || !lora.variant.is_multi_head() {
        return Err(Error::NothingToCompare(format!(
            "{:?} with {} head(s) has no head matrices to compare",
            lora.variant, lora.n_heads
        )));
    }
    let mut sites = BTreeMap::new();
    for (name, layer) in model.adapters() {
        let heads: Vec<Vec<f64>> = layer.heads.iter().map(|b| flatten_head(&b.value)).collect();
        sites.insert(name.clone(), SiteSimilarity::from_heads(&heads)?);
    }
    Ok(SimilarityReport::from_sites(
        ReportMeta {
            variant: lora.variant,
            seed,
            step,
        },
        sites,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadVector {
    pub site: String,
    pub head_index: usize,
    pub vector: Vec<f64>,
}

pub fn head_vectors<T: Scalar>(model: &AdaptedModel<T>) -> Result<Vec<HeadVector>> {
    if !model.lora().variant.is_multi_head() {
        return Err(Error::NothingToCompare(format!("{:?} has no head matrices", model.lora().variant)));
    }
    Ok(model
        .adapters()
        .iter()
        .flat_map(|(site, layer)| {
            layer.heads.iter().enumerate().map(move |(i, b)| HeadVector {
                site: site.clone(),
                head_index: i,
                vector: flatten_head(&b.value),
            })
        })
        .collect())
}

/// One JSON line per head: `{site, head_index, vector}`.
pub fn export_head_vectors<T: Scalar>(model: &AdaptedModel<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for hv in head_vectors(model)? {
        writeln!(w, "{}", serde_json::to_string(&hv)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_head_vectors(path: &Path) -> Result<Vec<HeadVector>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoreDiverse {
    A,
    B,
    Tie,
    Undefined,
}

impl MoreDiverse {
    fn of(delta: Option<f64>) -> Self {
        match delta {
            None => MoreDiverse::Undefined,
            Some(d) if d > 0.0 => MoreDiverse::B,
            Some(d) if d < 0.0 => MoreDiverse::A,
            Some(_) => MoreDiverse::Tie,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteDelta {
    pub mean_a: Option<f64>,
    pub mean_b: Option<f64>,
    pub delta: Option<f64>,
    pub more_diverse: MoreDiverse,
}

/// Deltas are `a − b`; lower similarity means more diverse heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub sites: BTreeMap<String, SiteDelta>,
    pub overall: SiteDelta,
}

fn delta(a: Option<f64>, b: Option<f64>) -> SiteDelta {
    let d = a.zip(b).map(|(a, b)| a - b);
    SiteDelta {
        mean_a: a,
        mean_b: b,
        delta: d,
        more_diverse: MoreDiverse::of(d),
    }
}

pub fn compare_runs(a: &SimilarityReport, b: &SimilarityReport) -> Result<ComparisonSummary> {
    if !a.sites.keys().eq(b.sites.keys()) {
        return Err(Error::StructureMismatch(format!(
            "sites {:?} vs {:?}",
            a.sites.keys().collect::<Vec<_>>(),
            b.sites.keys().collect::<Vec<_>>()
        )));
    }
    let sites = a
        .sites
        .iter()
        .map(|(k, sa)| (k.clone(), delta(sa.off_diagonal_mean, b.sites[k].off_diagonal_mean)))
        .collect();
    Ok(ComparisonSummary {
        sites,
        overall: delta(a.overall_off_diagonal_mean, b.overall_off_diagonal_mean),
    })
}
