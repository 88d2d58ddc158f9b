//! Low-rank adapter variants wrapped around a frozen projection `W [m×n]`.
//!
//! | variant           | down-projections | heads | routing                     |
//! |-------------------|------------------|-------|-----------------------------|
//! | `Vanilla`         | 1                | 1     | none                        |
//! | `MultiAdapter`    | N                | N     | uniform `1/N`               |
//! | `MultiAdapterMoE` | N                | N     | softmax over top-K logits   |
//! | `MultiHead`       | 1 (shared)       | N     | softmax of `W_r x`          |
//! | `RLoRA`           | 1 (shared)       | N     | softmax of `W_r x`          |
//!
//! Every adapter path is scaled by `alpha / rank`. Routers start at zero, so the
//! initial routing is uniform (or the first K experts for top-K gating).

mod forward;
mod init;

pub use forward::AdapterTrace;
pub use init::{init_hydra, init_rlora, init_vanilla};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Param, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Vanilla,
    MultiAdapter,
    MultiAdapterMoE,
    MultiHead,
    RLoRA,
}

impl Variant {
    /// One down-projection shared by every head.
    pub fn shares_down(self) -> bool {
        matches!(self, Variant::Vanilla | Variant::MultiHead | Variant::RLoRA)
    }

    pub fn has_router(self) -> bool {
        matches!(self, Variant::MultiAdapterMoE | Variant::MultiHead | Variant::RLoRA)
    }

    pub fn is_multi_head(self) -> bool {
        matches!(self, Variant::MultiHead | Variant::RLoRA)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitScheme {
    /// `A ~ U(±√(3/n))`, `B = 0`.
    KaimingUniform,
    /// `A ~ U(±1/n)`, `B = 0`.
    HydraUniform,
    /// `A ~ c·N(0, 1/n)`, `B ~ c·N(0, 1/m)`, `c = d^{1/4}/√γ`.
    ScaledGaussian,
    /// `A = 0`, `B ~ c·N(0, 1/m)`.
    #[serde(alias = "ZeroA-ScaledGaussianB")]
    ZeroAScaledGaussianB,
}

impl InitScheme {
    pub fn zero_heads(self) -> bool {
        matches!(self, InitScheme::KaimingUniform | InitScheme::HydraUniform)
    }
}

/// Which layer width enters the `d^{1/4}/√γ` prefactor of scaled-Gaussian init.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum ScaleDim {
    #[default]
    Out,
    In,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// Defaults per variant when absent; see [`LoraConfig::init`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_scheme: Option<InitScheme>,
    /// Defaults to `true` for `RLoRA`, `false` otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi_head_dropout: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moe_top_k: Option<usize>,
    #[serde(default)]
    pub scale_dim: ScaleDim,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_rank() -> usize {
    4
}
fn default_alpha() -> f64 {
    32.0
}
fn default_heads() -> usize {
    3
}
fn default_dropout() -> f64 {
    0.2
}
fn default_gamma() -> f64 {
    64.0
}
fn default_variant() -> Variant {
    Variant::RLoRA
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: default_rank(),
            alpha: default_alpha(),
            n_heads: default_heads(),
            dropout_p: default_dropout(),
            gamma: default_gamma(),
            variant: default_variant(),
            init_scheme: None,
            multi_head_dropout: None,
            moe_top_k: None,
            scale_dim: ScaleDim::Out,
            seed: None,
        }
    }
}

impl LoraConfig {
    pub fn vanilla(rank: usize) -> Self {
        LoraConfig {
            rank,
            n_heads: 1,
            variant: Variant::Vanilla,
            ..Default::default()
        }
    }

    pub fn with_variant(variant: Variant, rank: usize, n_heads: usize) -> Self {
        LoraConfig {
            rank,
            n_heads,
            variant,
            ..Default::default()
        }
    }

    pub fn init(&self) -> InitScheme {
        self.init_scheme.unwrap_or(match self.variant {
            Variant::Vanilla | Variant::MultiAdapter | Variant::MultiAdapterMoE => InitScheme::KaimingUniform,
            Variant::MultiHead => InitScheme::HydraUniform,
            Variant::RLoRA => InitScheme::ScaledGaussian,
        })
    }

    pub fn uses_multi_head_dropout(&self) -> bool {
        self.multi_head_dropout
            .unwrap_or(self.variant == Variant::RLoRA)
    }

    pub fn top_k(&self) -> usize {
        self.moe_top_k.unwrap_or(self.n_heads.min(2))
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Number of independent `A` matrices.
    pub fn n_down(&self) -> usize {
        if self.variant.shares_down() {
            1
        } else {
            self.n_heads
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("lora.rank", "must be >= 1"));
        }
        if self.n_heads == 0 {
            return Err(Error::config("lora.n_heads", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("lora.dropout_p", format!("{} not in [0, 1)", self.dropout_p)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("lora.gamma", "must be finite and > 0"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("lora.alpha", "must be finite and > 0"));
        }
        if self.variant == Variant::Vanilla && self.n_heads != 1 {
            return Err(Error::config(
                "lora.n_heads",
                format!("Vanilla uses a single head, got {}", self.n_heads),
            ));
        }
        if self.multi_head_dropout == Some(true) && !self.variant.is_multi_head() {
            return Err(Error::config(
                "lora.multi_head_dropout",
                format!("only meaningful for MultiHead/RLoRA, variant is {:?}", self.variant),
            ));
        }
        if let Some(k) = self.moe_top_k {
            if self.variant != Variant::MultiAdapterMoE {
                return Err(Error::config("lora.moe_top_k", "only valid for MultiAdapterMoE"));
            }
            if k == 0 || k > self.n_heads {
                return Err(Error::config(
                    "lora.moe_top_k",
                    format!("K={k} must lie in 1..={}", self.n_heads),
                ));
            }
        }
        Ok(())
    }
}

/// Dropout-mask element counts for one forward pass over `b` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskFootprint {
    /// `N·b·r`: one mask per head over `H = A x`.
    pub multi_head: usize,
    /// `b·n`: one mask over the input.
    pub input: usize,
}

impl MaskFootprint {
    pub fn ratio(&self) -> f64 {
        self.multi_head as f64 / self.input as f64
    }
}

/// One adapted projection.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer<T> {
    site: String,
    config: LoraConfig,
    /// Frozen base weight `[m×n]`, offset-corrected once for random-head schemes.
    pub weight: Param<T>,
    /// `A` matrices `[r×n]`: one shared, or one per adapter.
    pub down: Vec<Param<T>>,
    /// Head matrices `B_i` `[m×r]`.
    pub heads: Vec<Param<T>>,
    /// Router `W_r` `[N×n]`.
    pub router: Option<Param<T>>,
    offset_applied: bool,
}

impl<T: Scalar> AdapterLayer<T> {
    /// Initializes adapters around `weight` per `config.init()`. The caller
    /// applies [`AdapterLayer::apply_weight_offset`] when heads start nonzero.
    pub fn new(site: impl Into<String>, weight: Tensor<T>, config: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (m, n) = weight.dims2()?;
        let r = config.rank;
        let scheme = config.init();
        let mut down = Vec::with_capacity(config.n_down());
        for _ in 0..config.n_down() {
            let mut a_rng = rng.fork();
            down.push(Param::trainable(init::init_down(&mut a_rng, scheme, m, n, r, config)?));
        }
        let mut heads = Vec::with_capacity(config.n_heads);
        for _ in 0..config.n_heads {
            let mut b_rng = rng.fork();
            heads.push(Param::trainable(init::init_head(&mut b_rng, scheme, m, n, r, config)?));
        }
        let router = config
            .variant
            .has_router()
            .then(|| Param::trainable(Tensor::zeros(&[config.n_heads, n])));
        Ok(AdapterLayer {
            site: site.into(),
            config: config.clone(),
            weight: Param::frozen(weight),
            down,
            heads,
            router,
            offset_applied: false,
        })
    }

    /// Reassembles a layer from stored tensors, checking every shape.
    pub fn from_parts(
        site: impl Into<String>,
        config: &LoraConfig,
        weight: Tensor<T>,
        down: Vec<Tensor<T>>,
        heads: Vec<Tensor<T>>,
        router: Option<Tensor<T>>,
        offset_applied: bool,
    ) -> Result<Self> {
        config.validate()?;
        let site = site.into();
        let (m, n) = weight.dims2()?;
        let r = config.rank;
        let mismatch = |what: &str, got: &[usize], want: &[usize]| {
            Error::StructureMismatch(format!("{site}.{what}: shape {got:?}, expected {want:?}"))
        };
        if down.len() != config.n_down() || heads.len() != config.n_heads {
            return Err(Error::StructureMismatch(format!(
                "{site}: {} down / {} heads, expected {} / {}",
                down.len(),
                heads.len(),
                config.n_down(),
                config.n_heads
            )));
        }
        for a in &down {
            if a.shape() != [r, n] {
                return Err(mismatch("A", a.shape(), &[r, n]));
            }
        }
        for b in &heads {
            if b.shape() != [m, r] {
                return Err(mismatch("B", b.shape(), &[m, r]));
            }
        }
        match (&router, config.variant.has_router()) {
            (Some(w), true) if w.shape() != [config.n_heads, n] => {
                return Err(mismatch("router", w.shape(), &[config.n_heads, n]))
            }
            (None, true) | (Some(_), false) => {
                return Err(Error::StructureMismatch(format!("{site}: router presence mismatch")))
            }
            _ => {}
        }
        Ok(AdapterLayer {
            site,
            config: config.clone(),
            weight: Param::frozen(weight),
            down: down.into_iter().map(Param::trainable).collect(),
            heads: heads.into_iter().map(Param::trainable).collect(),
            router: router.map(Param::trainable),
            offset_applied,
        })
    }

    pub fn site(&self) -> &str {
        &self.site
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn offset_applied(&self) -> bool {
        self.offset_applied
    }

    pub fn down_name(&self, i: usize) -> String {
        if self.config.variant.shares_down() {
            format!("{}.A", self.site)
        } else {
            format!("{}.A.{i}", self.site)
        }
    }

    pub fn head_name(&self, i: usize) -> String {
        format!("{}.B.{i}", self.site)
    }

    pub fn router_name(&self) -> String {
        format!("{}.router", self.site)
    }

    /// Trainable tensors in a fixed order: down, heads, router.
    pub fn trainables(&self) -> Vec<(String, &Param<T>)> {
        let mut out: Vec<(String, &Param<T>)> = Vec::new();
        for (i, a) in self.down.iter().enumerate() {
            out.push((self.down_name(i), a));
        }
        for (i, b) in self.heads.iter().enumerate() {
            out.push((self.head_name(i), b));
        }
        if let Some(w) = &self.router {
            out.push((self.router_name(), w));
        }
        out
    }

    pub fn trainables_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let names: Vec<String> = self.trainables().into_iter().map(|(n, _)| n).collect();
        let params = self
            .down
            .iter_mut()
            .chain(self.heads.iter_mut())
            .chain(self.router.iter_mut());
        names.into_iter().zip(params).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainables().iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn mask_footprint(&self, batch: usize) -> MaskFootprint {
        MaskFootprint {
            multi_head: self.config.n_heads * batch * self.config.rank,
            input: batch * self.d_in(),
        }
    }

    /// Routing weights `[b×N]` for inputs `x [b×n]`, eval semantics.
    pub fn routing_weights(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, _) = x.dims2()?;
        let n_heads = self.config.n_heads;
        match self.config.variant {
            Variant::Vanilla => Ok(Tensor::full(&[b, 1], T::one())),
            Variant::MultiAdapter => Ok(Tensor::full(&[b, n_heads], T::of(1.0 / n_heads as f64))),
            Variant::MultiAdapterMoE => {
                let logits = x.matmul_t(&self.router_value()?.value)?;
                crate::autodiff::top_k_softmax(&logits, self.config.top_k())
            }
            Variant::MultiHead | Variant::RLoRA => {
                let logits = x.matmul_t(&self.router_value()?.value)?;
                crate::autodiff::softmax(&logits, 1)
            }
        }
    }

    fn router_value(&self) -> Result<&Param<T>> {
        self.router
            .as_ref()
            .ok_or_else(|| Error::StructureMismatch(format!("{}: router missing", self.site)))
    }

    fn down_for(&self, head: usize) -> &Param<T> {
        if self.config.variant.shares_down() {
            &self.down[0]
        } else {
            &self.down[head]
        }
    }

    /// `(α/r)·Σ ωᵢ Bᵢ Aᵢ` for the given weights `ω` (length N).
    fn delta_for(&self, omega: &[T]) -> Result<Tensor<T>> {
        let mut delta = Tensor::zeros(self.weight.value.shape());
        for (i, w) in omega.iter().enumerate() {
            if *w == T::zero() {
                continue;
            }
            let ba = self.heads[i].value.matmul(&self.down_for(i).value)?;
            delta.add_assign(&ba.scale(*w))?;
        }
        Ok(delta.scale(T::of(self.config.scaling())))
    }

    /// Effective matrix `W + (α/r)·Σ ωᵢ(x_t)·BᵢAᵢ` seen by token `x_t [n]`.
    pub fn merged_weight(&self, x_t: &Tensor<T>) -> Result<Tensor<T>> {
        if x_t.numel() != self.d_in() {
            return Err(Error::Shape {
                op: "merged_weight",
                left: self.weight.value.shape().to_vec(),
                right: x_t.shape().to_vec(),
            });
        }
        let row = x_t.clone().reshape(&[1, self.d_in()])?;
        let omega = self.routing_weights(&row)?;
        let delta = self.delta_for(omega.data())?;
        self.weight.value.add(&delta)
    }

    /// Routing weights a freshly initialized (zero) router produces.
    pub fn initial_routing(&self) -> Vec<T> {
        let n_heads = self.config.n_heads;
        match self.config.variant {
            Variant::Vanilla => vec![T::one()],
            Variant::MultiAdapterMoE => {
                let k = self.config.top_k();
                (0..n_heads)
                    .map(|i| if i < k { T::of(1.0 / k as f64) } else { T::zero() })
                    .collect()
            }
            _ => vec![T::of(1.0 / n_heads as f64); n_heads],
        }
    }

    /// `W ← W − (α/r)·Σ ω⁰ᵢ Bᵢ Aᵢ` with `ω⁰` the zero-router routing, which for
    /// the multi-head variants is the uniform `1/N` average. Allowed once.
    pub fn apply_weight_offset(&mut self) -> Result<()> {
        if self.offset_applied {
            return Err(Error::OffsetAlreadyApplied(self.site.clone()));
        }
        let delta = self.delta_for(&self.initial_routing())?;
        self.weight.value = self.weight.value.sub(&delta)?;
        self.offset_applied = true;
        Ok(())
    }
}
