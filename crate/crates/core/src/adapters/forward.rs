use super::{AdapterLayer, Variant};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::{Mask, Rng};
use crate::scalar::Scalar;

/// Output of an adapter forward pass plus the dropout masks it drew.
#[derive(Debug)]
pub struct AdapterTrace {
    pub out: Var,
    /// Input-dropout mask (one) or per-head masks over `H` (N).
    pub masks: Vec<Mask>,
}

impl<T: Scalar> AdapterLayer<T> {
    /// Dispatches on the configured variant.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, training: bool, rng: Option<&mut Rng>) -> Result<Var> {
        Ok(self.forward_traced(g, x, training, rng)?.out)
    }

    pub fn forward_traced(&self, g: &mut Graph<T>, x: Var, training: bool, rng: Option<&mut Rng>) -> Result<AdapterTrace> {
        match self.config.variant {
            Variant::Vanilla => self.forward_vanilla(g, x, training, rng),
            Variant::MultiAdapter => self.forward_multi_adapter(g, x, training, rng),
            Variant::MultiAdapterMoE => self.forward_moe(g, x, training, rng),
            Variant::MultiHead | Variant::RLoRA => self.forward_multihead(g, x, training, rng),
        }
    }

    fn expect_variant(&self, ok: bool, op: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "{op} does not apply to variant {:?}",
                self.config.variant
            )))
        }
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.d_in() {
            return Err(Error::Shape {
                op: "adapter forward",
                left: self.weight.value.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// `x Wᵀ + (α/r)·(dropout(x) Aᵀ) Bᵀ`.
    pub fn forward_vanilla(&self, g: &mut Graph<T>, x: Var, training: bool, rng: Option<&mut Rng>) -> Result<AdapterTrace> {
        self.expect_variant(self.config.variant == Variant::Vanilla, "forward_vanilla")?;
        self.check_input(g, x)?;
        let w = g.param(format!("{}.W", self.site), &self.weight);
        let base = g.linear(x, w)?;
        let (xd, mask) = g.dropout(x, self.config.dropout_p, rng, training)?;
        let a = g.param(self.down_name(0), &self.down[0]);
        let b = g.param(self.head_name(0), &self.heads[0]);
        let h = g.linear(xd, a)?;
        let y = g.linear(h, b)?;
        let y = g.scale(y, T::of(self.config.scaling()));
        Ok(AdapterTrace {
            out: g.add(base, y)?,
            masks: vec![mask],
        })
    }

    /// Shared `A`, N heads mixed by `ω = softmax(W_r x)` per token. With
    /// multi-head dropout each head sees its own mask over `H = A x`;
    /// otherwise the input is dropped once before `A`.
    pub fn forward_multihead(&self, g: &mut Graph<T>, x: Var, training: bool, mut rng: Option<&mut Rng>) -> Result<AdapterTrace> {
        self.expect_variant(self.config.variant.is_multi_head(), "forward_multihead")?;
        self.check_input(g, x)?;
        let p = self.config.dropout_p;
        let per_head = self.config.uses_multi_head_dropout();

        let w = g.param(format!("{}.W", self.site), &self.weight);
        let base = g.linear(x, w)?;
        let wr = g.param(self.router_name(), self.router_value()?);
        let logits = g.linear(x, wr)?;
        let omega = g.softmax(logits, 1)?;

        let mut masks = Vec::new();
        let x_in = if per_head {
            x
        } else {
            let (xd, mask) = g.dropout(x, p, rng.as_deref_mut(), training)?;
            masks.push(mask);
            xd
        };
        let a = g.param(self.down_name(0), &self.down[0]);
        let h = g.linear(x_in, a)?;

        let mut acc = None;
        for (i, head) in self.heads.iter().enumerate() {
            let h_i = if per_head {
                let (hd, mask) = g.dropout(h, p, rng.as_deref_mut(), training)?;
                masks.push(mask);
                hd
            } else {
                h
            };
            let b = g.param(self.head_name(i), head);
            let y = g.linear(h_i, b)?;
            let w_i = g.column(omega, i)?;
            let y = g.row_scale(y, w_i)?;
            acc = Some(match acc {
                Some(s) => g.add(s, y)?,
                None => y,
            });
        }
        let delta = g.scale(acc.expect("at least one head"), T::of(self.config.scaling()));
        Ok(AdapterTrace {
            out: g.add(base, delta)?,
            masks,
        })
    }

    /// Independent `(Aᵢ, Bᵢ)` experts gated by softmax over the top-K router logits.
    pub fn forward_moe(&self, g: &mut Graph<T>, x: Var, training: bool, rng: Option<&mut Rng>) -> Result<AdapterTrace> {
        self.expect_variant(self.config.variant == Variant::MultiAdapterMoE, "forward_moe")?;
        self.check_input(g, x)?;
        let k = self.config.top_k();
        if k > self.config.n_heads {
            return Err(Error::config(
                "lora.moe_top_k",
                format!("K={k} exceeds N={}", self.config.n_heads),
            ));
        }
        let w = g.param(format!("{}.W", self.site), &self.weight);
        let base = g.linear(x, w)?;
        let wr = g.param(self.router_name(), self.router_value()?);
        let logits = g.linear(x, wr)?;
        let gates = g.top_k_softmax(logits, k)?;
        let (xd, mask) = g.dropout(x, self.config.dropout_p, rng, training)?;
        let mut acc = None;
        for i in 0..self.config.n_heads {
            let a = g.param(self.down_name(i), &self.down[i]);
            let b = g.param(self.head_name(i), &self.heads[i]);
            let h = g.linear(xd, a)?;
            let y = g.linear(h, b)?;
            let s_i = g.column(gates, i)?;
            let y = g.row_scale(y, s_i)?;
            acc = Some(match acc {
                Some(s) => g.add(s, y)?,
                None => y,
            });
        }
        let delta = g.scale(acc.expect("at least one expert"), T::of(self.config.scaling()));
        Ok(AdapterTrace {
            out: g.add(base, delta)?,
            masks: vec![mask],
        })
    }

    /// N independent LoRA adapters averaged with equal weight.
    pub fn forward_multi_adapter(&self, g: &mut Graph<T>, x: Var, training: bool, rng: Option<&mut Rng>) -> Result<AdapterTrace> {
        self.expect_variant(self.config.variant == Variant::MultiAdapter, "forward_multi_adapter")?;
        self.check_input(g, x)?;
        let w = g.param(format!("{}.W", self.site), &self.weight);
        let base = g.linear(x, w)?;
        let (xd, mask) = g.dropout(x, self.config.dropout_p, rng, training)?;
        let mut acc = None;
        for i in 0..self.config.n_heads {
            let a = g.param(self.down_name(i), &self.down[i]);
            let b = g.param(self.head_name(i), &self.heads[i]);
            let h = g.linear(xd, a)?;
            let y = g.linear(h, b)?;
            acc = Some(match acc {
                Some(s) => g.add(s, y)?,
                None => y,
            });
        }
        let scale = self.config.scaling() / self.config.n_heads as f64;
        let delta = g.scale(acc.expect("at least one adapter"), T::of(scale));
        Ok(AdapterTrace {
            out: g.add(base, delta)?,
            masks: vec![mask],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{InitScheme, LoraConfig};
    use super::*;
    use crate::rng::sample_gaussian;
    use crate::tensor::Tensor;

    fn gaussian(seed: u64, shape: &[usize]) -> Tensor<f64> {
        sample_gaussian(&mut Rng::new(seed), 0.0, 1.0, shape).unwrap()
    }

    fn eval(layer: &AdapterLayer<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = layer.forward(&mut g, xv, false, None).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn fresh_vanilla_is_base() {
        let w = gaussian(1, &[3, 5]);
        let layer = AdapterLayer::new("s", w.clone(), &LoraConfig::vanilla(2), &mut Rng::new(2)).unwrap();
        let x = gaussian(3, &[4, 5]);
        assert_eq!(eval(&layer, &x), x.matmul_t(&w).unwrap());
    }

    #[test]
    fn identity_composition() {
        let mut cfg = LoraConfig::vanilla(3);
        cfg.alpha = 3.0;
        cfg.dropout_p = 0.0;
        let mut layer = AdapterLayer::new("s", Tensor::zeros(&[3, 3]), &cfg, &mut Rng::new(0)).unwrap();
        layer.down[0].value = Tensor::eye(3);
        layer.heads[0].value = Tensor::eye(3);
        let x = gaussian(4, &[2, 3]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = layer.forward(&mut g, xv, true, None).unwrap();
        assert_eq!(g.value(out), &x);
    }

    #[test]
    fn vanilla_matches_merged_weight() {
        let w = gaussian(1, &[2, 3]);
        let mut layer = AdapterLayer::new("s", w.clone(), &LoraConfig::vanilla(1), &mut Rng::new(2)).unwrap();
        layer.heads[0].value = gaussian(5, &[2, 1]);
        let x = gaussian(6, &[1, 3]);
        let ba = layer.heads[0].value.matmul(&layer.down[0].value).unwrap();
        let merged = w.add(&ba.scale(32.0)).unwrap();
        let expect = x.matmul_t(&merged).unwrap();
        for (a, b) in eval(&layer, &x).data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hydra_init_multihead_is_base() {
        let w = gaussian(1, &[4, 6]);
        let layer = AdapterLayer::new("s", w.clone(), &LoraConfig::with_variant(Variant::MultiHead, 2, 3), &mut Rng::new(2)).unwrap();
        let x = gaussian(3, &[5, 6]);
        assert_eq!(eval(&layer, &x), x.matmul_t(&w).unwrap());
    }

    #[test]
    fn symmetric_heads_collapse_to_vanilla() {
        let w = gaussian(1, &[4, 5]);
        let mut cfg = LoraConfig::with_variant(Variant::MultiHead, 2, 2);
        cfg.init_scheme = Some(InitScheme::ScaledGaussian);
        let mut mh = AdapterLayer::new("s", w.clone(), &cfg, &mut Rng::new(2)).unwrap();
        let b = gaussian(7, &[4, 2]);
        mh.heads[0].value = b.clone();
        mh.heads[1].value = b.clone();
        let mut van = AdapterLayer::new("s", w, &LoraConfig::vanilla(2), &mut Rng::new(2)).unwrap();
        van.down[0].value = mh.down[0].value.clone();
        van.heads[0].value = b;
        let x = gaussian(8, &[3, 5]);
        for (a, b) in eval(&mh, &x).data().iter().zip(eval(&van, &x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn moe_top1_selects_single_expert() {
        let w = gaussian(1, &[3, 4]);
        let mut cfg = LoraConfig::with_variant(Variant::MultiAdapterMoE, 2, 2);
        cfg.moe_top_k = Some(1);
        let mut layer = AdapterLayer::new("s", w.clone(), &cfg, &mut Rng::new(2)).unwrap();
        for (i, b) in layer.heads.iter_mut().enumerate() {
            b.value = gaussian(10 + i as u64, &[3, 2]);
        }
        layer.router.as_mut().unwrap().value = gaussian(20, &[2, 4]);
        let x = gaussian(30, &[1, 4]);
        let gates = layer.routing_weights(&x).unwrap();
        let chosen = if gates.data()[0] == 1.0 { 0 } else { 1 };
        assert_eq!(gates.data()[chosen], 1.0);
        assert_eq!(gates.data()[1 - chosen], 0.0);
        // explicit selection oracle: vanilla forward with the chosen expert
        let mut van = AdapterLayer::new("s", w, &LoraConfig::vanilla(2), &mut Rng::new(0)).unwrap();
        van.down[0].value = layer.down[chosen].value.clone();
        van.heads[0].value = layer.heads[chosen].value.clone();
        for (a, b) in eval(&layer, &x).data().iter().zip(eval(&van, &x).data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn moe_full_k_is_dense_softmax() {
        let mut cfg = LoraConfig::with_variant(Variant::MultiAdapterMoE, 2, 3);
        cfg.moe_top_k = Some(3);
        let mut layer = AdapterLayer::<f64>::new("s", gaussian(1, &[3, 4]), &cfg, &mut Rng::new(2)).unwrap();
        layer.router.as_mut().unwrap().value = gaussian(20, &[3, 4]);
        let x = gaussian(30, &[5, 4]);
        let gates = layer.routing_weights(&x).unwrap();
        let dense = crate::autodiff::softmax(&x.matmul_t(&layer.router.as_ref().unwrap().value).unwrap(), 1).unwrap();
        for (a, b) in gates.data().iter().zip(dense.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_variant_and_shape_rejected() {
        let layer = AdapterLayer::<f64>::new("s", gaussian(1, &[3, 4]), &LoraConfig::vanilla(2), &mut Rng::new(2)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(gaussian(2, &[2, 4]));
        assert!(layer.forward_multihead(&mut g, x, false, None).is_err());
        let bad = g.constant(gaussian(2, &[2, 5]));
        assert!(matches!(layer.forward(&mut g, bad, false, None), Err(Error::Shape { .. })));
        assert!(matches!(layer.forward(&mut g, x, true, None), Err(Error::MissingRng)));
    }

    #[test]
    fn per_head_masks_are_independent() {
        let cfg = LoraConfig::default();
        let layer = AdapterLayer::<f64>::new("s", gaussian(1, &[8, 16]), &cfg, &mut Rng::new(2)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(gaussian(2, &[32, 16]));
        let trace = layer.forward_traced(&mut g, x, true, Some(&mut Rng::new(3))).unwrap();
        assert_eq!(trace.masks.len(), 3);
        assert!(trace.masks.iter().all(|m| m.shape == vec![32, 4]));
        assert_ne!(trace.masks[0], trace.masks[1]);
        assert_ne!(trace.masks[1], trace.masks[2]);

        let mut no_md = cfg.clone();
        no_md.multi_head_dropout = Some(false);
        let layer = AdapterLayer::<f64>::new("s", gaussian(1, &[8, 16]), &no_md, &mut Rng::new(2)).unwrap();
        let trace = layer.forward_traced(&mut g, x, true, Some(&mut Rng::new(3))).unwrap();
        assert_eq!(trace.masks.len(), 1);
        assert_eq!(trace.masks[0].shape, vec![32, 16]);
    }
}
