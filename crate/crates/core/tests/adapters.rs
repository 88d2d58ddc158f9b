use proptest::prelude::*;
use rlora::adapters::MaskFootprint;
use rlora::autodiff::{dropout, Graph};
use rlora::rng::{sample_gaussian, sample_uniform, Rng};
use rlora::tasks::Input;
use rlora::{
    inject_adapters, AdaptedModel, AdapterLayer, Backbone, BackboneConfig, BackboneKind, Error, InitScheme, LoraConfig, Scalar,
    Tensor, Variant,
};

fn transparency_grid() -> Vec<LoraConfig> {
    vec![
        LoraConfig::vanilla(4),
        LoraConfig::with_variant(Variant::MultiHead, 4, 3),
        LoraConfig::with_variant(Variant::RLoRA, 4, 3),
        LoraConfig {
            init_scheme: Some(InitScheme::ZeroAScaledGaussianB),
            ..LoraConfig::with_variant(Variant::RLoRA, 4, 3)
        },
    ]
}

fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn frozen_and_adapted<T: Scalar>(cfg: &BackboneConfig, lora: &LoraConfig) -> (AdaptedModel<T>, AdaptedModel<T>) {
    let bb = Backbone::<T>::build(cfg, &mut Rng::new(11)).unwrap();
    let frozen = inject_adapters(bb.clone(), lora, &[]).unwrap();
    let adapted = inject_adapters(bb, lora, &cfg.site_names()).unwrap();
    (frozen, adapted)
}

fn check_transparency<T: Scalar>(cfg: &BackboneConfig, input: &Input<T>) {
    for lora in transparency_grid() {
        let (frozen, adapted) = frozen_and_adapted::<T>(cfg, &lora);
        let base = frozen.predict(input).unwrap();
        let out = adapted.predict(input).unwrap();
        let diff = max_abs_diff(&base, &out);
        if lora.init().zero_heads() {
            assert_eq!(base, out, "{:?}/{:?} must be exactly transparent", lora.variant, lora.init());
        } else {
            assert!(diff <= 1e-5, "{:?}/{:?}: max diff {diff:e}", lora.variant, lora.init());
        }
    }
}

#[test]
fn fresh_adapters_reproduce_the_frozen_backbone() {
    let mlp = BackboneConfig::mlp(64, 256);
    let x32: Tensor<f32> = sample_gaussian(&mut Rng::new(1), 0.0, 1.0, &[16, 64]).unwrap();
    check_transparency(&mlp, &Input::Features(x32.clone()));
    check_transparency(&mlp, &Input::Features(x32.cast::<f64>()));

    let tf = BackboneConfig {
        kind: BackboneKind::TinyTransformer,
        d_model: 32,
        d_ff: 64,
        n_layers: 2,
        n_attn_heads: 4,
        vocab_size: 16,
        max_seq_len: 8,
        seed: None,
    };
    let mut r = Rng::new(2);
    let ids: Vec<usize> = (0..4 * 8).map(|_| r.below(16)).collect();
    check_transparency::<f32>(&tf, &Input::Tokens { ids: ids.clone(), seq_len: 8 });
    check_transparency::<f64>(&tf, &Input::Tokens { ids, seq_len: 8 });
}

#[test]
fn offset_is_applied_once() {
    let cfg = BackboneConfig::mlp(8, 16);
    let (_, mut m) = frozen_and_adapted::<f64>(&cfg, &LoraConfig::with_variant(Variant::RLoRA, 2, 3));
    for a in m.adapters_mut() {
        assert!(a.offset_applied());
        assert!(matches!(a.apply_weight_offset(), Err(Error::OffsetAlreadyApplied(_))));
    }
    let (_, zero) = frozen_and_adapted::<f64>(&cfg, &LoraConfig::with_variant(Variant::MultiHead, 2, 3));
    assert!(zero.adapters().values().all(|a| !a.offset_applied()));
}

fn random_layer(seed: u64, variant: Variant) -> AdapterLayer<f64> {
    let mut r = Rng::new(seed);
    let n = 1 + r.below(6);
    let m = 1 + r.below(6);
    let rank = 1 + r.below(3);
    let heads = if variant == Variant::Vanilla { 1 } else { 1 + r.below(4) };
    let lora = LoraConfig::with_variant(variant, rank, heads);
    let w = sample_gaussian(&mut r, 0.0, 1.0, &[m, n]).unwrap();
    let mut layer = AdapterLayer::new("site", w, &lora, &mut r).unwrap();
    for (_, p) in layer.trainables_mut() {
        p.value = sample_gaussian(&mut r, 0.0, 1.0, p.value.shape()).unwrap();
    }
    layer
}

#[test]
fn eval_forward_equals_per_token_merged_matrix() {
    let variants = [
        Variant::Vanilla,
        Variant::MultiAdapter,
        Variant::MultiAdapterMoE,
        Variant::MultiHead,
        Variant::RLoRA,
    ];
    for seed in 0..100u64 {
        let layer = random_layer(seed, variants[seed as usize % variants.len()]);
        let mut r = Rng::new(seed + 1000);
        let b = 1 + r.below(5);
        let x: Tensor<f64> = sample_gaussian(&mut r, 0.0, 1.0, &[b, layer.d_in()]).unwrap();
        let mut g = Graph::new();
        let xv = g.input(x.clone(), false);
        let out = layer.forward(&mut g, xv, false, None).unwrap();
        let got = g.value(out);
        for t in 0..b {
            let row = Tensor::new(&[layer.d_in()], x.row(t).to_vec()).unwrap();
            let w = layer.merged_weight(&row).unwrap();
            let want = Tensor::new(&[1, layer.d_in()], x.row(t).to_vec()).unwrap().matmul_t(&w).unwrap();
            for (a, e) in got.row(t).iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-6, "seed {seed} token {t}: {a} vs {e}");
            }
        }
    }
}

#[test]
fn keep_rate_matches_one_minus_p() {
    let x = Tensor::<f64>::full(&[400, 250], 1.0);
    for p in [0.1, 0.2, 0.5] {
        let (y, mask) = dropout(&x, p, Some(&mut Rng::new(9)), true).unwrap();
        assert!(mask.len() >= 100_000);
        let rate = mask.kept() as f64 / mask.len() as f64;
        assert!((rate - (1.0 - p)).abs() <= 0.01, "p={p}: keep rate {rate}");
        let scale = 1.0 / (1.0 - p);
        assert!(y.data().iter().all(|v| *v == 0.0 || (*v - scale).abs() < 1e-12));
        let (ev, em) = dropout(&x, p, None, false).unwrap();
        assert_eq!(ev, x);
        assert!(em.all_kept());
    }
}

#[test]
fn per_head_masks_are_distinct() {
    // N=3, b=16, r=4: each mask has 64 entries; a pairwise collision has
    // probability (p² + (1−p)²)^64 ≈ 2e-11 at p = 0.2.
    let lora = LoraConfig::with_variant(Variant::RLoRA, 4, 3);
    let w = Tensor::<f64>::zeros(&[8, 12]);
    let layer = AdapterLayer::new("s", w, &lora, &mut Rng::new(0)).unwrap();
    for seed in 0..20 {
        let mut g = Graph::new();
        let x = g.input(sample_gaussian(&mut Rng::new(seed), 0.0, 1.0, &[16, 12]).unwrap(), false);
        let trace = layer.forward_traced(&mut g, x, true, Some(&mut Rng::new(seed))).unwrap();
        assert_eq!(trace.masks.len(), 3);
        assert!(trace.masks.iter().all(|m| m.shape == vec![16, 4]));
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(trace.masks[i], trace.masks[j]);
            }
        }
    }
}

#[test]
fn mask_footprint_per_site() {
    let cfg = BackboneConfig::transformer();
    let bb = Backbone::<f32>::build(&cfg, &mut Rng::new(0)).unwrap();
    let lora = LoraConfig::with_variant(Variant::RLoRA, 4, 3);
    let model = inject_adapters(bb, &lora, &cfg.site_names()).unwrap();
    let b = 32;
    for (site, a) in model.adapters() {
        let f = a.mask_footprint(b);
        assert_eq!(f.multi_head, 3 * b * 4, "{site}");
        assert_eq!(f.input, b * a.d_in(), "{site}");
        if a.d_in() == 256 {
            assert_eq!(f.ratio(), 3.0 / 64.0);
        }
    }
    assert_eq!(
        MaskFootprint {
            multi_head: 3 * 4,
            input: 256
        }
        .ratio(),
        3.0 / 64.0
    );
}

#[test]
fn moe_gates_select_top_k() {
    let mut layer = random_layer(3, Variant::MultiAdapterMoE);
    let n_heads = layer.config().n_heads;
    let x: Tensor<f64> = sample_gaussian(&mut Rng::new(4), 0.0, 1.0, &[5, layer.d_in()]).unwrap();
    let dense_cfg = LoraConfig {
        moe_top_k: Some(n_heads),
        ..layer.config().clone()
    };
    let dense = AdapterLayer::from_parts(
        "site",
        &dense_cfg,
        layer.weight.value.clone(),
        layer.down.iter().map(|p| p.value.clone()).collect(),
        layer.heads.iter().map(|p| p.value.clone()).collect(),
        layer.router.as_ref().map(|p| p.value.clone()),
        false,
    )
    .unwrap();
    let full = dense.routing_weights(&x).unwrap();
    let soft = rlora::autodiff::softmax(&x.matmul_t(&layer.router.as_ref().unwrap().value).unwrap(), 1).unwrap();
    assert!(max_abs_diff(&full, &soft) < 1e-12);
    let gates = layer.routing_weights(&x).unwrap();
    for t in 0..5 {
        let nonzero = gates.row(t).iter().filter(|v| **v > 0.0).count();
        assert_eq!(nonzero, layer.config().top_k());
        assert!((gates.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    layer.router = None;
    assert!(layer.routing_weights(&x).is_err());
}

/// One plain SGD step on every trainable.
fn sgd_step(model: &mut AdaptedModel<f64>, x: &Tensor<f64>, y: &Tensor<f64>, rng: &mut Rng) {
    let mut g = Graph::new();
    let out = model.forward(&mut g, &Input::Features(x.clone()), true, Some(rng)).unwrap();
    let yv = g.constant(y.clone());
    let loss = g.mse_loss(out, yv).unwrap();
    g.backward(loss).unwrap();
    for (name, p) in model.trainables_mut() {
        if let Some(gr) = g.named_grad(&name) {
            p.value = p.value.sub(&gr.scale(0.5)).unwrap();
        }
    }
}

fn head_spread(model: &AdaptedModel<f64>) -> f64 {
    model
        .adapters()
        .values()
        .map(|a| max_abs_diff(&a.heads[0].value, &a.heads[1].value))
        .fold(0.0, f64::max)
}

#[test]
fn zero_heads_stay_identical_without_per_head_masks() {
    let cfg = BackboneConfig::mlp(8, 16);
    let x: Tensor<f64> = sample_gaussian(&mut Rng::new(1), 0.0, 1.0, &[8, 8]).unwrap();
    let y: Tensor<f64> = sample_gaussian(&mut Rng::new(2), 0.0, 1.0, &[8, 8]).unwrap();

    let (_, mut sym) = frozen_and_adapted::<f64>(&cfg, &LoraConfig::with_variant(Variant::MultiHead, 2, 3));
    let mut rng = Rng::new(5);
    for _ in 0..10 {
        sgd_step(&mut sym, &x, &y, &mut rng);
    }
    assert!(sym.adapters().values().all(|a| a.heads[0].value.sq_norm() > 0.0));
    assert_eq!(head_spread(&sym), 0.0);

    let broken = LoraConfig {
        multi_head_dropout: Some(true),
        ..LoraConfig::with_variant(Variant::MultiHead, 2, 3)
    };
    let (_, mut div) = frozen_and_adapted::<f64>(&cfg, &broken);
    let mut rng = Rng::new(5);
    for _ in 0..10 {
        sgd_step(&mut div, &x, &y, &mut rng);
    }
    assert!(head_spread(&div) > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn routing_rows_are_distributions(seed in any::<u64>(), b in 1usize..6) {
        for v in [Variant::MultiAdapter, Variant::MultiAdapterMoE, Variant::MultiHead, Variant::RLoRA] {
            let layer = random_layer(seed, v);
            let x: Tensor<f64> = sample_uniform(&mut Rng::new(seed ^ 7), -3.0, 3.0, &[b, layer.d_in()]).unwrap();
            let w = layer.routing_weights(&x).unwrap();
            for t in 0..b {
                prop_assert!(w.row(t).iter().all(|v| *v >= 0.0));
                prop_assert!((w.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trainable_count_formula(seed in any::<u64>()) {
        let layer = random_layer(seed, Variant::RLoRA);
        let c = layer.config();
        let (m, n) = (layer.d_out(), layer.d_in());
        prop_assert_eq!(layer.trainable_count(), c.rank * n + c.n_heads * m * c.rank + c.n_heads * n);
    }
}
