use std::path::Path;

use rlora::checkpoint::{encode, load_checkpoint, read_header, save_checkpoint, Header};
use rlora::rng::{sample_gaussian, Rng};
use rlora::tasks::Input;
use rlora::{
    inject_adapters, AdaptedModel, Backbone, BackboneConfig, BackboneKind, Error, InitScheme, LoraConfig, Scalar, Variant,
};

const VARIANTS: [Variant; 5] = [
    Variant::Vanilla,
    Variant::MultiAdapter,
    Variant::MultiAdapterMoE,
    Variant::MultiHead,
    Variant::RLoRA,
];

fn random_model<T: Scalar>(seed: u64) -> (AdaptedModel<T>, Input<T>) {
    let mut r = Rng::new(seed);
    let variant = VARIANTS[seed as usize % VARIANTS.len()];
    let heads = if variant == Variant::Vanilla { 1 } else { 2 + r.below(3) };
    let lora = LoraConfig {
        seed: Some(seed),
        ..LoraConfig::with_variant(variant, 1 + r.below(4), heads)
    };
    let (cfg, input) = if seed.is_multiple_of(2) {
        let d = 4 + r.below(8);
        let cfg = BackboneConfig::mlp(d, 2 * d);
        let x = sample_gaussian(&mut r, 0.0, 1.0, &[5, d]).unwrap();
        (cfg, Input::Features(x))
    } else {
        let cfg = BackboneConfig {
            kind: BackboneKind::TinyTransformer,
            d_model: 8,
            d_ff: 16,
            n_layers: 1 + r.below(2),
            n_attn_heads: 2,
            vocab_size: 12,
            max_seq_len: 5,
            seed: None,
        };
        let ids = (0..15).map(|_| r.below(12)).collect();
        (cfg, Input::Tokens { ids, seq_len: 5 })
    };
    let targets = cfg.site_names();
    let bb = Backbone::build(&cfg, &mut r).unwrap();
    let mut m = inject_adapters(bb, &lora, &targets).unwrap();
    // Perturb every trainable so the round trip is not just the init.
    for (_, p) in m.trainables_mut() {
        p.value = sample_gaussian(&mut r, 0.0, 0.1, p.value.shape()).unwrap();
    }
    (m, input)
}

fn round_trip<T: Scalar>(seed: u64, dir: &Path) {
    let (m, input) = random_model::<T>(seed);
    let before = m.predict(&input).unwrap();
    let p = dir.join(format!("{seed}.bin"));
    save_checkpoint(&m, seed, None, &p).unwrap();
    let loaded = load_checkpoint::<T>(&p).unwrap();
    assert_eq!(loaded.step, seed);
    let after = loaded.model.predict(&input).unwrap();
    let bits = |t: &rlora::Tensor<T>| t.data().iter().map(|v| v.as_f64().to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(&after), "seed {seed}");
    assert_eq!(loaded.model, m);

    let (h, _) = read_header(&p).unwrap();
    // Backbone tensors, adapter trainables, and each site's offset-adjusted base weight.
    assert_eq!(h.tensors.len(), m.backbone().params().len() + m.trainables().len() + m.adapters().len());
    let again = dir.join(format!("{seed}-again.bin"));
    save_checkpoint(&loaded.model, seed, None, &again).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn ten_random_models_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..10 {
        if seed % 3 == 0 {
            round_trip::<f64>(seed, dir.path());
        } else {
            round_trip::<f32>(seed, dir.path());
        }
    }
}

#[test]
fn offset_state_survives_reload() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BackboneConfig::mlp(6, 12);
    let bb = Backbone::<f32>::build(&cfg, &mut Rng::new(0)).unwrap();
    let lora = LoraConfig {
        init_scheme: Some(InitScheme::ZeroAScaledGaussianB),
        ..LoraConfig::with_variant(Variant::RLoRA, 2, 3)
    };
    let m = inject_adapters(bb, &lora, &cfg.site_names()).unwrap();
    let p = dir.path().join("c.bin");
    save_checkpoint(&m, 0, None, &p).unwrap();
    let mut back = load_checkpoint::<f32>(&p).unwrap().model;
    for a in back.adapters_mut() {
        assert!(a.offset_applied());
        assert!(matches!(a.apply_weight_offset(), Err(Error::OffsetAlreadyApplied(_))));
    }
}

/// Rewrites a checkpoint with an edited header and the original payload.
fn with_header(src: &Path, dst: &Path, edit: impl FnOnce(&mut Header)) {
    let bytes = std::fs::read(src).unwrap();
    let (mut h, start) = read_header(src).unwrap();
    edit(&mut h);
    let json = serde_json::to_vec(&h).unwrap();
    let mut out = (json.len() as u64).to_le_bytes().to_vec();
    out.extend(json);
    out.extend(&bytes[start as usize..]);
    std::fs::write(dst, out).unwrap();
}

fn corrupt_message(p: &Path) -> String {
    match load_checkpoint::<f32>(p) {
        Err(Error::Checkpoint(msg)) => msg,
        Err(e) => panic!("expected a checkpoint error, got {e}"),
        Ok(_) => panic!("corrupt checkpoint loaded"),
    }
}

#[test]
fn manifest_integrity_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.bin");
    let bad = dir.path().join("bad.bin");
    let (m, _) = random_model::<f32>(4);
    save_checkpoint(&m, 0, None, &good).unwrap();

    with_header(&good, &bad, |h| h.format_version = 99);
    assert!(corrupt_message(&bad).contains("version"));

    with_header(&good, &bad, |h| h.tensors[1].offset = h.tensors[0].offset + 4);
    assert!(corrupt_message(&bad).contains("overlaps"));

    with_header(&good, &bad, |h| h.tensors[0].offset = h.payload_bytes);
    assert!(corrupt_message(&bad).contains("exceed payload"));

    with_header(&good, &bad, |h| h.tensors[0].shape.push(2));
    assert!(corrupt_message(&bad).contains("do not match shape"));

    with_header(&good, &bad, |h| {
        h.tensors.pop();
    });
    assert!(load_checkpoint::<f32>(&bad).is_err());

    with_header(&good, &bad, |h| h.model.lora.rank += 1);
    assert!(load_checkpoint::<f32>(&bad).is_err());

    let mut bytes = std::fs::read(&good).unwrap();
    bytes.extend([0u8; 3]);
    std::fs::write(&bad, &bytes).unwrap();
    assert!(corrupt_message(&bad).contains("trailing"));

    std::fs::write(&bad, &bytes[..bytes.len() - 10]).unwrap();
    let msg = corrupt_message(&bad);
    assert!(msg.contains("truncated") && msg.contains("offset"), "{msg}");

    std::fs::write(&bad, u64::MAX.to_le_bytes()).unwrap();
    assert!(corrupt_message(&bad).contains("header declares"));

    std::fs::write(&bad, [1u8, 2]).unwrap();
    assert!(corrupt_message(&bad).contains("length prefix"));

    assert!(matches!(load_checkpoint::<f64>(&good), Err(Error::Checkpoint(_))));
}

#[test]
fn embedded_experiment_is_returned() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.bin");
    let (m, _) = random_model::<f32>(2);
    let exp = serde_json::json!({"name": "x", "seed": 5});
    save_checkpoint(&m, 3, Some(&exp), &p).unwrap();
    let c = load_checkpoint::<f32>(&p).unwrap();
    assert_eq!(c.experiment, Some(exp.clone()));
    assert_eq!(encode(&m, 3, Some(&exp)).unwrap(), std::fs::read(&p).unwrap());
}
