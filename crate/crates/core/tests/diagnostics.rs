use proptest::prelude::*;
use rlora::diagnostics::{
    compare_runs, cosine_similarity, cosine_similarity_matrix, export_head_vectors, flatten_head, head_vectors,
    read_head_vectors, report, MoreDiverse, SimilarityReport,
};
use rlora::rng::Rng;
use rlora::{inject_adapters, AdaptedModel, Backbone, BackboneConfig, Error, LoraConfig, Tensor, Variant};

fn transformer(lora: &LoraConfig) -> AdaptedModel<f32> {
    let cfg = BackboneConfig::transformer();
    let bb = Backbone::build(&cfg, &mut Rng::new(0)).unwrap();
    inject_adapters(bb, lora, &cfg.site_names()).unwrap()
}

fn rlora(seed: u64) -> LoraConfig {
    LoraConfig {
        seed: Some(seed),
        ..LoraConfig::with_variant(Variant::RLoRA, 4, 3)
    }
}

#[test]
fn fresh_random_heads_are_nearly_orthogonal() {
    for seed in 0..3 {
        let m = transformer(&rlora(seed));
        assert!(m.adapters().values().all(|a| a.d_out() * 4 >= 1024));
        let rep = report(&m, Some(seed), 0).unwrap();
        let mean = rep.overall_off_diagonal_mean.unwrap();
        assert!(mean.abs() < 0.1, "seed {seed}: {mean}");
        assert!(!rep.all_degenerate());
    }
}

#[test]
fn zero_heads_are_degenerate() {
    let m = transformer(&LoraConfig::with_variant(Variant::MultiHead, 4, 3));
    let rep = report(&m, None, 0).unwrap();
    assert!(rep.all_degenerate());
    assert_eq!(rep.overall_off_diagonal_mean, None);
    for s in rep.sites.values() {
        assert!(s.matrix.iter().flatten().all(Option::is_none));
    }
}

#[test]
fn identical_heads_score_one() {
    let mut m = transformer(&rlora(1));
    for a in m.adapters_mut() {
        let h0 = a.heads[0].value.clone();
        for h in &mut a.heads {
            h.value = h0.clone();
        }
    }
    let rep = report(&m, None, 0).unwrap();
    for s in rep.sites.values() {
        assert!((s.off_diagonal_mean.unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn report_matrix_shape_and_bounds() {
    let rep = report(&transformer(&rlora(2)), Some(2), 7).unwrap();
    assert_eq!(rep.meta.step, 7);
    assert_eq!(rep.sites.len(), 3);
    for s in rep.sites.values() {
        assert_eq!(s.matrix.len(), 3);
        for i in 0..3 {
            assert!((s.matrix[i][i].unwrap() - 1.0).abs() < 1e-9);
            for j in 0..3 {
                let v = s.matrix[i][j].unwrap();
                assert!((-1.0..=1.0).contains(&v));
                assert_eq!(s.matrix[i][j], s.matrix[j][i]);
            }
        }
        // With a unit diagonal, full = (N·off·(N−1) + N) / N².
        let off = s.off_diagonal_mean.unwrap();
        assert!((s.full_mean.unwrap() - (6.0 * off + 3.0) / 9.0).abs() < 1e-12);
    }
    let csv = rep.summary_csv();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("site,mean,step\n"));
}

#[test]
fn report_is_deterministic_and_serializes() {
    let m = transformer(&rlora(3));
    let a = report(&m, Some(3), 0).unwrap();
    assert_eq!(a, report(&m, Some(3), 0).unwrap());
    let json = serde_json::to_string(&a).unwrap();
    let back: SimilarityReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a);
}

#[test]
fn single_head_models_have_nothing_to_compare() {
    let m = transformer(&LoraConfig::vanilla(4));
    assert!(matches!(report(&m, None, 0), Err(Error::NothingToCompare(_))));
    assert!(matches!(head_vectors(&m), Err(Error::NothingToCompare(_))));
}

#[test]
fn export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("heads.jsonl");
    let m = transformer(&rlora(4));
    export_head_vectors(&m, &p).unwrap();
    assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 9);
    let back = read_head_vectors(&p).unwrap();
    assert_eq!(back, head_vectors(&m).unwrap());
    for hv in &back {
        let b = &m.adapters()[&hv.site].heads[hv.head_index].value;
        let want = flatten_head(b);
        assert_eq!(hv.vector.len(), b.numel());
        assert!(hv.vector.iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn collinear_and_orthogonal_vectors() {
    assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), Some(0.0));
    let up = cosine_similarity(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap().unwrap();
    let down = cosine_similarity(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]).unwrap().unwrap();
    assert!((up - 1.0).abs() < 1e-15 && (down + 1.0).abs() < 1e-15);
    assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    assert!(cosine_similarity_matrix(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    assert_eq!(flatten_head(&Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()), [1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn comparison_deltas() {
    let a = report(&transformer(&rlora(5)), None, 0).unwrap();
    let same = compare_runs(&a, &a).unwrap();
    assert_eq!(same.overall.delta, Some(0.0));
    assert!(same.sites.values().all(|d| d.delta == Some(0.0) && d.more_diverse == MoreDiverse::Tie));

    let mut hi = a.clone();
    let mut lo = a.clone();
    for s in hi.sites.values_mut() {
        s.off_diagonal_mean = Some(0.8);
    }
    for s in lo.sites.values_mut() {
        s.off_diagonal_mean = Some(0.65);
    }
    let hi = SimilarityReport::from_sites(hi.meta, hi.sites);
    let lo = SimilarityReport::from_sites(lo.meta, lo.sites);
    let c = compare_runs(&hi, &lo).unwrap();
    assert!((c.overall.delta.unwrap() - 0.15).abs() < 1e-12);
    assert_eq!(c.overall.more_diverse, MoreDiverse::B);

    let mut fewer = a.clone();
    fewer.sites.pop_first();
    assert!(matches!(compare_runs(&a, &fewer), Err(Error::StructureMismatch(_))));
}

fn vec_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..12).prop_flat_map(|n| {
        (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )
    })
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant((v, w) in vec_strategy(), c in 0.01f64..100.0) {
        let base = cosine_similarity(&v, &w).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        let flipped: Vec<f64> = v.iter().map(|x| -c * x).collect();
        match base {
            None => prop_assert_eq!(cosine_similarity(&scaled, &w).unwrap(), None),
            Some(b) => {
                prop_assert!((cosine_similarity(&scaled, &w).unwrap().unwrap() - b).abs() < 1e-9);
                prop_assert!((cosine_similarity(&flipped, &w).unwrap().unwrap() + b).abs() < 1e-9);
                prop_assert!((-1.0..=1.0).contains(&b));
            }
        }
    }

    #[test]
    fn matrix_is_symmetric_with_unit_diagonal(heads in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 2..5)) {
        let m = cosine_similarity_matrix(&heads).unwrap();
        for i in 0..heads.len() {
            if heads[i].iter().any(|x| *x != 0.0) {
                prop_assert!((m[i][i].unwrap() - 1.0).abs() < 1e-9);
            }
            for (j, row) in m.iter().enumerate() {
                prop_assert_eq!(m[i][j], row[i]);
            }
        }
    }
}
