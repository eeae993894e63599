use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tokens(n: usize, v: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..v)).collect()
}

fn images(b: usize, s: usize, c: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(vec![b, s, s, c], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn table2_counts() {
    let rows = [
        ("lm-130m", 38_615_040, 90_368_448),
        ("lm-370m", 51_486_720, 316_851_712),
        ("lm-790m", 77_230_080, 702_918_912),
        ("lm-1.4b", 102_973_440, 1_240_767_488),
    ];
    for (name, e, n) in rows {
        let cfg = ModelConfig::preset(name).unwrap();
        cfg.validate().unwrap();
        assert_eq!(model_param_count(&cfg).unwrap(), (e, n), "{name}");
    }
}

#[test]
fn large_model_decomposes_into_weights_norms_and_biases() {
    let cfg = ModelConfig::preset("lm-1.4b").unwrap();
    let weights = 25_838_720u64;
    let extra = 2048 + 4096 + 4352 + 64;
    assert_eq!(model_param_count(&cfg).unwrap().1, 48 * (weights + extra) + 2048);
}

#[test]
fn patch_embedding_count() {
    let cfg = ModelConfig::preset("vision-135m").unwrap();
    assert_eq!(model_param_count(&cfg).unwrap().0, 787_456);
    let cfg = ModelConfig::preset("vision-35m").unwrap();
    assert_eq!(model_param_count(&cfg).unwrap().0, 393_728);
}

#[test]
fn counts_match_storage() {
    for name in ["lm-tiny", "vision-tiny", "lm-desk", "vision-desk"] {
        let cfg = ModelConfig::preset(name).unwrap();
        let p = init_params::<f32>(&cfg, 0).unwrap();
        let (e, n) = model_param_count(&cfg).unwrap();
        assert_eq!(e + n, p.num_params(), "{name}");
    }
}

#[test]
fn presets_validate() {
    for name in ModelConfig::PRESETS {
        ModelConfig::preset(name).unwrap().validate().unwrap();
    }
    assert!(ModelConfig::preset("lm-7b").is_err());
}

#[test]
fn config_invariants() {
    let mut cfg = ModelConfig::preset("lm-tiny").unwrap();
    assert_eq!(cfg.granularities(), vec![32, 16, 8, 4]);
    cfg.granularities = vec![16, 8];
    assert!(cfg.validate().is_err());
    cfg.granularities = vec![32, 8, 16];
    assert!(cfg.validate().is_err());
    cfg.granularities = vec![32, 10];
    assert!(cfg.validate().is_err());
    cfg.granularities = vec![32, 16];
    cfg.validate().unwrap();
}

#[test]
fn lm_forward_shape_and_finiteness() {
    let cfg = ModelConfig::preset("lm-tiny").unwrap();
    let p = init_params::<f32>(&cfg, 1).unwrap();
    let ids = tokens(2 * 9, 16, 2);
    for m in [32, 16, 8, 4] {
        let y = p.lm_forward(&ids, 2, &GranularityConfig::uniform(2, m)).unwrap();
        assert_eq!(y.shape(), [2, 9, 16]);
        assert!(y.is_finite());
    }
    let bad = GranularityConfig::uniform(2, 10);
    assert!(matches!(p.lm_forward(&ids, 2, &bad), Err(Error::InvalidGranularity(_))));
    assert!(matches!(p.lm_forward(&ids, 2, &GranularityConfig::uniform(3, 32)), Err(Error::InvalidGranularity(_))));
    assert!(matches!(p.lm_forward(&[16], 1, &cfg.full_gc()), Err(Error::Index(_))));
}

#[test]
fn lm_is_causal() {
    let cfg = ModelConfig::preset("lm-tiny").unwrap();
    let p = init_params::<f32>(&cfg, 3).unwrap();
    let ids = tokens(12, 16, 4);
    let gc = GranularityConfig { dims: vec![32, 8] };
    let base = p.lm_forward(&ids, 1, &gc).unwrap();
    for t in [0, 5, 11] {
        let mut alt = ids.clone();
        alt[t] = (alt[t] + 1) % 16;
        let y = p.lm_forward(&alt, 1, &gc).unwrap();
        assert_eq!(&y.data()[..t * 16], &base.data()[..t * 16]);
        assert_ne!(&y.data()[t * 16..(t + 1) * 16], &base.data()[t * 16..(t + 1) * 16]);
    }
}

#[test]
fn initialization_is_deterministic_and_follows_the_recipe() {
    let cfg = ModelConfig::preset("vision-tiny").unwrap();
    let a = init_params::<f32>(&cfg, 5).unwrap();
    let b = init_params::<f32>(&cfg, 5).unwrap();
    for (id, name, t) in a.store.iter() {
        assert_eq!(t.data(), b.store.get(id).data(), "{name}");
        if name.ends_with("norm_w") || name == "final_norm" || name.ends_with(".d") {
            assert!(t.data().iter().all(|v| *v == 1.0), "{name}");
        }
        if name.contains("conv_bias") || name == "patch_b" || name == "head_b" {
            assert!(t.data().iter().all(|v| *v == 0.0), "{name}");
        }
    }
    let c = init_params::<f32>(&cfg, 6).unwrap();
    assert_ne!(a.store.get(a.layers[0].w_x).data(), c.store.get(c.layers[0].w_x).data());
}

#[test]
fn projection_std_at_width_256() {
    let cfg = ModelConfig::lm(1, 256, 256);
    let p = init_params::<f64>(&cfg, 7).unwrap();
    let w = p.store.get(p.layers[0].w_x).data();
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let std = (w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    assert!((std - 0.02).abs() <= 0.002, "std {std}");
    assert!(w.iter().all(|v| v.abs() <= 2.0 * 0.02 / 0.879_569_1 + 1e-12));
}

fn standalone(p: &ModelParams<f32>, gc: &GranularityConfig) -> ModelParams<f32> {
    let mut cfg = p.cfg.clone();
    cfg.layer_widths = Some(gc.dims.clone());
    cfg.granularities = Vec::new();
    let mut store = ParamStore::new();
    for (name, t) in top_shapes(&cfg).iter().map(|(n, _)| (*n, p.store.get(p.store.id(n).unwrap()))) {
        store.insert(name, t.clone()).unwrap();
    }
    for (i, (bp, &m)) in p.layers.iter().zip(&gc.dims).enumerate() {
        bp.materialize(&p.store, m, &mut store, &format!("layers.{i}")).unwrap();
    }
    ModelParams::from_store(cfg, store).unwrap()
}

#[test]
fn half_width_model_equals_standalone() {
    let cfg = ModelConfig::preset("lm-tiny").unwrap();
    let p = init_params::<f32>(&cfg, 8).unwrap();
    let gc = GranularityConfig::uniform(2, 16);
    let q = standalone(&p, &gc);
    assert_eq!(q.num_params(), {
        let (e, n) = model_param_count_at(&cfg, &gc).unwrap();
        e + n
    });
    let ids = tokens(3 * 11, 16, 9);
    let a = p.lm_forward(&ids, 3, &gc).unwrap();
    let b = q.lm_forward(&ids, 3, &q.cfg.full_gc()).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-6);
}

#[test]
fn vision_forward_contract() {
    let cfg = ModelConfig::preset("vision-tiny").unwrap();
    let p = init_params::<f32>(&cfg, 10).unwrap();
    let x = images(2, 8, 3, 11);
    assert_eq!(patchify(&x, 4).unwrap().shape(), [2, 4, 48]);
    let big = images(1, 32, 3, 12);
    assert_eq!(patchify(&big, 4).unwrap().shape()[1] + 1, 65);
    let (logits, emb) = p.vision_forward(&x, &cfg.full_gc()).unwrap();
    assert_eq!(logits.shape(), [2, 4]);
    assert_eq!(emb.shape(), [2, 32]);
    assert!(matches!(p.vision_forward(&images(1, 6, 3, 0), &cfg.full_gc()), Err(Error::Dimension(_))));
    // the suffix token sees every patch: swapping two patches changes it
    let mut swapped = x.clone();
    {
        let d = swapped.data_mut();
        for r in 0..4 {
            for c in 0..12 {
                d.swap(r * 24 + c, r * 24 + 12 + c);
            }
        }
    }
    let (l2, _) = p.vision_forward(&swapped, &cfg.full_gc()).unwrap();
    assert!(l2.data()[..4] != logits.data()[..4]);
    assert_eq!(l2.data()[4..], logits.data()[4..]);
}

#[test]
fn patchify_layout() {
    // 1 image 4x4x1, patch 2: first patch is the top-left 2x2 square
    let x = Tensor::from_fn(vec![1, 4, 4, 1], |i| i as f32);
    let p = patchify(&x, 2).unwrap();
    assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
}

#[test]
fn prefill_then_step_matches_forward() {
    let cfg = ModelConfig::preset("lm-tiny").unwrap();
    let p = init_params::<f64>(&cfg, 13).unwrap();
    let ids = tokens(14, 16, 14);
    let gc = GranularityConfig { dims: vec![16, 32] };
    let full = p.lm_forward(&ids, 1, &gc).unwrap();
    let (last, mut st) = p.lm_prefill(&ids[..8], 1, &gc).unwrap();
    assert_eq!(last.data(), &full.data()[7 * 16..8 * 16]);
    for t in 8..14 {
        let y = p.lm_step(&ids[t..t + 1], &gc, &mut st).unwrap();
        for (a, b) in y.data().iter().zip(&full.data()[t * 16..(t + 1) * 16]) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn from_store_rejects_extra_tensors() {
    let cfg = ModelConfig::preset("lm-tiny").unwrap();
    let mut p = init_params::<f32>(&cfg, 15).unwrap();
    ModelParams::from_store(cfg.clone(), p.store.clone()).unwrap();
    p.store.insert("stray", Tensor::zeros(vec![1])).unwrap();
    assert!(matches!(ModelParams::from_store(cfg, p.store), Err(Error::Schema(_))));
}
