use super::*;
use crate::model::init_params;

fn lm_370m() -> ModelConfig {
    ModelConfig::lm(3, 1024, 256)
}

#[test]
fn published_example_gc_is_valid() {
    let cfg = lm_370m();
    assert!(validate_gc(&cfg, &GranularityConfig { dims: vec![256, 1024, 768] }).is_ok());
    let errs = validate_gc(&cfg, &GranularityConfig { dims: vec![100, 1024, 2048] }).unwrap_err();
    assert_eq!(errs.iter().map(|e| e.layer).collect::<Vec<_>>(), vec![Some(0), Some(2)]);
    let errs = validate_gc(&cfg, &GranularityConfig { dims: vec![1024] }).unwrap_err();
    assert_eq!(errs[0].layer, None);
}

#[test]
fn validation_accepts_exactly_the_head_lattice() {
    let cfg = ModelConfig::lm(1, 96, 16).with_heads(8, 4);
    for m in 0..=200 {
        let ok = validate_gc(&cfg, &GranularityConfig { dims: vec![m] }).is_ok();
        assert_eq!(ok, m > 0 && m <= 96 && (2 * m) % 8 == 0, "m={m}");
    }
}

#[test]
fn sampler_boundaries_and_statistics() {
    let cfg = ModelConfig::lm(12, 1024, 256);
    assert_eq!(sample_gc(&cfg, 1.0, 1).unwrap(), GranularityConfig::uniform(12, 1024));
    assert_eq!(sample_gc(&cfg, 0.125, 1).unwrap(), GranularityConfig::uniform(12, 128));
    assert!(matches!(sample_gc(&cfg, 0.01, 1), Err(Error::Range(_))));
    assert!(matches!(sample_gc(&cfg, 0.0, 1), Err(Error::Range(_))));
    for seed in 0..100 {
        let gc = sample_gc(&cfg, 0.5, seed).unwrap();
        assert!(validate_gc(&cfg, &gc).is_ok());
        let r = gc.ratio(&cfg);
        assert!((0.45..=0.55).contains(&r), "{r}");
    }
    assert_eq!(sample_gc(&cfg, 0.6, 9).unwrap(), sample_gc(&cfg, 0.6, 9).unwrap());
    let bounded = sample_gc_between(&cfg, 0.75, 512, 1024, 3).unwrap();
    assert!(bounded.dims.iter().all(|&m| (512..=1024).contains(&m)));
}

#[test]
fn specs_count_their_parameters() {
    let cfg = ModelConfig::preset("lm-tiny").unwrap();
    let m = init_params::<f32>(&cfg, 1).unwrap();
    let gc = GranularityConfig { dims: vec![8, 24] };
    let spec = SubmodelSpec::new(&cfg, gc.clone()).unwrap();
    let sub = extract_submodel(&m, &gc).unwrap();
    assert_eq!(sub.num_params(), spec.est_params);
    assert!((spec.est_flops_ratio - 0.5).abs() < 1e-12);
    let sizes: Vec<u64> = cfg
        .granularities()
        .iter()
        .map(|&g| SubmodelSpec::new(&cfg, GranularityConfig::uniform(2, g)).unwrap().est_params)
        .collect();
    assert!(sizes.windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn full_extraction_keeps_every_tensor() {
    let cfg = ModelConfig::preset("vision-tiny").unwrap();
    let m = init_params::<f32>(&cfg, 2).unwrap();
    let sub = extract_submodel(&m, &cfg.full_gc()).unwrap();
    assert_eq!(sub.store.len(), m.store.len());
    for ((_, a, x), (_, b, y)) in m.store.iter().zip(sub.store.iter()) {
        assert_eq!(a, b);
        assert_eq!(x.shape(), y.shape());
        assert_eq!(x.data(), y.data());
    }
    assert!(sub.cfg.granularities.is_empty());
}

#[test]
fn extraction_matches_universal() {
    let cfg = ModelConfig::preset("lm-tiny").unwrap();
    let m = init_params::<f32>(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gc = GranularityConfig::uniform(2, 16);
    let sub = extract_submodel(&m, &gc).unwrap();
    for _ in 0..10 {
        let toks: Vec<usize> = (0..20).map(|_| rng.random_range(0..16)).collect();
        let a = m.lm_forward(&toks, 2, &gc).unwrap();
        let b = sub.lm_forward(&toks, 2, &sub.cfg.full_gc()).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
    }
    assert!(matches!(extract_submodel(&m, &GranularityConfig::uniform(2, 10)), Err(Error::InvalidGranularity(_))));
    // an extracted model cannot grow back
    assert!(sub.lm_forward(&[1, 2], 1, &GranularityConfig::uniform(2, 32)).is_err());
}

#[test]
fn generation() {
    let cfg = ModelConfig::preset("lm-tiny").unwrap();
    let m = init_params::<f32>(&cfg, 5).unwrap();
    let gc = GranularityConfig { dims: vec![16, 32] };
    let prompt = [1, 2, 3, 4];
    assert_eq!(generate(&m, &prompt, &gc, 0, Sampling::Greedy).unwrap(), prompt);
    let a = generate(&m, &prompt, &gc, 12, Sampling::Greedy).unwrap();
    assert_eq!(a, generate(&m, &prompt, &gc, 12, Sampling::Greedy).unwrap());
    assert_eq!(a.len(), 16);
    assert_eq!(&a[..4], &prompt);
    // greedy continuation agrees with re-running the full forward
    let full = m.lm_forward(&a[..15], 1, &gc).unwrap();
    for t in 3..15 {
        assert_eq!(a[t + 1], argmax(&full.data()[t * 16..(t + 1) * 16]));
    }
    let s1 = generate(&m, &prompt, &gc, 12, Sampling::Temperature { t: 1.0, seed: 3 }).unwrap();
    assert_eq!(s1, generate(&m, &prompt, &gc, 12, Sampling::Temperature { t: 1.0, seed: 3 }).unwrap());
    assert!(matches!(
        generate(&m, &prompt, &GranularityConfig::uniform(2, 6), 3, Sampling::Greedy),
        Err(Error::InvalidGranularity(_))
    ));
}

#[test]
fn step_logits_match_forward() {
    let cfg = ModelConfig::preset("lm-tiny").unwrap();
    let m = init_params::<f32>(&cfg, 6).unwrap();
    let gc = GranularityConfig { dims: vec![32, 8] };
    let toks: Vec<usize> = (0..24).map(|i| (i * 7 + 3) % 16).collect();
    let full = m.lm_forward(&toks, 1, &gc).unwrap();
    let (_, mut st) = m.lm_prefill(&toks[..4], 1, &gc).unwrap();
    for t in 4..24 {
        let y = m.lm_step(&toks[t..t + 1], &gc, &mut st).unwrap();
        for (a, b) in y.data().iter().zip(&full.data()[t * 16..(t + 1) * 16]) {
            assert!((a - b).abs() <= 1e-4);
        }
    }
}

#[test]
fn sweep_rows() {
    let cfg = ModelConfig::preset("lm-tiny").unwrap();
    let m = init_params::<f32>(&cfg, 7).unwrap();
    let batch = Batch::Tokens {
        inputs: (0..16).map(|i| i % 16).collect(),
        targets: (1..17).map(|i| i % 16).collect(),
        batch: 2,
    };
    let mut specs: Vec<SubmodelSpec> =
        [32, 4, 16, 8].iter().map(|&g| SubmodelSpec::new(&cfg, GranularityConfig::uniform(2, g)).unwrap()).collect();
    specs.push(specs[0].clone());
    let rows = pareto_sweep(&m, &[batch], &specs);
    assert_eq!(rows.len(), 5);
    assert!(rows.windows(2).all(|w| w[0].ratio <= w[1].ratio));
    assert_eq!(rows[3], rows[4]);
    // a bad spec becomes an error row without stopping the sweep
    let bad = SubmodelSpec { gc: GranularityConfig::uniform(2, 10), est_params: 0, est_flops_ratio: 0.3 };
    let rows = pareto_sweep(&m, &[], &[bad, specs[0].clone()]);
    assert!(rows[0].error.is_some());
}

fn brute_force(db: &[f64], q: &[f64], dim: usize) -> Vec<usize> {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    };
    q.chunks(dim)
        .map(|qq| {
            let sims: Vec<f64> = db.chunks(dim).map(|e| cos(qq, e)).collect();
            let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            sims.iter().position(|s| *s == best).unwrap()
        })
        .collect()
}

#[test]
fn retrieval_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dim = 6;
    let db: Vec<f64> = (0..50 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let q: Vec<f64> = (0..50 * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let idx = RetrievalIndex::from_embeddings(&db, dim, (0..50).collect(), GranularityConfig::uniform(1, 1)).unwrap();
    assert_eq!(idx.nearest(&q).unwrap(), brute_force(&db, &q, dim));
    // exact duplicates resolve to the lowest index
    let mut dup = db.clone();
    dup.extend_from_slice(&db[..dim]);
    let idx2 = RetrievalIndex::from_embeddings(&dup, dim, (0..51).collect(), GranularityConfig::uniform(1, 1)).unwrap();
    assert_eq!(idx2.nearest(&db[..dim]).unwrap(), vec![0]);
    let empty = RetrievalIndex::from_embeddings(&[], dim, vec![], GranularityConfig::uniform(1, 1)).unwrap();
    assert!(matches!(empty.nearest(&q), Err(Error::State(_))));
}

#[test]
fn image_query_finds_itself() {
    let cfg = ModelConfig::preset("vision-tiny").unwrap();
    let m = init_params::<f32>(&cfg, 9).unwrap();
    let ds = crate::io::data::synthetic_images(12, 8, 4, 1);
    let norm = crate::io::data::Normalization::default();
    let idx: Vec<usize> = (0..12).collect();
    let imgs = ds.tensor::<f32>(&idx, &norm).unwrap();
    let full = cfg.full_gc();
    let index = build_index(&m, &imgs, ds.labels_at(&idx), &full).unwrap();
    let res = query_1nn(&index, &m, &imgs, &full).unwrap();
    assert_eq!(res.neighbors, idx);
    assert_eq!(res.agreement, 1.0);
    let half = query_1nn(&index, &m, &imgs, &GranularityConfig::uniform(2, 16)).unwrap();
    assert_eq!(half.neighbors.len(), 12);
}
