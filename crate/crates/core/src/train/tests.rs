use super::*;
use crate::model::{init_params, ModelConfig};

fn tiny() -> ModelParams<f64> {
    init_params(&ModelConfig::preset("lm-tiny").unwrap(), 1).unwrap()
}

fn token_batch(seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let toks: Vec<usize> = (0..2 * 9).map(|_| rng.random_range(0..16)).collect();
    Batch::Tokens { inputs: toks[..16].to_vec(), targets: toks[2..].to_vec(), batch: 2 }
}

#[test]
fn schedule_endpoints() {
    let cfg = TrainConfig { lr: 1e-3, warmup_steps: 10, total_steps: 110, ..Default::default() };
    assert_eq!(lr_schedule(0, &cfg), 0.0);
    assert!((lr_schedule(5, &cfg) - 5e-4).abs() < 1e-15);
    assert_eq!(lr_schedule(10, &cfg), 1e-3);
    assert!((lr_schedule(60, &cfg) - 5.5e-4).abs() < 1e-15);
    assert!((lr_schedule(110, &cfg) - 1e-4).abs() < 1e-15);
    for s in 10..110 {
        assert!(lr_schedule(s + 1, &cfg) <= lr_schedule(s, &cfg));
    }
}

#[test]
fn clipping() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("p", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
    store.get_mut(id).grad_mut().copy_from_slice(&[3.0, 4.0]);
    assert_eq!(clip_gradients(&mut store, 1.0), 0.2);
    let g = store.get(id).grad().unwrap();
    assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    store.get_mut(id).grad_mut().copy_from_slice(&[0.3, 0.4]);
    assert_eq!(clip_gradients(&mut store, 1.0), 1.0);
    assert_eq!(store.get(id).grad().unwrap(), &[0.3, 0.4]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let mut s = ParamStore::<f32>::new();
        for k in 0..3 {
            let id = s.insert(format!("p{k}"), Tensor::zeros(vec![7])).unwrap();
            s.get_mut(id).grad_mut().iter_mut().for_each(|v| *v = rng.random_range(-5.0..5.0));
        }
        let max = rng.random_range(0.1..3.0);
        clip_gradients(&mut s, max);
        assert!(s.grad_sq_norm().sqrt() <= max + 1e-6);
    }
}

#[test]
fn adamw_first_step() {
    let cfg = TrainConfig { betas: [0.9, 0.999], eps: 1e-8, weight_decay: 0.0, ..Default::default() };
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("p", Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    store.get_mut(id).grad_mut()[0] = 1.0;
    let mut st = OptimizerState::new(&store);
    adamw_update(&mut store, &mut st, 0.1, &cfg);
    let want = 1.0 - 0.1 / (1.0 + 1e-8);
    assert!((store.get(id).data()[0] - want).abs() < 1e-15);
}

#[test]
fn adamw_zero_gradient_and_decay() {
    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap()).unwrap();
    let b = store.insert("b", Tensor::new(vec![2], vec![0.5, 0.25]).unwrap()).unwrap();
    let mut st = OptimizerState::new(&store);
    let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
    adamw_update(&mut store, &mut st, 0.1, &cfg);
    assert_eq!(store.get(w).data(), &[2.0, -1.0]);
    let cfg = TrainConfig { weight_decay: 0.1, ..Default::default() };
    adamw_update(&mut store, &mut st, 0.1, &cfg);
    assert_eq!(store.get(w).data(), &[2.0 * (1.0 - 0.01), -(1.0 - 0.01)]);
    // vectors are exempt
    assert_eq!(store.get(b).data(), &[0.5, 0.25]);
}

#[test]
fn joint_loss_arithmetic() {
    let lambdas = TrainConfig::default().lambdas(4).unwrap();
    let joint: f64 = [1.0, 2.0, 3.0, 4.0].iter().zip(&lambdas).map(|(l, w)| l * w).sum();
    assert_eq!(joint, 2.5);
    let bad = TrainConfig { lambdas: vec![1.0], ..Default::default() };
    assert!(bad.lambdas(2).is_err());
    let neg = TrainConfig { lambdas: vec![1.0, -1.0], ..Default::default() };
    assert!(neg.lambdas(2).is_err());
}

#[test]
fn accumulated_gradient_is_the_weighted_sum() {
    let mut model = tiny();
    let batch = token_batch(4);
    let gcs = trained_gcs(&model);
    let lambdas = [0.4, 0.3, 0.2, 0.1];
    model.store.zero_grad();
    accumulate_joint_gradients(&mut model, &batch, &gcs, &lambdas, 0.1).unwrap();
    let joint: Vec<Vec<f64>> = model.store.iter().map(|(_, _, t)| t.grad().unwrap().to_vec()).collect();
    let mut sum: Vec<Vec<f64>> = joint.iter().map(|g| vec![0.0; g.len()]).collect();
    for (gc, l) in gcs.iter().zip(lambdas) {
        let mut m = tiny();
        accumulate_joint_gradients(&mut m, &batch, std::slice::from_ref(gc), &[1.0], 0.1).unwrap();
        for (s, (_, _, t)) in sum.iter_mut().zip(m.store.iter()) {
            if let Some(g) = t.grad() {
                s.iter_mut().zip(g).for_each(|(a, b)| *a += l * b);
            }
        }
    }
    for (a, b) in joint.iter().zip(&sum) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn single_granularity_matches_plain_training() {
    let mut cfg_model = ModelConfig::preset("lm-tiny").unwrap();
    cfg_model.granularities = vec![32];
    let cfg = TrainConfig { warmup_steps: 2, total_steps: 5, ..Default::default() };
    let mut a = init_params::<f64>(&cfg_model, 2).unwrap();
    let mut b = a.clone();
    let mut oa = OptimizerState::new(&a.store);
    let mut ob = OptimizerState::new(&b.store);
    for s in 0..5 {
        let batch = token_batch(10 + s);
        joint_loss_step(&mut a, &mut oa, &batch, &cfg).unwrap();
        // plain loop: one forward, one backward, clip, update
        b.store.zero_grad();
        let mut g = Graph::new();
        let l = loss_graph(&mut g, &b, &batch, &b.cfg.full_gc(), 0.0).unwrap();
        g.backward_into(l, &mut b.store).unwrap();
        clip_gradients(&mut b.store, cfg.grad_clip);
        adamw_update(&mut b.store, &mut ob, lr_schedule(s as usize + 1, &cfg), &cfg);
    }
    for ((_, n, x), (_, _, y)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(x.data(), y.data(), "{n}");
    }
}

#[test]
fn one_update_per_step_and_constant_memory() {
    let cfg = TrainConfig { warmup_steps: 1, total_steps: 3, ..Default::default() };
    let mut mem = Vec::new();
    for gs in [vec![32], vec![32, 16], vec![32, 16, 8, 4]] {
        let mut mc = ModelConfig::preset("lm-tiny").unwrap();
        mc.granularities = gs;
        let mut m = init_params::<f64>(&mc, 3).unwrap();
        let mut opt = OptimizerState::new(&m.store);
        for s in 0..3 {
            joint_loss_step(&mut m, &mut opt, &token_batch(s), &cfg).unwrap();
        }
        assert_eq!(opt.step, 3);
        mem.push(m.store.allocated_scalars() + opt.allocated_scalars());
    }
    assert!(mem.windows(2).all(|w| w[0] == w[1]), "{mem:?}");
}

#[test]
fn non_finite_loss_names_the_granularity() {
    let mut model = tiny();
    let id = model.store.id("embed").unwrap();
    model.store.get_mut(id).data_mut()[0] = f64::NAN;
    let batch = Batch::Tokens { inputs: vec![0, 1], targets: vec![1, 2], batch: 1 };
    let mut opt = OptimizerState::new(&model.store);
    match joint_loss_step(&mut model, &mut opt, &batch, &TrainConfig::default()) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("32")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn smoke_training_is_deterministic_and_learns() {
    let text: Vec<u8> = b"the quick brown fox jumps over the lazy dog. ".iter().cycle().take(4000).copied().collect();
    let mut mc = ModelConfig::preset("lm-tiny").unwrap();
    mc.vocab_size = 256;
    let data = TrainData::text(text, 0.05).unwrap();
    let cfg = TrainConfig {
        lr: 3e-3,
        warmup_steps: 10,
        total_steps: 200,
        batch_size: 4,
        seq_len: 32,
        eval_every: 100,
        eval_batches: 2,
        seed: 5,
        ..Default::default()
    };
    let run = || {
        let mut m = init_params::<f32>(&mc, 7).unwrap();
        let mut sink: Vec<serde_json::Value> = Vec::new();
        let s = train(&mut m, &data, &cfg, &mut sink, &CheckpointPolicy::default()).unwrap();
        (s, sink)
    };
    let (s1, log1) = run();
    let (s2, log2) = run();
    assert_eq!(log1, log2);
    assert_eq!(s1, s2);
    assert!(s1.final_val[0] < s1.initial_val[0]);
    let train_recs: Vec<_> = log1.iter().filter(|r| r["kind"] == "train").collect();
    assert_eq!(train_recs.len(), 200);
    assert!(train_recs.iter().all(|r| r["losses"].as_array().unwrap().len() == 4));
}
