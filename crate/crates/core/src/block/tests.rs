use super::*;
use crate::autograd::gradcheck::{finite_difference, relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn d1024_cfg() -> BlockConfig {
    BlockConfig::new(1024, 2, 64, 128)
}

fn small_cfg() -> BlockConfig {
    BlockConfig::new(32, 2, 8, 8)
}

fn random_input<S: Scalar>(shape: Vec<usize>, seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| S::from_f64_lossy(rng.random_range(-1.0..1.0)))
}

fn setup<S: Scalar>(cfg: &BlockConfig, seed: u64) -> (ParamStore<S>, BlockParams) {
    let mut store = ParamStore::new();
    let p = BlockParams::init(&mut store, "blk", cfg, &mut Initializer::new(seed)).unwrap();
    (store, p)
}

fn run<S: Scalar>(store: &ParamStore<S>, p: &BlockParams, u: &Tensor<S>, m: usize, mode: ScanMode) -> Tensor<S> {
    let mut g = Graph::new();
    let x = g.input(u);
    let y = block_forward_with(&mut g, store, p, x, m, mode, None).unwrap();
    g.tensor(y)
}

#[test]
fn slice_resolution() {
    let cfg = d1024_cfg();
    assert_eq!(resolve_slice(&cfg, 1024).unwrap(), SliceDims { m: 1024, d_inner: 2048, heads: 32 });
    assert_eq!(resolve_slice(&cfg, 512).unwrap(), SliceDims { m: 512, d_inner: 1024, heads: 16 });
    assert_eq!(resolve_slice(&cfg, 768).unwrap(), SliceDims { m: 768, d_inner: 1536, heads: 24 });
    assert!(matches!(resolve_slice(&cfg, 100), Err(Error::InvalidGranularity(_))));
    assert!(matches!(resolve_slice(&cfg, 2048), Err(Error::Range(_))));
    assert!(matches!(resolve_slice(&cfg, 0), Err(Error::Range(_))));
}

#[test]
fn parameter_counts() {
    let cfg = d1024_cfg();
    assert_eq!(block_param_count(&cfg, 1024, CountMode::WeightsOnly).unwrap(), 6_594_880);
    assert_eq!(block_param_count(&cfg, 512, CountMode::WeightsOnly).unwrap(), 3_428_640);
    assert_eq!(block_param_count(&cfg, 1024, CountMode::Full).unwrap(), 6_601_056);
}

#[test]
fn full_count_matches_storage() {
    for cfg in [small_cfg(), BlockConfig::new(64, 2, 16, 16)] {
        let (store, p) = setup::<f32>(&cfg, 1);
        let stored: u64 = p.ids().iter().map(|id| store.get(*id).numel() as u64).sum();
        assert_eq!(block_param_count(&cfg, cfg.d_model, CountMode::Full).unwrap(), stored);
        // and every sub-block's count is what it actually reads
        for m in [cfg.d_model / 2, cfg.d_model / 4] {
            let mut dst = ParamStore::new();
            let q = p.materialize(&store, m, &mut dst, "s").unwrap();
            let read: u64 = q.ids().iter().map(|id| dst.get(*id).numel() as u64).sum();
            assert_eq!(block_param_count(&cfg, m, CountMode::Full).unwrap(), read);
        }
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let cfg = small_cfg();
    let (store, p) = setup::<f32>(&cfg, 2);
    let u = Tensor::zeros(vec![2, 5, 32]);
    for m in [32, 16, 8] {
        assert!(run(&store, &p, &u, m, ScanMode::Sequential).data().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn slice_plan_regions_are_prefixes() {
    let cfg = small_cfg();
    let (_, p) = setup::<f32>(&cfg, 3);
    let plan = p.slice_plan(16).unwrap();
    let get = |n: &str| plan.iter().find(|(k, _)| *k == n).unwrap().1;
    assert_eq!(get("w_z"), SliceRegion { id: p.w_z, axis: Some(0), len: 32 });
    assert_eq!(get("w_dt").len, 4);
    assert_eq!(get("w_out"), SliceRegion { id: p.w_out, axis: Some(1), len: 32 });
    assert_eq!(get("w_b").axis, None);
    // a smaller plan's regions sit inside a larger one's
    let big = p.slice_plan(32).unwrap();
    for ((_, a), (_, b)) in plan.iter().zip(&big) {
        assert!(a.len <= b.len);
    }
}

#[test]
fn standalone_materialization_matches() {
    let cfg = small_cfg();
    let (store, p) = setup::<f32>(&cfg, 4);
    let u = random_input(vec![2, 19, 32], 5);
    for m in [16, 8, 24] {
        let mut dst = ParamStore::new();
        let q = p.materialize(&store, m, &mut dst, "s").unwrap();
        assert_eq!(q.cfg.width, m);
        let a = run(&store, &p, &u, m, ScanMode::Chunked(4));
        let b = run(&dst, &q, &u, m, ScanMode::Chunked(4));
        assert!(a.max_abs_diff(&b) <= 1e-6, "m={m}");
        assert!(matches!(resolve_slice(&q.cfg, 2 * m), Err(Error::Range(_))));
    }
}

#[test]
fn gradients_stay_inside_the_slice() {
    let cfg = small_cfg();
    let (mut store, p) = setup::<f32>(&cfg, 6);
    let u = random_input(vec![1, 7, 32], 7);
    let mut g = Graph::new();
    let x = g.input(&u);
    let y = block_forward(&mut g, &store, &p, x, 8).unwrap();
    let l = g.sum(y);
    g.backward_into(l, &mut store).unwrap();
    let di = 16;
    let rows_zero = |id: ParamId, from: usize, store: &ParamStore<f32>| {
        let t = store.get(id);
        let row: usize = t.shape()[1..].iter().product();
        t.grad().unwrap()[from * row..].iter().all(|v| *v == 0.0)
    };
    assert!(rows_zero(p.w_z, di, &store));
    assert!(rows_zero(p.w_x, di, &store));
    assert!(rows_zero(p.w_dt, 2, &store));
    assert!(rows_zero(p.a_log, 2, &store));
    assert!(rows_zero(p.inner_norm_w, di, &store));
    assert!(rows_zero(p.w_conv_x, di, &store));
    let wo = store.get(p.w_out);
    let gw = wo.grad().unwrap();
    for r in 0..32 {
        assert!(gw[r * 32 + di..(r + 1) * 32].iter().all(|v| *v == 0.0));
    }
    assert!(store.get(p.w_b).grad().unwrap().iter().any(|v| *v != 0.0));
    assert!(!rows_zero(p.w_z, 0, &store));
}

#[test]
fn block_gradient_matches_finite_differences() {
    let cfg = BlockConfig::new(8, 2, 4, 4);
    let (mut store, p) = setup::<f64>(&cfg, 8);
    // unit-scale step sizes so every path carries a sizeable gradient
    store.get_mut(p.dt_bias).data_mut().fill(0.5);
    for id in [p.w_dt, p.w_b, p.w_c] {
        for v in store.get_mut(id).data_mut() {
            *v *= 20.0;
        }
    }
    let u = random_input::<f64>(vec![1, 6, 8], 9);
    let readout = random_input::<f64>(vec![1, 6, 8], 10);
    let names = ["w_x", "w_dt", "a_log", "w_conv_bc", "w_out"];
    let m = 4;
    let loss = |store: &ParamStore<f64>| -> f64 {
        let y = run(store, &p, &u, m, ScanMode::Chunked(4));
        y.data().iter().zip(readout.data()).map(|(a, b)| a * b).sum()
    };
    let mut s2 = store.clone();
    let mut g = Graph::new();
    let x = g.input(&u);
    let y = block_forward(&mut g, &s2, &p, x, m).unwrap();
    let r = g.input(&readout);
    let yr = g.mul(y, r).unwrap();
    let l = g.sum(yr);
    g.backward_into(l, &mut s2).unwrap();
    for name in names {
        let id = store.id(&format!("blk.{name}")).unwrap();
        let base = store.get(id).clone();
        let fd = finite_difference(&[base], 1e-6, |vals| {
            let mut s = store.clone();
            s.get_mut(id).data_mut().copy_from_slice(vals[0].data());
            loss(&s)
        });
        let an: Vec<f64> = s2.get(id).grad().unwrap().to_vec();
        let err = relative_error(&an, &fd[0]);
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn stepping_matches_full_forward() {
    let cfg = small_cfg();
    let (store, p) = setup::<f64>(&cfg, 11);
    let (b, l) = (2, 13);
    let u = random_input::<f64>(vec![b, l, 32], 12);
    for m in [32, 16] {
        let mut g = Graph::new();
        let x = g.input(&u);
        let full = residual_forward(&mut g, &store, &p, x, m, ScanMode::Chunked(4), None).unwrap();
        let full = g.tensor(full);
        let mut st = zero_state(&cfg, m, b).unwrap();
        for t in 0..l {
            let ut = Tensor::from_fn(vec![b, 32], |i| u.data()[((i / 32) * l + t) * 32 + i % 32]);
            let yt = residual_step(&store, &p, &ut, m, &mut st).unwrap();
            for bi in 0..b {
                for c in 0..32 {
                    let e = full.data()[(bi * l + t) * 32 + c];
                    assert!((yt.data()[bi * 32 + c] - e).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn captured_state_continues_the_sequence() {
    let cfg = small_cfg();
    let (store, p) = setup::<f64>(&cfg, 13);
    let (b, l, split) = (1, 10, 6);
    let u = random_input::<f64>(vec![b, l, 32], 14);
    let m = 16;
    let mut g = Graph::new();
    let x = g.input(&u);
    let full = residual_forward(&mut g, &store, &p, x, m, ScanMode::Chunked(4), None).unwrap();
    let full = g.tensor(full);

    let prefix = u.narrow(1, 0, split).unwrap();
    let mut st = zero_state(&cfg, m, b).unwrap();
    let mut g = Graph::new();
    let x = g.input(&prefix);
    residual_forward(&mut g, &store, &p, x, m, ScanMode::Chunked(4), Some(&mut st)).unwrap();
    for t in split..l {
        let ut = Tensor::new(vec![1, 32], u.data()[t * 32..(t + 1) * 32].to_vec()).unwrap();
        let yt = residual_step(&store, &p, &ut, m, &mut st).unwrap();
        for c in 0..32 {
            assert!((yt.data()[c] - full.data()[t * 32 + c]).abs() < 1e-10);
        }
    }
}

#[test]
fn step_rejects_mismatched_state() {
    let cfg = small_cfg();
    let (store, p) = setup::<f32>(&cfg, 15);
    let mut st = zero_state(&cfg, 16, 1).unwrap();
    let u = Tensor::zeros(vec![1, 32]);
    assert!(matches!(block_step(&store, &p, &u, 32, &mut st), Err(Error::State(_))));
}

#[test]
fn bind_checks_shapes() {
    let cfg = small_cfg();
    let (store, p) = setup::<f32>(&cfg, 16);
    assert_eq!(BlockParams::bind(&store, "blk", &cfg).unwrap(), p);
    assert!(matches!(BlockParams::bind(&store, "blk", &BlockConfig::new(32, 2, 8, 16)), Err(Error::Schema(_))));
    assert!(matches!(BlockParams::bind(&store, "nope", &cfg), Err(Error::Schema(_))));
}
