//! Inference timing and memory harness.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{GranularityConfig, ModelKind, ModelParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub dims: Vec<usize>,
    pub ratio: f64,
    /// Tokens per row (LM) or image side in pixels (vision).
    pub seq_len: usize,
    pub median_secs: f64,
    /// Tokens per second (LM) or images per second (vision).
    pub throughput: f64,
    /// Peak resident set size observed around the timed forwards, if known.
    pub peak_rss_bytes: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub batch: usize,
    pub warmup: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { batch: 1, warmup: 2, runs: 5, seed: 0 }
    }
}

fn proc_status_kb(key: &str) -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with(key))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// Resets the kernel's peak-RSS watermark where supported.
fn reset_peak_rss() {
    let _ = std::fs::write("/proc/self/clear_refs", "5");
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times a forward for every `(gc, seq_len)` pair; warmup runs are
/// discarded and the median of `runs` timed forwards is reported.
pub fn bench<S: Scalar>(
    model: &ModelParams<S>,
    gcs: &[GranularityConfig],
    seq_lens: &[usize],
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let runs = cfg.runs.max(5);
    let mut rows = Vec::with_capacity(gcs.len() * seq_lens.len());
    for gc in gcs {
        gc.check(&model.cfg)?;
        for &len in seq_lens {
            let mut forward: Box<dyn FnMut() -> Result<()>> = match model.cfg.kind {
                ModelKind::Lm => {
                    let v = model.cfg.vocab_size;
                    let toks: Vec<usize> = (0..cfg.batch * len).map(|_| rng.random_range(0..v)).collect();
                    Box::new(move || model.lm_forward(&toks, cfg.batch, gc).map(drop))
                }
                ModelKind::Vision => {
                    let c = model.cfg.channels;
                    let imgs = Tensor::from_fn(vec![cfg.batch, len, len, c], |_| {
                        S::from_f64_lossy(rng.random_range(-1.0..1.0))
                    });
                    Box::new(move || model.vision_forward(&imgs, gc).map(drop))
                }
            };
            for _ in 0..cfg.warmup {
                forward()?;
            }
            reset_peak_rss();
            let mut times = Vec::with_capacity(runs);
            for _ in 0..runs {
                let t = Instant::now();
                forward()?;
                times.push(t.elapsed().as_secs_f64());
            }
            let peak = proc_status_kb("VmHWM:").map(|kb| kb * 1024);
            let med = median(&mut times);
            let units = match model.cfg.kind {
                ModelKind::Lm => cfg.batch * len,
                ModelKind::Vision => cfg.batch,
            };
            rows.push(BenchRow {
                dims: gc.dims.clone(),
                ratio: gc.ratio(&model.cfg),
                seq_len: len,
                median_secs: med,
                throughput: units as f64 / med,
                peak_rss_bytes: peak,
            });
        }
    }
    Ok(rows)
}
