//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::elastic::{
    build_index, encode_images, extract_submodel, generate, pareto_sweep, sample_gc, Sampling, SubmodelSpec,
};
use crate::error::{Error, Result};
use crate::io::bench::{bench, BenchConfig};
use crate::io::checkpoint::{load_checkpoint, save_checkpoint, write_atomic};
use crate::io::config::RunConfig;
use crate::io::metrics::JsonlWriter;
use crate::model::{init_params, model_param_count, GranularityConfig, ModelConfig, ModelKind};
use crate::train::{evaluate, train, CheckpointPolicy, TrainData};
use crate::Model;

#[derive(Parser, Debug)]
#[command(name = "matmamba", version, about = "Nested Mamba2 models: joint training and elastic inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Jointly train every configured granularity.
    Train(TrainArgs),
    /// Validation loss of a checkpoint at one granularity configuration.
    Eval(EvalArgs),
    /// Write a standalone submodel checkpoint.
    Extract(ExtractArgs),
    /// Sample text from an LM checkpoint.
    Generate(GenerateArgs),
    /// Evaluate uniform and Mix'n'Match submodels.
    Sweep(SweepArgs),
    /// 1-NN retrieval with a full-width database and a sliced query encoder.
    Retrieve(RetrieveArgs),
    /// Forward throughput per granularity and sequence length.
    Bench(BenchArgs),
    /// Parameter counts of a preset or config.
    CountParams(CountArgs),
}

/// Granularity selection shared by several commands.
#[derive(Args, Debug, Default)]
pub struct GcArgs {
    /// Per-layer dimensions, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "granularity")]
    pub dims: Option<Vec<usize>>,
    /// One dimension for every layer.
    #[arg(long)]
    pub granularity: Option<usize>,
}

impl GcArgs {
    fn resolve(&self, cfg: &ModelConfig) -> Result<GranularityConfig> {
        let gc = match (&self.dims, self.granularity) {
            (Some(d), _) => GranularityConfig { dims: d.clone() },
            (None, Some(m)) => GranularityConfig::uniform(cfg.n_layers, m),
            (None, None) => cfg.full_gc(),
        };
        gc.check(cfg).map_err(|e| match e {
            Error::InvalidGranularity(m) | Error::Range(m) => Error::Usage(m),
            e => e,
        })?;
        Ok(gc)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory for metrics, checkpoint and resolved config.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config supplying the dataset and validation split.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub gc: GcArgs,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub gc: GcArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 200)]
    pub max_new: usize,
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub gc: GcArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Target width ratios for Mix'n'Match samples.
    #[arg(long, value_delimiter = ',', default_value = "0.3,0.4,0.6,0.7,0.8,0.9")]
    pub ratios: Vec<f64>,
    /// Samples per ratio.
    #[arg(long, default_value_t = 2)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the rows as JSON lines here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Query-encoder granularity (the database is always encoded at full width).
    #[command(flatten)]
    pub gc: GcArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Benchmark this checkpoint ...
    #[arg(long, conflicts_with = "preset")]
    pub checkpoint: Option<PathBuf>,
    /// ... or a freshly initialized preset.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "128,256")]
    pub seq_lens: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Uniform granularities to time (default: the trained ones).
    #[arg(long, value_delimiter = ',')]
    pub granularity: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub preset: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

// stdout writes that surface a closed pipe as an error instead of a panic
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        writeln!(std::io::stdout().lock(), $($arg)*)?;
    }};
}

/// Thousands separators, as in the published tables.
pub fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn write_jsonl(path: &Path, rows: &[serde_json::Value]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&r.to_string());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn load(path: &Path) -> Result<Model> {
    Ok(load_checkpoint::<f32>(path)?.0)
}

/// Run config plus its data, with the model section replaced by the
/// checkpoint's.
fn eval_data(config: &Path, model: &Model) -> Result<(RunConfig, TrainData)> {
    let mut rc = RunConfig::load(config)?;
    rc.model = model.cfg.clone();
    if rc.model.kind != model.cfg.kind {
        return Err(Error::Config("config and checkpoint disagree on the model kind".into()));
    }
    let data = rc.load_data()?;
    Ok((rc, data))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => {
            let model = load(&a.checkpoint)?;
            let gc = a.gc.resolve(&model.cfg)?;
            let (rc, data) = eval_data(&a.config, &model)?;
            let (loss, acc) = evaluate(&model, &data.validation(&rc.train)?, &gc)?;
            say!("{}", json!({"dims": gc.dims, "ratio": gc.ratio(&model.cfg), "loss": loss, "accuracy": acc}));
            Ok(())
        }
        Command::Extract(a) => {
            let (model, meta) = load_checkpoint::<f32>(&a.checkpoint)?;
            let gc = a.gc.resolve(&model.cfg)?;
            let sub = extract_submodel(&model, &gc)?;
            let meta = json!({"extracted_from": a.checkpoint.display().to_string(), "dims": gc.dims, "source": meta});
            save_checkpoint(&sub, &meta, &a.out)?;
            say!("params {}", group_digits(sub.num_params()));
            Ok(())
        }
        Command::Generate(a) => {
            let model = load(&a.checkpoint)?;
            let gc = a.gc.resolve(&model.cfg)?;
            let prompt: Vec<usize> = a.prompt.bytes().map(usize::from).collect();
            let mode = match a.temperature {
                Some(t) => Sampling::Temperature { t, seed: a.seed },
                None => Sampling::Greedy,
            };
            let out = generate(&model, &prompt, &gc, a.max_new, mode)?;
            let bytes: Vec<u8> = out.iter().map(|&t| t as u8).collect();
            say!("{}", String::from_utf8_lossy(&bytes));
            Ok(())
        }
        Command::Sweep(a) => cmd_sweep(a),
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Bench(a) => cmd_bench(a),
        Command::CountParams(a) => {
            let cfg = match (&a.preset, &a.config) {
                (Some(p), _) => ModelConfig::preset(p)?,
                (None, Some(c)) => RunConfig::load(c)?.model,
                (None, None) => unreachable!("clap requires one"),
            };
            cfg.validate()?;
            let (e, n) = model_param_count(&cfg)?;
            say!("embed {}", group_digits(e));
            say!("non-embed {}", group_digits(n));
            if cfg.is_nested() {
                for m in cfg.granularities() {
                    let bc = cfg.block_config(0);
                    let w = crate::block::block_param_count(&bc, m, crate::block::CountMode::WeightsOnly)?;
                    say!("block m={m} weights {}", group_digits(w));
                }
            }
            Ok(())
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut rc = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        rc.train.seed = s;
    }
    if let Some(s) = a.steps {
        rc.train.total_steps = s;
        rc.train.warmup_steps = rc.train.warmup_steps.min(s);
    }
    rc.validate()?;
    std::fs::create_dir_all(&a.out)?;
    write_atomic(&a.out.join("config.toml"), rc.to_toml()?.as_bytes())?;
    let data = rc.load_data()?;
    let mut model = init_params::<f32>(&rc.model, rc.train.seed)?;
    let mut sink = JsonlWriter::create(&a.out.join("metrics.jsonl"))?;
    let policy = CheckpointPolicy { path: Some(a.out.join("model.ckpt")) };
    let summary = train(&mut model, &data, &rc.train, &mut sink, &policy)?;
    for (m, (i, f)) in rc.model.granularities().iter().zip(summary.initial_val.iter().zip(&summary.final_val)) {
        say!("m={m}: val loss {i:.4} -> {f:.4}");
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let model = load(&a.checkpoint)?;
    let (rc, data) = eval_data(&a.config, &model)?;
    let cfg = &model.cfg;
    let mut specs = Vec::new();
    for m in cfg.granularities() {
        specs.push(SubmodelSpec::new(cfg, GranularityConfig::uniform(cfg.n_layers, m))?);
    }
    for (i, &r) in a.ratios.iter().enumerate() {
        for k in 0..a.samples {
            let seed = a.seed.wrapping_mul(1_000_003).wrapping_add((i * a.samples + k) as u64);
            let gc = sample_gc(cfg, r, seed)?;
            if specs.iter().all(|s: &SubmodelSpec| s.gc != gc) {
                specs.push(SubmodelSpec::new(cfg, gc)?);
            }
        }
    }
    let rows = pareto_sweep(&model, &data.validation(&rc.train)?, &specs);
    say!("{:>7} {:>12} {:>9}  dims", "ratio", "params", "loss");
    for r in &rows {
        let loss = r.loss.map_or_else(|| "error".to_string(), |l| format!("{l:.4}"));
        say!("{:>7.4} {:>12} {:>9}  {:?}", r.ratio, group_digits(r.params), loss, r.dims);
    }
    if let Some(out) = &a.out {
        let vals: Vec<_> = rows.iter().map(|r| serde_json::to_value(r).expect("plain data")).collect();
        write_jsonl(out, &vals)?;
    }
    Ok(())
}

fn cmd_retrieve(a: RetrieveArgs) -> Result<()> {
    let model = load(&a.checkpoint)?;
    if model.cfg.kind != ModelKind::Vision {
        return Err(Error::Config("retrieve needs a vision checkpoint".into()));
    }
    let gc = a.gc.resolve(&model.cfg)?;
    let (_, data) = eval_data(&a.config, &model)?;
    let TrainData::Images { data: ds, split, norm } = &data else { unreachable!("vision data") };
    let db_idx: Vec<usize> = (0..*split).collect();
    let q_idx: Vec<usize> = (*split..ds.len()).collect();
    let full = model.cfg.full_gc();
    let index = build_index(&model, &ds.tensor(&db_idx, norm)?, ds.labels_at(&db_idx), &full)?;
    let queries = ds.tensor(&q_idx, norm)?;
    let q = encode_images(&model, &queries, &gc, 64)?;
    let reference = encode_images(&model, &queries, &full, 64)?;
    let res = index.retrieve(&q, &reference)?;
    let truth = ds.labels_at(&q_idx);
    let acc = res.predicted.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
    let row = json!({"dims": gc.dims, "agreement": res.agreement, "accuracy": acc, "queries": truth.len(), "database": index.len()});
    say!("{row}");
    if let Some(out) = &a.out {
        write_jsonl(out, &[row])?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let model = match (&a.checkpoint, &a.preset) {
        (Some(p), _) => load(p)?,
        (None, Some(name)) => init_params::<f32>(&ModelConfig::preset(name)?, a.seed)?,
        (None, None) => return Err(Error::Config("bench needs --checkpoint or --preset".into())),
    };
    let cfg = &model.cfg;
    let ms =
        a.granularity.clone().unwrap_or_else(|| if cfg.is_nested() { cfg.granularities() } else { vec![cfg.width(0)] });
    let gcs: Vec<GranularityConfig> = ms.iter().map(|&m| GranularityConfig::uniform(cfg.n_layers, m)).collect();
    let bc = BenchConfig { batch: a.batch, runs: a.runs, seed: a.seed, ..Default::default() };
    let rows = bench(&model, &gcs, &a.seq_lens, &bc)?;
    say!("{:>7} {:>8} {:>12} {:>14} {:>12}", "ratio", "seq_len", "median_ms", "throughput/s", "peak_rss_mb");
    for r in &rows {
        let rss = r.peak_rss_bytes.map_or_else(|| "-".into(), |b| format!("{:.1}", b as f64 / 1048576.0));
        say!("{:>7.4} {:>8} {:>12.3} {:>14.1} {:>12}", r.ratio, r.seq_len, r.median_secs * 1e3, r.throughput, rss);
    }
    if let Some(out) = &a.out {
        let vals: Vec<_> = rows.iter().map(|r| serde_json::to_value(r).expect("plain data")).collect();
        write_jsonl(out, &vals)?;
    }
    Ok(())
}
