//! Command-line front end.
//!
//! Every subcommand resolves its settings from built-in defaults, then an
//! optional JSON `--config` file, then explicit flags, and records the
//! resolved settings together with input and output hashes in
//! `<run-dir>/run.json`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::evalx::{
    bench_csv, bench_modes, eval_single_step, gate_activation_map_of, rollout, BenchConfig,
};
use crate::io::{self, Model, ModelCheckpoint};
use crate::moe::gate_records;
use crate::nn::{Fno, FnoConfig, Network, Routing, SpectralKernel};
use crate::pde::{generate_dataset, PdeDataset, PdeDatasetMeta, Problem};
use crate::spectral::BandLayout;
use crate::train::{fit, TrainConfig, TrainReport};
use crate::upcycle::{upcycle, verify_upcycle, UpcycleSpec};

#[derive(Parser, Debug)]
#[command(
    name = "freqmoe",
    version,
    about = "Frequency-band mixture-of-experts neural operators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a heat or Navier-Stokes dataset.
    GenData(GenDataArgs),
    /// Train a dense FNO.
    TrainBase(TrainBaseArgs),
    /// Convert a dense checkpoint into a FreqMoE checkpoint.
    Upcycle(UpcycleArgs),
    /// Train an upcycled FreqMoE checkpoint.
    Finetune(FinetuneArgs),
    /// Single-step relative error on a dataset.
    Eval(EvalArgs),
    /// Autoregressive rollout error curve.
    Rollout(RolloutArgs),
    /// FLOP and parameter table for dense versus FreqMoE models.
    BenchModes(BenchArgs),
    /// Gate activation map of a FreqMoE checkpoint.
    InspectGates(GateArgs),
    /// Check an upcycled checkpoint against its base.
    Verify(VerifyArgs),
}

/// `AxB` pair such as `8x8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Pair(usize, usize);

fn parse_pair(s: &str) -> std::result::Result<Pair, String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected AxB, got '{s}'"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
    Ok(Pair(p(a)?, p(b)?))
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON file with default values for this command's settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for run.json and reports.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// heat or ns.
    #[arg(long)]
    #[serde(skip)]
    problem: Option<String>,
    #[arg(long)]
    #[serde(rename = "grid_size", skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    samples: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(rename = "trajectory_len", skip_serializing_if = "Option::is_none")]
    traj_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dt: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    viscosity: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    burn_in: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    velocity_scale: Option<f64>,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
}

/// Flags for every [`TrainConfig`] field.
#[derive(Args, Debug, Serialize)]
struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    beta2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    warmup_steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    cosine_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steady_epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    min_lr_ratio: Option<f64>,
    /// Weight of the gate sparsity loss.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sparsity_weight: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grad_clip: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Log every optimizer step.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    log_steps: bool,
}

#[derive(Args, Debug, Serialize)]
struct TrainBaseArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    #[arg(long)]
    #[serde(skip)]
    data: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    layers: Option<usize>,
    /// Retained modes per block, e.g. 4x4.
    #[arg(long, value_parser = parse_pair)]
    #[serde(skip_serializing_if = "Option::is_none")]
    modes: Option<Pair>,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug, Serialize)]
struct UpcycleArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    #[arg(long)]
    #[serde(skip)]
    base: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Number of experts; defaults to every non-base band.
    #[arg(long)]
    #[serde(rename = "n_experts", skip_serializing_if = "Option::is_none")]
    experts: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    /// Band grid, e.g. 8x8.
    #[arg(long, value_parser = parse_pair)]
    #[serde(skip_serializing_if = "Option::is_none")]
    chunks: Option<Pair>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    top_k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Grid the upcycled model targets.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grid_size: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct FinetuneArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    #[arg(long)]
    #[serde(skip)]
    model: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    data: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    out: PathBuf,
    /// Keep the shared spectral weights fixed.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    freeze_base: bool,
    /// Steps trained with experts switched off before joint training.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    burn_in_masked: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Active experts at inference; defaults to the checkpoint's value.
    #[arg(long)]
    top_k: Option<usize>,
    /// train, val or all.
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Trajectory index; defaults to the first validation trajectory.
    #[arg(long)]
    trajectory: Option<usize>,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// Comma-separated retained-mode counts.
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    #[serde(skip)]
    modes: Vec<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    layers: Option<usize>,
    #[arg(long, value_parser = parse_pair)]
    #[serde(skip_serializing_if = "Option::is_none")]
    chunk: Option<Pair>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    top_k: Option<usize>,
    #[arg(long)]
    #[serde(rename = "grid_size", skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    /// Add best-of-5 wall time per forward pass.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    time: bool,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    top_k: Option<usize>,
    /// Per-sample gate records written for the first N samples.
    #[arg(long, default_value_t = 16)]
    records: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 100)]
    probe: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// `defaults` overlaid with the config file, then with the non-null flags.
fn resolve<T: Serialize + DeserializeOwned>(
    defaults: T,
    config: Option<&Path>,
    flags: &impl Serialize,
) -> Result<T> {
    let mut value = serde_json::to_value(defaults)?;
    let fields = value
        .as_object_mut()
        .expect("settings serialize to an object");
    let known: Vec<String> = fields.keys().cloned().collect();
    let mut overlay = |src: Map<String, Value>, what: &str| -> Result<()> {
        for (k, v) in src {
            if !known.contains(&k) {
                return Err(Error::Config(format!("unknown {what} key '{k}'")));
            }
            fields.insert(k, v);
        }
        Ok(())
    };
    if let Some(path) = config {
        let text = fs::read_to_string(path)?;
        match serde_json::from_str::<Value>(&text) {
            Ok(Value::Object(m)) => overlay(m, "config")?,
            Ok(_) => {
                return Err(Error::Config(format!(
                    "{} must hold a JSON object",
                    path.display()
                )))
            }
            Err(e) => return Err(Error::Config(format!("{}: {e}", path.display()))),
        }
    }
    if let Value::Object(m) = serde_json::to_value(flags)? {
        overlay(m, "flag")?;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid settings: {e}")))
}

#[derive(Serialize)]
struct FileRecord {
    path: String,
    sha256: String,
}

fn record(path: &Path) -> Result<FileRecord> {
    Ok(FileRecord {
        path: path.display().to_string(),
        sha256: io::file_sha256(path)?,
    })
}

struct Run {
    command: &'static str,
    dir: PathBuf,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
}

impl Run {
    fn new(command: &'static str, common: &Common, fallback: &Path) -> Result<Self> {
        let dir = common
            .run_dir
            .clone()
            .unwrap_or_else(|| fallback.to_path_buf());
        fs::create_dir_all(&dir)?;
        Ok(Run {
            command,
            dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(record(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(record(path)?);
        Ok(())
    }

    /// Writes `<run-dir>/<command>.<ext>`.
    fn report(&mut self, ext: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(format!("{}.{ext}", self.command));
        io::write_atomic(&path, contents.as_bytes())?;
        self.output(&path)?;
        Ok(path)
    }

    fn finish(self, settings: Value) -> Result<()> {
        let doc = json!({
            "command": self.command,
            "version": env!("CARGO_PKG_VERSION"),
            "settings": settings,
            "inputs": self.inputs,
            "outputs": self.outputs,
        });
        io::write_json(&self.dir.join("run.json"), &doc)
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn load_data(path: &Path, run: &mut Run) -> Result<PdeDataset> {
    let d = io::load_dataset(path)?;
    run.input(path)?;
    Ok(d)
}

fn load_model(path: &Path, run: &mut Run) -> Result<ModelCheckpoint> {
    let c = io::load_checkpoint(path)?;
    run.input(path)?;
    Ok(c)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let problem: Problem = match &a.problem {
        Some(p) => p.parse()?,
        None => return Err(Error::Config("--problem is required (heat or ns)".into())),
    };
    let (size, samples, seed) = (
        a.size.unwrap_or(64),
        a.samples.unwrap_or(200),
        a.seed.unwrap_or(0),
    );
    let defaults = match problem {
        Problem::Heat => PdeDatasetMeta::heat(size, samples, seed),
        Problem::NsVorticity => PdeDatasetMeta::ns(size, samples, seed),
    };
    let meta: PdeDatasetMeta = resolve(defaults, a.common.config.as_deref(), &a)?;
    let mut run = Run::new("gen-data", &a.common, &parent_dir(&a.out))?;
    let data = generate_dataset(&meta)?;
    io::save_dataset(&a.out, &data)?;
    run.output(&a.out)?;
    println!(
        "wrote {} samples ({:?}, {}x{}) to {}",
        data.len(),
        meta.problem,
        meta.grid_size,
        meta.grid_size,
        a.out.display()
    );
    run.finish(serde_json::to_value(&data.meta)?)
}

#[derive(Serialize, Deserialize)]
struct TrainBaseSettings {
    width: usize,
    layers: usize,
    modes: Pair,
    #[serde(flatten)]
    train: TrainConfig,
}

/// Writes metrics to `<run-dir>/<command>.jsonl` while training.
fn train_with_log<K: SpectralKernel>(
    model: &mut Network<K>,
    data: &PdeDataset,
    cfg: &TrainConfig,
    run: &mut Run,
) -> Result<TrainReport> {
    let (tr, va) = data.split();
    let (train, val) = (data.subset(&tr), data.subset(&va));
    let log_path = run.dir.join(format!("{}.jsonl", run.command));
    let mut log = Vec::new();
    let report = fit(model, &train, Some(&val), cfg, Some(&mut log))?;
    io::write_atomic(&log_path, &log)?;
    run.output(&log_path)?;
    if let Some(v) = report.final_val_l2re {
        println!("final validation L2RE {v:.6} after {} steps", report.steps);
    }
    Ok(report)
}

fn train_base(a: TrainBaseArgs) -> Result<()> {
    let defaults = TrainBaseSettings {
        width: 32,
        layers: 4,
        modes: Pair(4, 4),
        train: TrainConfig::default(),
    };
    let s: TrainBaseSettings = resolve(defaults, a.common.config.as_deref(), &a)?;
    let mut run = Run::new("train-base", &a.common, &parent_dir(&a.out))?;
    let data = load_data(&a.data, &mut run)?;
    let config = FnoConfig {
        in_channels: data.meta.channels,
        out_channels: data.meta.channels,
        width: s.width,
        layers: s.layers,
        modes: (s.modes.0, s.modes.1),
        grid_size: data.meta.grid_size,
    };
    let mut model = Fno::new(config, s.train.seed)?;
    let report = train_with_log(&mut model, &data, &s.train, &mut run)?;
    let mut ckpt = ModelCheckpoint::new(Model::Dense(model), s.train.seed);
    ckpt.provenance = json!({
        "stage": "train-base",
        "data_sha256": run.inputs[0].sha256,
        "train": s.train,
        "final_val_l2re": report.final_val_l2re,
    });
    io::save_checkpoint(&a.out, &ckpt)?;
    run.output(&a.out)?;
    run.finish(serde_json::to_value(&s)?)
}

#[derive(Serialize, Deserialize)]
struct UpcycleSettings {
    n_experts: Option<usize>,
    rank: usize,
    alpha: f64,
    chunks: Pair,
    top_k: usize,
    temperature: f64,
    seed: u64,
    grid_size: Option<usize>,
}

fn upcycle_cmd(a: UpcycleArgs) -> Result<()> {
    let defaults = UpcycleSettings {
        n_experts: None,
        rank: 4,
        alpha: 1.0,
        chunks: Pair(8, 8),
        top_k: 2,
        temperature: 1.0,
        seed: 0,
        grid_size: None,
    };
    let s: UpcycleSettings = resolve(defaults, a.common.config.as_deref(), &a)?;
    let mut run = Run::new("upcycle", &a.common, &parent_dir(&a.out))?;
    let base_ckpt = load_model(&a.base, &mut run)?;
    let base = base_ckpt.into_dense()?;
    let layout = BandLayout::new(base.config.modes, (s.chunks.0, s.chunks.1))?;
    let spec = UpcycleSpec {
        n_experts: s.n_experts.unwrap_or(layout.expert_band_count()),
        bands: None,
        rank: s.rank,
        alpha: s.alpha,
        layout,
        top_k: s.top_k,
        temperature: s.temperature,
        seed: s.seed,
        grid_size: s.grid_size,
    };
    let moe = upcycle(&base, &spec)?;
    let report = verify_upcycle(&base, &moe, 8, s.seed)?;
    let mut ckpt = ModelCheckpoint::new(Model::FreqMoe(moe), s.seed);
    ckpt.upcycle = Some(spec.clone());
    ckpt.provenance = json!({
        "stage": "upcycle",
        "base_sha256": run.inputs[0].sha256,
    });
    io::save_checkpoint(&a.out, &ckpt)?;
    run.output(&a.out)?;
    println!(
        "{} experts per layer on a {}x{} band grid; masked deviation {:e}; {} total / {} active parameters",
        spec.n_experts,
        layout.grid_chunks.0,
        layout.grid_chunks.1,
        report.max_deviation,
        report.total_params,
        report.active.total()
    );
    run.finish(serde_json::to_value(&spec)?)
}

#[derive(Serialize, Deserialize)]
struct FinetuneSettings {
    #[serde(flatten)]
    train: TrainConfig,
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    let s: TrainConfig = resolve(TrainConfig::default(), a.common.config.as_deref(), &a)?;
    let mut run = Run::new("finetune", &a.common, &parent_dir(&a.out))?;
    let ckpt = load_model(&a.model, &mut run)?;
    let (seed, spec) = (ckpt.seed, ckpt.upcycle.clone());
    let mut model = ckpt.into_moe()?;
    let data = load_data(&a.data, &mut run)?;
    let report = train_with_log(&mut model, &data, &s, &mut run)?;
    let mut out = ModelCheckpoint::new(Model::FreqMoe(model), seed);
    out.upcycle = spec;
    out.provenance = json!({
        "stage": "finetune",
        "model_sha256": run.inputs[0].sha256,
        "data_sha256": run.inputs[1].sha256,
        "train": s,
        "final_val_l2re": report.final_val_l2re,
        "final_mean_gate": report.last().and_then(|m| m.mean_gate),
    });
    io::save_checkpoint(&a.out, &out)?;
    run.output(&a.out)?;
    run.finish(serde_json::to_value(FinetuneSettings { train: s })?)
}

fn routing_for(model: &Model, top_k: Option<usize>) -> Routing {
    match (model, top_k) {
        (Model::FreqMoe(_), Some(k)) => Routing::TopK(k),
        (Model::FreqMoe(m), None) => m.inference_routing(),
        (Model::Dense(_), _) => Routing::Train,
    }
}

fn select_split(data: &PdeDataset, split: &str) -> Result<PdeDataset> {
    let (tr, va) = data.split();
    match split {
        "train" => Ok(data.subset(&tr)),
        "val" => Ok(data.subset(&va)),
        "all" => Ok(data.clone()),
        _ => Err(Error::Config(format!(
            "unknown split '{split}' (train, val or all)"
        ))),
    }
}

fn analysis_dir(out: &Option<PathBuf>) -> PathBuf {
    out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let mut run = Run::new("eval", &a.common, &analysis_dir(&a.out))?;
    let ckpt = load_model(&a.model, &mut run)?;
    let data = select_split(&load_data(&a.data, &mut run)?, &a.split)?;
    let routing = routing_for(&ckpt.model, a.top_k);
    let report = match &ckpt.model {
        Model::Dense(m) => eval_single_step(m, &data, routing)?,
        Model::FreqMoe(m) => eval_single_step(m, &data, routing)?,
    };
    let mut csv = String::from("sample,l2re\n");
    for (i, e) in report.per_sample.iter().enumerate() {
        csv.push_str(&format!("{i},{e:e}\n"));
    }
    run.report("csv", &csv)?;
    run.report("json", &serde_json::to_string_pretty(&report)?)?;
    println!(
        "mean L2RE {:.6} (std {:.6}) over {} samples",
        report.mean, report.std, report.samples
    );
    run.finish(json!({"split": a.split, "routing": routing}))
}

fn rollout_cmd(a: RolloutArgs) -> Result<()> {
    let mut run = Run::new("rollout", &a.common, &analysis_dir(&a.out))?;
    let ckpt = load_model(&a.model, &mut run)?;
    let data = load_data(&a.data, &mut run)?;
    let trajectory = a
        .trajectory
        .unwrap_or(data.meta.trajectories() - data.meta.val_trajectories());
    let routing = routing_for(&ckpt.model, a.top_k);
    let curve = match &ckpt.model {
        Model::Dense(m) => rollout(m, &data, trajectory, a.steps, routing)?,
        Model::FreqMoe(m) => rollout(m, &data, trajectory, a.steps, routing)?,
    };
    run.report("csv", &curve.to_csv())?;
    if curve.diverged {
        println!("prediction diverged after {} steps", curve.errors.len());
    }
    if let Some(e) = curve.errors.last() {
        println!("L2RE after {} steps: {e:.6}", curve.errors.len());
    }
    run.finish(json!({"trajectory": trajectory, "steps": a.steps, "routing": routing}))
}

#[derive(Serialize, Deserialize)]
struct BenchSettings {
    width: usize,
    layers: usize,
    chunk: Pair,
    rank: usize,
    top_k: usize,
    grid_size: usize,
    time: bool,
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let d = BenchConfig::default();
    let defaults = BenchSettings {
        width: d.width,
        layers: d.layers,
        chunk: Pair(d.chunk.0, d.chunk.1),
        rank: d.rank,
        top_k: d.top_k,
        grid_size: d.grid_size,
        time: false,
    };
    let s: BenchSettings = resolve(defaults, a.common.config.as_deref(), &a)?;
    let mut run = Run::new("bench-modes", &a.common, &analysis_dir(&a.out))?;
    let cfg = BenchConfig {
        width: s.width,
        layers: s.layers,
        chunk: (s.chunk.0, s.chunk.1),
        rank: s.rank,
        top_k: s.top_k,
        grid_size: s.grid_size,
        time: s.time,
    };
    let rows = bench_modes(&a.modes, &cfg)?;
    let csv = bench_csv(&rows);
    run.report("csv", &csv)?;
    print!("{csv}");
    run.finish(json!({"modes": a.modes, "bench": s}))
}

fn inspect_gates(a: GateArgs) -> Result<()> {
    let mut run = Run::new("inspect-gates", &a.common, &analysis_dir(&a.out))?;
    let ckpt = load_model(&a.model, &mut run)?;
    let data = load_data(&a.data, &mut run)?;
    let k = match (&ckpt.model, a.top_k) {
        (_, Some(k)) => k,
        (Model::FreqMoe(m), None) => m.default_top_k(),
        (Model::Dense(_), None) => 0,
    };
    let map = gate_activation_map_of(&ckpt.model, &data, k)?;
    run.report("csv", &map.to_csv())?;
    run.report("json", &serde_json::to_string_pretty(&map)?)?;
    if let Model::FreqMoe(m) = &ckpt.model {
        let mut lines = String::new();
        for i in 0..a.records.min(data.len()) {
            for r in gate_records(m, &data.inputs[i], k, i)? {
                lines.push_str(&serde_json::to_string(&r)?);
                lines.push('\n');
            }
        }
        run.report("jsonl", &lines)?;
    }
    for row in &map.mean_gate {
        let cells: Vec<String> = row
            .iter()
            .map(|g| {
                g.map(|v| format!("{v:.3}"))
                    .unwrap_or_else(|| "  -  ".into())
            })
            .collect();
        println!("{}", cells.join(" "));
    }
    run.finish(json!({"top_k": k, "records": a.records}))
}

fn verify_cmd(a: VerifyArgs) -> Result<()> {
    let mut run = Run::new("verify", &a.common, &analysis_dir(&a.out))?;
    let base = load_model(&a.base, &mut run)?.into_dense()?;
    let moe = load_model(&a.model, &mut run)?.into_moe()?;
    let report = verify_upcycle(&base, &moe, a.probe, a.seed)?;
    run.report("json", &serde_json::to_string_pretty(&report)?)?;
    println!(
        "max masked deviation {:e} over {} probes; max |dR| {:e}; params {} total, {} active (K={})",
        report.max_deviation,
        report.probe_inputs,
        report.max_delta_norm(),
        report.total_params,
        report.active.total(),
        report.top_k
    );
    run.finish(json!({"probe": a.probe, "seed": a.seed}))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainBase(a) => train_base(a),
        Command::Upcycle(a) => upcycle_cmd(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Rollout(a) => rollout_cmd(a),
        Command::BenchModes(a) => bench_cmd(a),
        Command::InspectGates(a) => inspect_gates(a),
        Command::Verify(a) => verify_cmd(a),
    }
}

/// Exit code of a command run: 0 on success, 1 for invalid input, 2 for
/// failures while running.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_validation() => 1,
        Err(_) => 2,
    }
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = dispatch(cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}
