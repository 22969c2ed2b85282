//! Evaluation: single-step error, autoregressive rollout, gate activation
//! maps and the dense-versus-sparse mode-scaling table.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Model;
use crate::moe::{FreqMoe, MoeShape};
use crate::nn::{count_flops, dense_param_count, FnoConfig, Network, Routing, SpectralKernel};
use crate::par;
use crate::pde::PdeDataset;
use crate::spectral::{BandId, BandLayout};
use crate::tensor::Tensor;
use crate::train::l2_relative_error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mean: f64,
    pub std: f64,
    pub per_sample: Vec<f64>,
    /// Mean relative error of each output channel.
    pub per_channel: Vec<f64>,
}

fn channel_tensor(t: &Tensor, c: usize) -> Tensor {
    let s = t.shape();
    Tensor::from_vec(&[1, s[1], s[2]], t.channel(c).to_vec()).expect("channel shape")
}

/// Relative error of `model` on every sample of `data`.
pub fn eval_single_step<K: SpectralKernel>(
    model: &Network<K>,
    data: &PdeDataset,
    routing: Routing,
) -> Result<EvalReport> {
    eval_with(data, |x| model.predict(x, routing))
}

/// Same, for any one-step predictor.
pub fn eval_with(
    data: &PdeDataset,
    predict: impl Fn(&Tensor) -> Result<Tensor> + Sync + Send,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let rows = par::map(data.len(), |i| -> Result<(f64, Vec<f64>)> {
        let p = predict(&data.inputs[i])?;
        let t = &data.targets[i];
        let total = l2_relative_error(&p, t)?;
        let channels = (0..t.shape()[0])
            .map(|c| l2_relative_error(&channel_tensor(&p, c), &channel_tensor(t, c)))
            .collect::<Result<Vec<_>>>()?;
        Ok((total, channels))
    });
    let mut per_sample = Vec::with_capacity(data.len());
    let mut per_channel: Vec<f64> = Vec::new();
    for r in rows {
        let (e, ch) = r?;
        per_sample.push(e);
        if per_channel.is_empty() {
            per_channel = vec![0.0; ch.len()];
        }
        per_channel.iter_mut().zip(&ch).for_each(|(a, b)| *a += b);
    }
    let n = per_sample.len() as f64;
    let mean = per_sample.iter().sum::<f64>() / n;
    let std = (per_sample
        .iter()
        .map(|e| (e - mean) * (e - mean))
        .sum::<f64>()
        / n)
        .sqrt();
    per_channel.iter_mut().for_each(|c| *c /= n);
    Ok(EvalReport {
        samples: per_sample.len(),
        mean,
        std,
        per_sample,
        per_channel,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutCurve {
    /// Relative error after each step, starting at step 1.
    pub errors: Vec<f64>,
    /// The prediction became non-finite; the curve stops at the last finite
    /// step.
    pub diverged: bool,
}

impl RolloutCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,l2re\n");
        for (i, e) in self.errors.iter().enumerate() {
            writeln!(s, "{},{e:e}", i + 1).expect("string write");
        }
        s
    }
}

/// Feeds predictions back as inputs and compares step `i` against
/// `truth[i]`.
pub fn rollout_with(
    initial: &Tensor,
    truth: &[Tensor],
    step: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<RolloutCurve> {
    let mut state = initial.clone();
    let mut errors = Vec::with_capacity(truth.len());
    for t in truth {
        state = match step(&state) {
            Ok(s) => s,
            Err(Error::Data(_)) => {
                return Ok(RolloutCurve {
                    errors,
                    diverged: true,
                })
            }
            Err(e) => return Err(e),
        };
        if state.ensure_finite("rollout state").is_err() {
            return Ok(RolloutCurve {
                errors,
                diverged: true,
            });
        }
        let e = l2_relative_error(&state, t)?;
        if !e.is_finite() {
            return Ok(RolloutCurve {
                errors,
                diverged: true,
            });
        }
        errors.push(e);
    }
    Ok(RolloutCurve {
        errors,
        diverged: false,
    })
}

/// Autoregressive rollout over trajectory `trajectory` of `data`, starting
/// from its first input; `steps` is capped by the trajectory length.
pub fn rollout<K: SpectralKernel>(
    model: &Network<K>,
    data: &PdeDataset,
    trajectory: usize,
    steps: usize,
    routing: Routing,
) -> Result<RolloutCurve> {
    let range = data.trajectory(trajectory);
    if range.is_empty() {
        return Err(Error::Data(format!(
            "dataset has no trajectory {trajectory}"
        )));
    }
    let truth = &data.targets[range.start..range.end.min(range.start + steps)];
    rollout_with(&data.inputs[range.start], truth, |x| {
        model.predict(x, routing)
    })
}

/// Mean gate value and top-K selection frequency per band, averaged over
/// layers and samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateMap {
    pub layout: BandLayout,
    pub top_k: usize,
    pub samples: usize,
    /// `J1 x J2`; the base band is 1.0, bands without an expert are `None`.
    pub mean_gate: Vec<Vec<Option<f64>>>,
    pub active_frequency: Vec<Vec<Option<f64>>>,
}

impl GateMap {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("i1,i2,mean_gate,active_frequency\n");
        let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for (i1, row) in self.mean_gate.iter().enumerate() {
            for (i2, g) in row.iter().enumerate() {
                writeln!(
                    s,
                    "{i1},{i2},{},{}",
                    f(*g),
                    f(self.active_frequency[i1][i2])
                )
                .expect("string write");
            }
        }
        s
    }

    pub fn get(&self, band: BandId) -> Option<f64> {
        self.mean_gate[band.0][band.1]
    }
}

pub fn gate_activation_map(model: &FreqMoe, data: &PdeDataset, k: usize) -> Result<GateMap> {
    if data.is_empty() {
        return Err(Error::Data("gate map needs at least one sample".into()));
    }
    let layout = model.layout();
    let bands = model.layers[0].spectral.expert_bands();
    let per = par::map(data.len(), |i| -> Result<Vec<(Vec<f64>, Vec<usize>)>> {
        let (_, tape) = model.forward(&data.inputs[i], Routing::TopK(k))?;
        Ok(tape
            .spectral_tapes()
            .iter()
            .map(|t| (FreqMoeLayerGates::gates(t), t.active_experts().to_vec()))
            .collect())
    });
    let n_layers = model.layers.len() as f64;
    let mut gate_sum = vec![0.0; bands.len()];
    let mut active_sum = vec![0.0; bands.len()];
    for sample in per {
        for (gates, active) in sample? {
            gate_sum.iter_mut().zip(&gates).for_each(|(a, g)| *a += g);
            for j in active {
                active_sum[j] += 1.0;
            }
        }
    }
    let denom = data.len() as f64 * n_layers;
    let (j1, j2) = layout.grid_chunks;
    let mut mean_gate = vec![vec![None; j2]; j1];
    let mut active_frequency = vec![vec![None; j2]; j1];
    mean_gate[0][0] = Some(1.0);
    active_frequency[0][0] = Some(1.0);
    for (j, b) in bands.iter().enumerate() {
        mean_gate[b.0][b.1] = Some(gate_sum[j] / denom);
        active_frequency[b.0][b.1] = Some(active_sum[j] / denom);
    }
    Ok(GateMap {
        layout,
        top_k: k,
        samples: data.len(),
        mean_gate,
        active_frequency,
    })
}

struct FreqMoeLayerGates;

impl FreqMoeLayerGates {
    fn gates(t: &crate::moe::MoeTape) -> Vec<f64> {
        <crate::moe::FreqMoeLayer as SpectralKernel>::gate_values(t).to_vec()
    }
}

/// Gate map of a checkpointed model; dense models have no gates.
pub fn gate_activation_map_of(model: &Model, data: &PdeDataset, k: usize) -> Result<GateMap> {
    match model {
        Model::FreqMoe(m) => gate_activation_map(m, data, k),
        Model::Dense(_) => Err(Error::Architecture("dense model has no gates".into())),
    }
}

/// One row of the mode-scaling table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    /// Retained modes per block, `(M, M)`.
    pub modes: usize,
    pub layout: (usize, usize),
    pub dense_spectral_flops: u64,
    pub dense_flops: u64,
    pub moe_expert_flops: u64,
    pub moe_gating_flops: u64,
    pub moe_flops: u64,
    pub dense_params: usize,
    pub moe_active_params: usize,
    pub dense_seconds: Option<f64>,
    pub moe_seconds: Option<f64>,
}

/// Settings shared by every row of [`bench_modes`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub width: usize,
    pub layers: usize,
    pub chunk: (usize, usize),
    pub rank: usize,
    pub top_k: usize,
    pub grid_size: usize,
    /// Best-of-5 wall time of one forward pass of randomly initialized
    /// models.
    pub time: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            width: 32,
            layers: 4,
            chunk: (4, 4),
            rank: 4,
            top_k: 2,
            grid_size: 64,
            time: false,
        }
    }
}

fn best_of_5(f: impl Fn() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..5 {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Dense and FreqMoE cost per total mode count. FreqMoE rows use a
/// `(M/P1) x (M/P2)` layout with every non-base band holding an expert and
/// `top_k` of them active.
pub fn bench_modes(modes: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(modes.len());
    for &m in modes {
        if m % cfg.chunk.0 != 0 || m % cfg.chunk.1 != 0 {
            return Err(Error::Config(format!(
                "mode count {m} is not a multiple of the chunk {:?}",
                cfg.chunk
            )));
        }
        let dense_cfg = FnoConfig {
            in_channels: 1,
            out_channels: 1,
            width: cfg.width,
            layers: cfg.layers,
            modes: (m, m),
            grid_size: cfg.grid_size,
        };
        dense_cfg.validate()?;
        let layout = BandLayout::new(cfg.chunk, (m / cfg.chunk.0, m / cfg.chunk.1))?;
        let shape = MoeShape {
            width: cfg.width,
            layers: cfg.layers,
            layout,
            experts: layout.expert_band_count(),
            rank: cfg.rank,
            in_channels: 1,
            out_channels: 1,
        };
        let k = cfg.top_k.min(shape.experts);
        let dense = count_flops(&dense_cfg, cfg.grid_size);
        let moe = shape.flops(k, cfg.grid_size);
        let (dense_seconds, moe_seconds) = if cfg.time {
            time_models(&dense_cfg, &layout, cfg, k)?
        } else {
            (None, None)
        };
        rows.push(BenchRow {
            modes: m,
            layout: layout.grid_chunks,
            dense_spectral_flops: dense.spectral,
            dense_flops: dense.total(),
            moe_expert_flops: cfg.layers as u64 * k as u64 * shape.expert_flops(),
            moe_gating_flops: moe.gating,
            moe_flops: moe.total(),
            dense_params: dense_param_count(&dense_cfg),
            moe_active_params: shape.active_params(k).total(),
            dense_seconds,
            moe_seconds,
        });
    }
    Ok(rows)
}

fn time_models(
    dense_cfg: &FnoConfig,
    layout: &BandLayout,
    cfg: &BenchConfig,
    k: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    use crate::nn::Fno;
    use crate::upcycle::{probe_inputs, upcycle, UpcycleSpec};
    let x = probe_inputs(1, cfg.grid_size, 1, 0).remove(0);
    let dense = Fno::new(*dense_cfg, 0)?;
    let td = best_of_5(|| dense.predict(&x, Routing::Train).map(|_| ()))?;
    let base = Fno::new(
        FnoConfig {
            modes: cfg.chunk,
            ..*dense_cfg
        },
        0,
    )?;
    let spec = UpcycleSpec {
        rank: cfg.rank,
        top_k: k,
        ..UpcycleSpec::full(*layout, 0)
    };
    let moe = upcycle(&base, &spec)?;
    let tm = best_of_5(|| moe.predict(&x, Routing::TopK(k)).map(|_| ()))?;
    Ok((Some(td), Some(tm)))
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "modes,layout,dense_spectral_flops,dense_flops,moe_expert_flops,moe_gating_flops,moe_flops,dense_params,moe_active_params,dense_seconds,moe_seconds\n",
    );
    let t = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in rows {
        writeln!(
            s,
            "{},{}x{},{},{},{},{},{},{},{},{},{}",
            r.modes,
            r.layout.0,
            r.layout.1,
            r.dense_spectral_flops,
            r.dense_flops,
            r.moe_expert_flops,
            r.moe_gating_flops,
            r.moe_flops,
            r.dense_params,
            r.moe_active_params,
            t(r.dense_seconds),
            t(r.moe_seconds)
        )
        .expect("string write");
    }
    s
}
