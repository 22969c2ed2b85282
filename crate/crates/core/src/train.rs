//! Optimizer, learning-rate schedule, losses and the training loop.
//!
//! The same loop pretrains a dense FNO and fine-tunes an upcycled FreqMoE
//! model. Per-sample gradients are computed in parallel and summed in sample
//! order, so results do not depend on the thread count.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::{finite_or, flatten, load_flat, Network, Parameters, Routing, SpectralKernel};
use crate::par;
use crate::pde::PdeDataset;
use crate::rng;
use crate::spectral::BandId;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub cosine_epochs: usize,
    pub steady_epochs: usize,
    pub min_lr_ratio: f64,
    /// Weight λ of the gate sparsity term.
    pub sparsity_weight: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Keep the shared spectral weights `R` fixed.
    pub freeze_base: bool,
    /// Number of initial steps run with experts switched off.
    pub burn_in_masked: usize,
    /// Total epochs; defaults to cosine plus steady epochs.
    pub epochs: Option<usize>,
    pub seed: u64,
    /// Emit one JSON line per optimizer step in addition to per epoch.
    pub log_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            warmup_steps: 50,
            cosine_epochs: 70,
            steady_epochs: 30,
            min_lr_ratio: 5e-2,
            sparsity_weight: 0.01,
            grad_clip: Some(1.0),
            freeze_base: false,
            burn_in_masked: 0,
            epochs: None,
            seed: 0,
            log_steps: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return config_err(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.min_lr_ratio > 0.0 && self.min_lr_ratio <= 1.0) {
            return config_err(format!(
                "min LR ratio must be in (0, 1], got {}",
                self.min_lr_ratio
            ));
        }
        if !(self.sparsity_weight >= 0.0) {
            return config_err(format!(
                "sparsity weight must be non-negative, got {}",
                self.sparsity_weight
            ));
        }
        if self.batch_size == 0 {
            return config_err("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return config_err("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return config_err(format!("gradient clip must be positive, got {c}"));
            }
        }
        if self.total_epochs() == 0 {
            return config_err("at least one epoch is required");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs
            .unwrap_or(self.cosine_epochs + self.steady_epochs)
    }
}

/// Learning rate at optimizer step `step` (0-based) and fractional epoch
/// `epoch`: cosine decay from `lr` to `lr·min_ratio` over the cosine epochs,
/// then constant, scaled by a linear warmup over the first steps.
pub fn lr_at(step: usize, epoch: f64, cfg: &TrainConfig) -> f64 {
    let min = cfg.lr * cfg.min_lr_ratio;
    let base = if cfg.cosine_epochs == 0 || epoch >= cfg.cosine_epochs as f64 {
        min
    } else {
        let t = epoch.max(0.0) / cfg.cosine_epochs as f64;
        min + (cfg.lr - min) * 0.5 * (1.0 + (PI * t).cos())
    };
    if step < cfg.warmup_steps {
        base * step as f64 / cfg.warmup_steps as f64
    } else {
        base
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training(format!(
                "gradient entry {i} is {}",
                grads[i]
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// `‖pred − target‖₂ / ‖target‖₂`.
pub fn l2_relative_error(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.same_shape(target)?;
    let tn = target.norm();
    if tn == 0.0 {
        return Err(Error::Data("relative error of a zero-norm target".into()));
    }
    let d: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(d.sqrt() / tn)
}

/// Mean per-sample relative error over a batch.
pub fn batch_l2_relative_error(preds: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut s = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        s += l2_relative_error(p, t)?;
    }
    Ok(s / preds.len() as f64)
}

/// Gradient of [`l2_relative_error`] with respect to `pred`.
fn l2_relative_error_grad(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let loss = l2_relative_error(pred, target)?;
    let tn = target.norm();
    let mut g = pred.clone();
    let dn = loss * tn;
    for (gv, &t) in g.data_mut().iter_mut().zip(target.data()) {
        *gv = if dn > 0.0 { (*gv - t) / (dn * tn) } else { 0.0 };
    }
    Ok((loss, g))
}

/// Task and sparsity parts of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub task: f64,
    pub sparsity: f64,
    pub total: f64,
}

/// `task + λ·sparsity`.
pub fn total_loss(task: f64, sparsity: f64, lambda: f64) -> LossParts {
    LossParts {
        task,
        sparsity,
        total: task + lambda * sparsity,
    }
}

/// Summed gate values of one forward pass, averaged over layers.
fn layer_mean_gate_sum(gates: &[&[f64]]) -> f64 {
    if gates.is_empty() || gates.iter().all(|g| g.is_empty()) {
        return 0.0;
    }
    gates.iter().map(|g| g.iter().sum::<f64>()).sum::<f64>() / gates.len() as f64
}

struct SampleGrad {
    task: f64,
    sparsity: f64,
    /// Gate values per layer.
    gates: Vec<Vec<f64>>,
    grad: Vec<f64>,
}

/// Loss and flat parameter gradient of one sample for the objective
/// `(l2re + λ·sparsity) · weight`.
fn sample_grad<K: SpectralKernel>(
    model: &Network<K>,
    x: &Tensor,
    y: &Tensor,
    routing: Routing,
    lambda: f64,
    weight: f64,
) -> Result<SampleGrad> {
    let (pred, tape) = model.forward(x, routing)?;
    let (task, mut gy) = l2_relative_error_grad(&pred, y)?;
    gy.scale(weight);
    let gates: Vec<Vec<f64>> = model
        .gate_values(&tape)
        .iter()
        .map(|g| g.to_vec())
        .collect();
    let layers = gates.len().max(1) as f64;
    let gg: Vec<Vec<f64>> = gates
        .iter()
        .map(|g| vec![lambda * weight / layers; g.len()])
        .collect();
    let refs: Vec<&[f64]> = gates.iter().map(|g| g.as_slice()).collect();
    let sparsity = layer_mean_gate_sum(&refs);
    let mut grads = model.zeros_like();
    model.backward(&tape, &gy, Some(&gg), &mut grads)?;
    Ok(SampleGrad {
        task,
        sparsity,
        gates,
        grad: flatten(&grads),
    })
}

/// Batch objective and its gradient, summed in sample order.
pub struct BatchGrad {
    pub loss: LossParts,
    pub grad: Vec<f64>,
    /// Mean gate value per layer and expert over the batch.
    pub mean_gates: Vec<Vec<f64>>,
}

const REDUCE_CHUNK: usize = 8;

pub fn batch_gradient<K: SpectralKernel>(
    model: &Network<K>,
    inputs: &[&Tensor],
    targets: &[&Tensor],
    routing: Routing,
    lambda: f64,
) -> Result<BatchGrad> {
    let n = inputs.len();
    if n == 0 || n != targets.len() {
        return Err(Error::Data(format!(
            "batch of {n} inputs and {} targets",
            targets.len()
        )));
    }
    let weight = 1.0 / n as f64;
    let mut grad: Option<Vec<f64>> = None;
    let (mut task, mut sparsity) = (0.0, 0.0);
    let mut mean_gates: Vec<Vec<f64>> = Vec::new();
    for start in (0..n).step_by(REDUCE_CHUNK) {
        let end = (start + REDUCE_CHUNK).min(n);
        let parts = par::map(end - start, |i| {
            sample_grad(
                model,
                inputs[start + i],
                targets[start + i],
                routing,
                lambda,
                weight,
            )
        });
        for p in parts {
            let p = p?;
            task += p.task * weight;
            sparsity += p.sparsity * weight;
            match grad.as_mut() {
                None => grad = Some(p.grad),
                Some(g) => g.iter_mut().zip(&p.grad).for_each(|(a, b)| *a += b),
            }
            if mean_gates.is_empty() {
                mean_gates = p.gates.iter().map(|g| vec![0.0; g.len()]).collect();
            }
            for (m, g) in mean_gates.iter_mut().zip(&p.gates) {
                m.iter_mut().zip(g).for_each(|(a, b)| *a += b * weight);
            }
        }
    }
    Ok(BatchGrad {
        loss: total_loss(task, sparsity, lambda),
        grad: grad.expect("non-empty batch"),
        mean_gates,
    })
}

/// Per-step log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    pub task: f64,
    pub sparsity: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub masked: bool,
}

/// Per-epoch log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_task: f64,
    pub train_sparsity: f64,
    /// `train_task + λ·train_sparsity`.
    pub train_total: f64,
    pub val_l2re: Option<f64>,
    /// Mean gate value over experts, layers and training samples.
    pub mean_gate: Option<f64>,
    /// Mean gate value per expert band, averaged over layers.
    pub gate_by_band: Vec<(BandId, f64)>,
    pub clipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub steps: usize,
    pub final_val_l2re: Option<f64>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

/// Mean relative error of `model` on a dataset, evaluated in parallel.
pub fn evaluate<K: SpectralKernel>(
    model: &Network<K>,
    data: &PdeDataset,
    routing: Routing,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let errs = par::map(data.len(), |i| {
        let p = model.predict(&data.inputs[i], routing)?;
        l2_relative_error(&p, &data.targets[i])
    });
    let mut s = 0.0;
    for e in errs {
        s += e?;
    }
    Ok(s / data.len() as f64)
}

fn frozen_mask(model: &dyn Parameters, freeze_base: bool) -> Vec<bool> {
    let mut mask = Vec::new();
    model.visit("", &mut |name, _, p| {
        let frozen = freeze_base
            && (name.ends_with("spectral.weights") || name.ends_with("spectral.base.weights"));
        let n = match p {
            crate::nn::ParamRef::Real(v) => v.len(),
            crate::nn::ParamRef::Complex(v) => 2 * v.len(),
        };
        mask.extend(std::iter::repeat_n(frozen, n));
    });
    mask
}

fn check_compatible<K: SpectralKernel>(
    model: &Network<K>,
    data: &PdeDataset,
    what: &str,
) -> Result<()> {
    let x = data
        .inputs
        .first()
        .ok_or_else(|| Error::Data(format!("{what} set is empty")))?;
    let (c, s, _) = x.dims3()?;
    if c != model.config.in_channels {
        return Err(Error::Data(format!(
            "{what} samples have {c} channels, the model expects {}",
            model.config.in_channels
        )));
    }
    for l in &model.layers {
        l.spectral.check_grid(s).map_err(|e| {
            Error::Data(format!("{what} grid {s}x{s} does not suit the model: {e}"))
        })?;
    }
    Ok(())
}

/// Trains `model` in place. Metrics are written as JSON lines to `log`.
pub fn fit<K: SpectralKernel>(
    model: &mut Network<K>,
    train: &PdeDataset,
    val: Option<&PdeDataset>,
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(model, train, "training")?;
    if let Some(v) = val {
        check_compatible(model, v, "validation")?;
    }
    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mask = frozen_mask(model, cfg.freeze_base);
    let mut params = flatten(model);
    let mut adam = Adam::new(params.len(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut shuffle = rng::stream(cfg.seed, rng::SHUFFLE);
    let bands = model
        .layers
        .first()
        .map(|l| l.spectral.gate_bands())
        .unwrap_or_default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut report = TrainReport {
        epochs: Vec::new(),
        steps: 0,
        final_val_l2re: None,
    };
    for epoch in 0..cfg.total_epochs() {
        order.shuffle(&mut shuffle);
        let (mut task, mut sparsity) = (0.0, 0.0);
        let mut band_sum = vec![0.0; bands.len()];
        let mut gate_samples = 0usize;
        let mut clipped_steps = 0;
        let mut lr = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let frac_epoch = epoch as f64 + b as f64 / steps_per_epoch as f64;
            lr = lr_at(step, frac_epoch, cfg);
            let masked = step < cfg.burn_in_masked;
            let routing = if masked {
                Routing::Masked
            } else {
                Routing::Train
            };
            let xs: Vec<&Tensor> = batch.iter().map(|&i| &train.inputs[i]).collect();
            let ys: Vec<&Tensor> = batch.iter().map(|&i| &train.targets[i]).collect();
            let mut bg = batch_gradient(model, &xs, &ys, routing, cfg.sparsity_weight)?;
            finite_or("training loss", bg.loss.total)?;
            for (g, &frozen) in bg.grad.iter_mut().zip(&mask) {
                if frozen {
                    *g = 0.0;
                }
            }
            let norm = bg.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            let clipped = matches!(cfg.grad_clip, Some(c) if norm > c);
            if let (true, Some(c)) = (clipped, cfg.grad_clip) {
                let s = c / norm;
                bg.grad.iter_mut().for_each(|g| *g *= s);
                clipped_steps += 1;
            }
            adam.update(&mut params, &bg.grad, lr)?;
            load_flat(model, &params);

            let w = batch.len() as f64 / n as f64;
            task += bg.loss.task * w;
            sparsity += bg.loss.sparsity * w;
            if !bg.mean_gates.is_empty() && bg.mean_gates.iter().all(|g| g.len() == bands.len()) {
                for layer in &bg.mean_gates {
                    for (s, g) in band_sum.iter_mut().zip(layer) {
                        *s += g * batch.len() as f64 / bg.mean_gates.len() as f64;
                    }
                }
                gate_samples += batch.len();
            }
            if cfg.log_steps {
                if let Some(out) = log.as_deref_mut() {
                    let m = StepMetrics {
                        step,
                        epoch: frac_epoch,
                        lr,
                        task: bg.loss.task,
                        sparsity: bg.loss.sparsity,
                        total: bg.loss.total,
                        grad_norm: norm,
                        clipped,
                        masked,
                    };
                    writeln!(out, "{}", serde_json::to_string(&m)?)?;
                }
            }
            step += 1;
        }
        let val_l2re = match val {
            Some(v) => Some(evaluate(model, v, model.inference_routing())?),
            None => None,
        };
        let gate_by_band: Vec<(BandId, f64)> = if gate_samples > 0 {
            bands
                .iter()
                .zip(&band_sum)
                .map(|(&b, &s)| (b, s / gate_samples as f64))
                .collect()
        } else {
            Vec::new()
        };
        let mean_gate = if gate_by_band.is_empty() {
            None
        } else {
            Some(gate_by_band.iter().map(|(_, g)| g).sum::<f64>() / gate_by_band.len() as f64)
        };
        let m = EpochMetrics {
            epoch,
            steps: step,
            lr,
            train_task: task,
            train_sparsity: sparsity,
            train_total: total_loss(task, sparsity, cfg.sparsity_weight).total,
            val_l2re,
            mean_gate,
            gate_by_band,
            clipped_steps,
        };
        if let Some(out) = log.as_deref_mut() {
            writeln!(out, "{}", serde_json::to_string(&m)?)?;
        }
        report.epochs.push(m);
    }
    report.steps = step;
    report.final_val_l2re = report.epochs.last().and_then(|m| m.val_l2re);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Fno, FnoConfig};
    use crate::pde::{generate_dataset, PdeDatasetMeta};

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(25, 0.0, &cfg), 0.5e-3);
        assert_eq!(lr_at(0, 0.0, &cfg), 0.0);
        assert_eq!(lr_at(500, 70.0, &cfg), 5e-5);
        assert_eq!(lr_at(900, 85.0, &cfg), 5e-5);
        assert!((lr_at(100, 35.0, &cfg) - (5e-5 + 0.5 * (1e-3 - 5e-5))).abs() < 1e-18);
        // Continuity at both boundaries.
        let e = 1e-9;
        assert!((lr_at(49, 0.3, &cfg) - lr_at(50, 0.3, &cfg)).abs() < 1e-3 / 50.0 + 1e-12);
        assert!((lr_at(600, 70.0 - e, &cfg) - lr_at(600, 70.0, &cfg)).abs() < 1e-12);
    }

    #[test]
    fn adam_examples() {
        let mut a = Adam::new(1, 0.9, 0.99, 1e-8);
        let mut p = [1.0];
        a.update(&mut p, &[1.0], 1e-3).unwrap();
        assert!((p[0] - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-16);

        let mut a = Adam::new(2, 0.9, 0.99, 1e-8);
        let mut p = [0.5, -2.0];
        a.update(&mut p, &[0.3, 0.1], 1e-2).unwrap();
        let (m, v) = (a.m.clone(), a.v.clone());
        a.update(&mut p, &[0.0, 0.0], 1e-2).unwrap();
        assert_eq!(a.m, vec![m[0] * 0.9, m[1] * 0.9]);
        assert_eq!(a.v, vec![v[0] * 0.99, v[1] * 0.99]);

        let mut fresh = Adam::new(1, 0.9, 0.99, 1e-8);
        let mut q = [3.0];
        fresh.update(&mut q, &[0.0], 1e-2).unwrap();
        assert_eq!(q, [3.0]);
        assert!(matches!(
            fresh.update(&mut q, &[f64::NAN], 1e-2),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn l2re_examples() {
        let t = Tensor::from_vec(&[1, 2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(l2_relative_error(&t, &t).unwrap(), 0.0);
        assert_eq!(
            l2_relative_error(&Tensor::zeros(&[1, 2, 2]), &t).unwrap(),
            1.0
        );
        let mut p = t.clone();
        p.scale(1.1);
        assert!((l2_relative_error(&p, &t).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(
            l2_relative_error(&t, &Tensor::zeros(&[1, 2, 2])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn loss_composition() {
        assert_eq!(total_loss(0.3, 7.0, 0.0).total, 0.3);
        assert!((total_loss(0.2, 10.0, 0.01).total - 0.3).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                min_lr_ratio: 0.0,
                ..Default::default()
            },
            TrainConfig {
                min_lr_ratio: 1.5,
                ..Default::default()
            },
            TrainConfig {
                sparsity_weight: -1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert_eq!(TrainConfig::default().total_epochs(), 100);
    }

    fn tiny_setup() -> (Fno, PdeDataset) {
        let meta = PdeDatasetMeta {
            trajectory_len: 4,
            ..PdeDatasetMeta::heat(16, 16, 3)
        };
        let data = generate_dataset(&meta).unwrap();
        let cfg = FnoConfig {
            width: 4,
            layers: 2,
            modes: (3, 3),
            grid_size: 16,
            ..FnoConfig::default()
        };
        (Fno::new(cfg, 1).unwrap(), data)
    }

    #[test]
    fn fit_is_deterministic_and_learns() {
        let (model, data) = tiny_setup();
        let (tr, va) = data.split();
        let (train, val) = (data.subset(&tr), data.subset(&va));
        let cfg = TrainConfig {
            batch_size: 4,
            lr: 1e-2,
            warmup_steps: 2,
            cosine_epochs: 8,
            steady_epochs: 2,
            ..Default::default()
        };
        let before = evaluate(&model, &val, Routing::Train).unwrap();
        let mut a = model.clone();
        let mut log = Vec::new();
        let ra = fit(&mut a, &train, Some(&val), &cfg, Some(&mut log)).unwrap();
        let mut b = model.clone();
        let rb = fit(&mut b, &train, Some(&val), &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.final_val_l2re.unwrap() < before);
        let lines = String::from_utf8(log).unwrap();
        assert_eq!(lines.lines().count(), 10);
        for m in &ra.epochs {
            assert_eq!(
                m.train_total,
                m.train_task + cfg.sparsity_weight * m.train_sparsity
            );
            assert!(m.mean_gate.is_none());
        }
    }

    #[test]
    fn frozen_base_is_untouched() {
        let (model, data) = tiny_setup();
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: Some(1),
            freeze_base: true,
            warmup_steps: 0,
            ..Default::default()
        };
        let mut m = model.clone();
        fit(&mut m, &data, None, &cfg, None).unwrap();
        for (a, b) in m.layers.iter().zip(&model.layers) {
            assert_eq!(a.spectral, b.spectral);
            assert_ne!(a.pointwise, b.pointwise);
        }
    }

    #[test]
    fn incompatible_data_is_rejected() {
        let (model, _) = tiny_setup();
        let meta = PdeDatasetMeta {
            trajectory_len: 1,
            ..PdeDatasetMeta::heat(16, 2, 0)
        };
        let mut d = generate_dataset(&meta).unwrap();
        d.inputs = vec![Tensor::zeros(&[1, 4, 4]); 2];
        let mut m = model;
        assert!(matches!(
            fit(&mut m, &d, None, &TrainConfig::default(), None),
            Err(Error::Data(_))
        ));
    }
}
