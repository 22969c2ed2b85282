//! Sparse upcycling: turning a pretrained dense FNO into a FreqMoE model.
//!
//! The pretrained spectral weights become the shared weights `R` of band
//! `(0,0)`; every expert starts as `R + α·A·0`, so the upcycled model with
//! its experts switched off reproduces the dense model exactly.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::moe::{
    default_expert_bands, materialize_expert, ExpertParams, FreqMoe, FreqMoeLayer, GateParams,
    ParamCounts,
};
use crate::nn::{Fno, FnoConfig, FourierLayer, Network, Routing};
use crate::rng;
use crate::spectral::{BandId, BandLayout};
use crate::tensor::Tensor;

/// How to upcycle a dense model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpcycleSpec {
    pub n_experts: usize,
    /// Explicit expert bands; when absent the `n_experts` lowest-frequency
    /// non-base bands are used.
    #[serde(default)]
    pub bands: Option<Vec<BandId>>,
    pub rank: usize,
    pub alpha: f64,
    pub layout: BandLayout,
    pub top_k: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Grid the upcycled model targets; defaults to the base model's.
    #[serde(default)]
    pub grid_size: Option<usize>,
}

impl UpcycleSpec {
    /// All non-base bands of `layout` as experts, rank 4, α = 1, top-2.
    pub fn full(layout: BandLayout, seed: u64) -> Self {
        UpcycleSpec {
            n_experts: layout.expert_band_count(),
            bands: None,
            rank: 4,
            alpha: 1.0,
            layout,
            top_k: 2,
            temperature: 1.0,
            seed,
            grid_size: None,
        }
    }

    pub fn expert_bands(&self) -> Result<Vec<BandId>> {
        match &self.bands {
            Some(b) => {
                if b.len() != self.n_experts {
                    return config_err(format!(
                        "{} bands listed for {} experts",
                        b.len(),
                        self.n_experts
                    ));
                }
                let mut b = b.clone();
                b.sort();
                Ok(b)
            }
            None => default_expert_bands(&self.layout, self.n_experts),
        }
    }
}

pub fn upcycle(base: &Fno, spec: &UpcycleSpec) -> Result<FreqMoe> {
    if base.config.modes != spec.layout.chunk_modes {
        return Err(Error::Architecture(format!(
            "base model retains {:?} modes but the layout chunk is {:?}; they must match",
            base.config.modes, spec.layout.chunk_modes
        )));
    }
    if spec.top_k > spec.n_experts {
        return config_err(format!(
            "top_k {} exceeds {} experts",
            spec.top_k, spec.n_experts
        ));
    }
    let grid_size = spec.grid_size.unwrap_or(base.config.grid_size);
    spec.layout.check_fits(grid_size)?;
    let bands = spec.expert_bands()?;
    let h = base.config.width;
    let mut rng = rng::stream(spec.seed, rng::UPCYCLE);
    let mut layers = Vec::with_capacity(base.layers.len());
    for layer in &base.layers {
        let mut experts = Vec::with_capacity(bands.len());
        for &band in &bands {
            let mut e =
                ExpertParams::zeros(band, h, spec.rank, spec.layout.chunk_modes, spec.alpha)?;
            e.init_lora(&mut rng);
            experts.push(e);
        }
        let gates = GateParams::new(bands.len(), h, spec.temperature)?;
        layers.push(FourierLayer {
            spectral: FreqMoeLayer::new(
                layer.spectral.clone(),
                experts,
                gates,
                spec.layout,
                spec.top_k,
            )?,
            pointwise: layer.pointwise.clone(),
        });
    }
    Ok(Network {
        config: FnoConfig {
            grid_size,
            ..base.config
        },
        lift: base.lift.clone(),
        layers,
        project: base.project.clone(),
    })
}

/// Outcome of [`verify_upcycle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpcycleReport {
    pub probe_inputs: usize,
    pub grid_size: usize,
    /// Largest `|base(x) − moe_masked(x)|` over the probe batch.
    pub max_deviation: f64,
    /// `‖ΔR‖_F` per layer and expert.
    pub delta_norms: Vec<Vec<f64>>,
    pub base_params: usize,
    pub total_params: usize,
    pub active: ParamCounts,
    pub top_k: usize,
}

impl UpcycleReport {
    pub fn max_delta_norm(&self) -> f64 {
        self.delta_norms
            .iter()
            .flatten()
            .fold(0.0, |a, &b| a.max(b))
    }
}

/// Deterministic random probe fields.
pub fn probe_inputs(channels: usize, size: usize, count: usize, seed: u64) -> Vec<Tensor> {
    use rand::Rng;
    let mut rng = rng::stream(seed, rng::PROBE);
    (0..count)
        .map(|_| {
            let data = (0..channels * size * size)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            Tensor::from_vec(&[channels, size, size], data).expect("probe shape")
        })
        .collect()
}

fn check_compatible(base: &Fno, moe: &FreqMoe) -> Result<()> {
    let (b, m) = (&base.config, &moe.config);
    let mismatch = |what: &str, x: String, y: String| {
        Err(Error::Architecture(format!(
            "{what} differs: base {x}, upcycled {y}"
        )))
    };
    if b.width != m.width {
        return mismatch("width", b.width.to_string(), m.width.to_string());
    }
    if b.layers != m.layers || base.layers.len() != moe.layers.len() {
        return mismatch("layer count", b.layers.to_string(), m.layers.to_string());
    }
    if (b.in_channels, b.out_channels) != (m.in_channels, m.out_channels) {
        return mismatch(
            "channels",
            format!("{}->{}", b.in_channels, b.out_channels),
            format!("{}->{}", m.in_channels, m.out_channels),
        );
    }
    if b.modes != moe.layout().chunk_modes {
        return mismatch(
            "base modes / chunk",
            format!("{:?}", b.modes),
            format!("{:?}", moe.layout().chunk_modes),
        );
    }
    Ok(())
}

/// Compares an upcycled model against its base on `probe` random inputs.
pub fn verify_upcycle(base: &Fno, moe: &FreqMoe, probe: usize, seed: u64) -> Result<UpcycleReport> {
    check_compatible(base, moe)?;
    let size = moe.config.grid_size;
    let mut max_deviation: f64 = 0.0;
    for x in probe_inputs(base.config.in_channels, size, probe, seed) {
        let yb = base.predict(&x, Routing::Masked)?;
        let ym = moe.predict(&x, Routing::Masked)?;
        for (a, b) in yb.data().iter().zip(ym.data()) {
            max_deviation = max_deviation.max((a - b).abs());
        }
    }
    let mut delta_norms = Vec::with_capacity(moe.layers.len());
    for layer in &moe.layers {
        let k = &layer.spectral;
        let norms = k
            .experts
            .iter()
            .map(|e| {
                let w = materialize_expert(&k.base, e)?;
                Ok(w.data
                    .iter()
                    .zip(&k.base.data)
                    .map(|(a, b)| (a - b).norm_sqr())
                    .sum::<f64>()
                    .sqrt())
            })
            .collect::<Result<Vec<f64>>>()?;
        delta_norms.push(norms);
    }
    let top_k = moe.default_top_k();
    Ok(UpcycleReport {
        probe_inputs: probe,
        grid_size: size,
        max_deviation,
        delta_norms,
        base_params: base.param_count(),
        total_params: moe.param_count(),
        active: moe.active_param_count(top_k),
        top_k,
    })
}
