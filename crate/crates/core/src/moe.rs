//! Frequency-band mixture of experts.
//!
//! The retained spectrum is split into the bands of a [`BandLayout`]. The
//! base band `(0,0)` is always processed by the shared weights `R`. Every
//! other band may own an expert whose weights are `R + α·A·B` (a low-rank
//! correction of the shared weights, applied at the band-local mode
//! positions) and a sigmoid gate `σ(⟨w, f⟩/τ)` computed from the band's
//! per-channel mean coefficient magnitude `f`.
//!
//! In training every expert is active and scaled by its gate. At inference
//! only the `K` experts with the largest gates run; the rest of the spectrum
//! is zero.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::nn::{
    backbone_flops, join, mix_modes, mix_modes_backward, FlopCount, FnoConfig, Network, ParamMut,
    ParamRef, Parameters, Routing, SpectralKernel, SpectralWeights,
};
use crate::spectral::{
    check_field, extract_band, forward_rfft2, forward_rfft2_adjoint, inverse_rfft2,
    inverse_rfft2_adjoint, scatter_band, BandBlock, BandId, BandLayout, SpectrumGrid,
};
use crate::tensor::Tensor;

const C0: Complex64 = Complex64::new(0.0, 0.0);

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-channel mean magnitude of a band's coefficients over both corner
/// blocks.
pub fn band_features(block: &BandBlock) -> Vec<f64> {
    let per = 2 * block.chunk_modes.0 * block.chunk_modes.1;
    block
        .values
        .chunks(per)
        .map(|c| c.iter().map(|v| v.norm()).sum::<f64>() / per as f64)
        .collect()
}

/// Gate vectors for the expert bands of one layer, one row of `width`
/// weights per expert.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub width: usize,
    pub weights: Vec<f64>,
    pub temperature: f64,
}

impl GateParams {
    /// Zero gate vectors: every gate starts at exactly 0.5.
    pub fn new(experts: usize, width: usize, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return config_err(format!(
                "gate temperature must be positive, got {temperature}"
            ));
        }
        Ok(GateParams {
            width,
            weights: vec![0.0; experts * width],
            temperature,
        })
    }

    pub fn experts(&self) -> usize {
        self.weights.len() / self.width
    }

    pub fn row(&self, expert: usize) -> &[f64] {
        &self.weights[expert * self.width..(expert + 1) * self.width]
    }

    pub fn logit(&self, expert: usize, features: &[f64]) -> f64 {
        self.row(expert)
            .iter()
            .zip(features)
            .map(|(w, f)| w * f)
            .sum::<f64>()
            / self.temperature
    }
}

/// Gate value `σ(⟨w, f⟩/τ)` of one expert.
pub fn gate_forward(features: &[f64], gates: &GateParams, expert: usize) -> f64 {
    sigmoid(gates.logit(expert, features))
}

/// Low-rank factors of one expert: `ΔR[b,o,i,m] = α Σ_k B[b,o,k,m] A[b,k,i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub band: BandId,
    pub width: usize,
    pub rank: usize,
    pub chunk_modes: (usize, usize),
    pub alpha: f64,
    /// `(2, rank, width)`.
    pub a: Vec<Complex64>,
    /// `(2, width, rank, P1, P2)`.
    pub b: Vec<Complex64>,
}

impl ExpertParams {
    pub fn zeros(
        band: BandId,
        width: usize,
        rank: usize,
        chunk_modes: (usize, usize),
        alpha: f64,
    ) -> Result<Self> {
        if rank == 0 || 2 * rank > width {
            return config_err(format!(
                "LoRA rank must satisfy 1 <= r <= H/2, got r={rank}, H={width}"
            ));
        }
        Ok(ExpertParams {
            band,
            width,
            rank,
            chunk_modes,
            alpha,
            a: vec![C0; 2 * rank * width],
            b: vec![C0; 2 * width * rank * chunk_modes.0 * chunk_modes.1],
        })
    }

    /// `A` complex Gaussian with `E|A|² = 1/r`, `B = 0`.
    pub fn init_lora(&mut self, rng: &mut impl Rng) {
        let sd = (0.5 / self.rank as f64).sqrt();
        for v in self.a.iter_mut() {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            *v = Complex64::new(sd * re, sd * im);
        }
        self.b.fill(C0);
    }

    fn plane(&self) -> usize {
        self.chunk_modes.0 * self.chunk_modes.1
    }

    #[inline]
    pub fn a_index(&self, block: usize, k: usize, i: usize) -> usize {
        (block * self.rank + k) * self.width + i
    }

    #[inline]
    pub fn b_index(&self, block: usize, o: usize, k: usize) -> usize {
        ((block * self.width + o) * self.rank + k) * self.plane()
    }

    /// Real adaptation parameters, `2 blocks · 2 · r·H·(1 + P1·P2)`.
    pub fn real_param_count(&self) -> usize {
        2 * (self.a.len() + self.b.len())
    }

    fn zeros_like(&self) -> Self {
        ExpertParams {
            a: vec![C0; self.a.len()],
            b: vec![C0; self.b.len()],
            ..self.clone()
        }
    }
}

/// Dense weights `R + α·A·B` of one expert.
pub fn materialize_expert(base: &SpectralWeights, e: &ExpertParams) -> Result<SpectralWeights> {
    if base.in_channels != e.width || base.out_channels != e.width || base.modes != e.chunk_modes {
        return shape_err(format!(
            "expert (H={}, chunk {:?}) does not match base weights (H={}x{}, modes {:?})",
            e.width, e.chunk_modes, base.out_channels, base.in_channels, base.modes
        ));
    }
    let mut out = base.clone();
    let plane = e.plane();
    for blk in 0..2 {
        for o in 0..e.width {
            for i in 0..e.width {
                for m in 0..plane {
                    let mut acc = C0;
                    for k in 0..e.rank {
                        acc += e.b[e.b_index(blk, o, k) + m] * e.a[e.a_index(blk, k, i)];
                    }
                    let idx = base.index(blk, o, i, 0, 0) + m;
                    out.data[idx] += acc * e.alpha;
                }
            }
        }
    }
    Ok(out)
}

/// Expert output on one band: `R z + α B (A z)`. `u` receives `A z`,
/// laid out `(2, r, P1·P2)`.
fn expert_apply(
    base: &SpectralWeights,
    e: &ExpertParams,
    z: &[Complex64],
    out: &mut [Complex64],
    u: &mut [Complex64],
) {
    mix_modes(base, z, out);
    let plane = e.plane();
    let h = e.width;
    u.fill(C0);
    for blk in 0..2 {
        for k in 0..e.rank {
            let uk = &mut u[(blk * e.rank + k) * plane..][..plane];
            for i in 0..h {
                let a = e.a[e.a_index(blk, k, i)];
                let zi = &z[(i * 2 + blk) * plane..][..plane];
                for m in 0..plane {
                    uk[m] += a * zi[m];
                }
            }
        }
        for o in 0..h {
            let dst = &mut out[(o * 2 + blk) * plane..][..plane];
            for m in 0..plane {
                let mut acc = C0;
                for k in 0..e.rank {
                    acc += e.b[e.b_index(blk, o, k) + m] * u[(blk * e.rank + k) * plane + m];
                }
                dst[m] += acc * e.alpha;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn expert_backward(
    base: &SpectralWeights,
    e: &ExpertParams,
    z: &[Complex64],
    u: &[Complex64],
    gout: &[Complex64],
    gbase: &mut SpectralWeights,
    ge: &mut ExpertParams,
    gz: &mut [Complex64],
) {
    mix_modes_backward(base, z, gout, gbase, gz);
    let plane = e.plane();
    let h = e.width;
    let mut gu = vec![C0; 2 * e.rank * plane];
    for blk in 0..2 {
        for o in 0..h {
            let go = &gout[(o * 2 + blk) * plane..][..plane];
            for k in 0..e.rank {
                let bi = e.b_index(blk, o, k);
                let uk = &u[(blk * e.rank + k) * plane..][..plane];
                let guk = &mut gu[(blk * e.rank + k) * plane..][..plane];
                for m in 0..plane {
                    let gv = go[m] * e.alpha;
                    ge.b[bi + m] += gv * uk[m].conj();
                    guk[m] += e.b[bi + m].conj() * gv;
                }
            }
        }
        for k in 0..e.rank {
            let guk = &gu[(blk * e.rank + k) * plane..][..plane];
            for i in 0..h {
                let ai = e.a_index(blk, k, i);
                let zi = &z[(i * 2 + blk) * plane..][..plane];
                let mut acc = C0;
                for m in 0..plane {
                    acc += guk[m] * zi[m].conj();
                }
                ge.a[ai] += acc;
                let a_conj = e.a[ai].conj();
                let gzi = &mut gz[(i * 2 + blk) * plane..][..plane];
                for m in 0..plane {
                    gzi[m] += a_conj * guk[m];
                }
            }
        }
    }
}

/// Indices of the `k` largest gates, ties broken by ascending index (the
/// experts of a layer are stored in row-major band order).
pub fn top_k_experts(gates: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > gates.len() {
        return config_err(format!(
            "top-K of {k} exceeds the {} available experts",
            gates.len()
        ));
    }
    let mut order: Vec<usize> = (0..gates.len()).collect();
    order.sort_by(|&a, &b| gates[b].total_cmp(&gates[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// `E[Σᵢ gᵢ]`: mean over the batch of each sample's summed gate values.
/// Each entry of `gates` holds one sample's gates.
pub fn sparsity_loss(gates: &[Vec<f64>]) -> f64 {
    if gates.is_empty() {
        return 0.0;
    }
    gates.iter().map(|g| g.iter().sum::<f64>()).sum::<f64>() / gates.len() as f64
}

/// One spectral layer of a FreqMoE network.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqMoeLayer {
    pub base: SpectralWeights,
    /// Sorted by band in row-major order.
    pub experts: Vec<ExpertParams>,
    pub gates: GateParams,
    pub layout: BandLayout,
    /// Default number of experts activated at inference.
    pub top_k: usize,
}

impl FreqMoeLayer {
    pub fn new(
        base: SpectralWeights,
        experts: Vec<ExpertParams>,
        gates: GateParams,
        layout: BandLayout,
        top_k: usize,
    ) -> Result<Self> {
        if base.modes != layout.chunk_modes || base.in_channels != base.out_channels {
            return shape_err(format!(
                "base weights (modes {:?}, {}x{}) must be square with modes equal to the chunk size {:?}",
                base.modes, base.out_channels, base.in_channels, layout.chunk_modes
            ));
        }
        if experts.len() > layout.expert_band_count() {
            return config_err(format!(
                "{} experts exceed the {} expert bands of the layout",
                experts.len(),
                layout.expert_band_count()
            ));
        }
        for pair in experts.windows(2) {
            if pair[0].band >= pair[1].band {
                return config_err("experts must be sorted by band with no duplicates");
            }
        }
        for e in &experts {
            layout.check_band(e.band)?;
            if e.band.is_base() {
                return config_err("the base band cannot hold an expert");
            }
            if e.width != base.in_channels || e.chunk_modes != layout.chunk_modes {
                return shape_err(format!("expert {} does not match the layer shape", e.band));
            }
        }
        if gates.experts() != experts.len() || gates.width != base.in_channels {
            return shape_err(format!(
                "gate matrix {}x{} does not match {} experts of width {}",
                gates.experts(),
                gates.width,
                experts.len(),
                base.in_channels
            ));
        }
        if top_k > experts.len() {
            return config_err(format!("top_k {top_k} exceeds {} experts", experts.len()));
        }
        Ok(FreqMoeLayer {
            base,
            experts,
            gates,
            layout,
            top_k,
        })
    }

    pub fn width(&self) -> usize {
        self.base.in_channels
    }

    pub fn expert_bands(&self) -> Vec<BandId> {
        self.experts.iter().map(|e| e.band).collect()
    }

    /// Gate values of every expert for a given input spectrum.
    pub fn gate_values_for(&self, zhat: &SpectrumGrid) -> Result<Vec<f64>> {
        self.experts
            .iter()
            .enumerate()
            .map(|(j, e)| {
                let block = extract_band(zhat, e.band, &self.layout)?;
                Ok(gate_forward(&band_features(&block), &self.gates, j))
            })
            .collect()
    }
}

/// Forward record of one [`FreqMoeLayer`] call.
pub struct MoeTape {
    size: usize,
    routing: Routing,
    base_in: Vec<Complex64>,
    band_in: Vec<BandBlock>,
    features: Vec<Vec<f64>>,
    gates: Vec<f64>,
    active: Vec<usize>,
    /// Pre-gate expert outputs and low-rank intermediates, per active expert.
    expert_out: Vec<Option<(Vec<Complex64>, Vec<Complex64>)>>,
}

impl MoeTape {
    pub fn active_experts(&self) -> &[usize] {
        &self.active
    }

    pub fn routing(&self) -> Routing {
        self.routing
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }
}

impl SpectralKernel for FreqMoeLayer {
    type Tape = MoeTape;

    fn in_channels(&self) -> usize {
        self.base.in_channels
    }

    fn out_channels(&self) -> usize {
        self.base.out_channels
    }

    fn check_grid(&self, size: usize) -> Result<()> {
        self.layout.check_fits(size)
    }

    fn forward(&self, z: &Tensor, routing: Routing) -> Result<(Tensor, MoeTape)> {
        let s = check_field(z, self.width())?;
        self.layout.check_fits(s)?;
        let h = self.width();
        let zhat = forward_rfft2(z)?;
        let mut out = SpectrumGrid::zeros(h, s);

        let zb = extract_band(&zhat, BandId::BASE, &self.layout)?;
        let mut ob = BandBlock::zeros(BandId::BASE, h, self.layout.chunk_modes);
        mix_modes(&self.base, &zb.values, &mut ob.values);
        scatter_band(&ob, &mut out, &self.layout)?;

        let mut band_in = Vec::with_capacity(self.experts.len());
        let mut features = Vec::with_capacity(self.experts.len());
        let mut gates = Vec::with_capacity(self.experts.len());
        for (j, e) in self.experts.iter().enumerate() {
            let block = extract_band(&zhat, e.band, &self.layout)?;
            let f = band_features(&block);
            gates.push(gate_forward(&f, &self.gates, j));
            features.push(f);
            band_in.push(block);
        }
        let active = match routing {
            Routing::Train => (0..self.experts.len()).collect(),
            Routing::Masked => Vec::new(),
            Routing::TopK(k) => top_k_experts(&gates, k)?,
        };
        let mut expert_out = vec![None; self.experts.len()];
        let plane = self.layout.modes_per_band();
        for &j in &active {
            let e = &self.experts[j];
            let mut eo = BandBlock::zeros(e.band, h, self.layout.chunk_modes);
            let mut u = vec![C0; 2 * e.rank * plane];
            expert_apply(&self.base, e, &band_in[j].values, &mut eo.values, &mut u);
            let pre = eo.values.clone();
            for v in eo.values.iter_mut() {
                *v *= gates[j];
            }
            scatter_band(&eo, &mut out, &self.layout)?;
            expert_out[j] = Some((pre, u));
        }
        Ok((
            inverse_rfft2(&out),
            MoeTape {
                size: s,
                routing,
                base_in: zb.values,
                band_in,
                features,
                gates,
                active,
                expert_out,
            },
        ))
    }

    fn backward(
        &self,
        tape: &MoeTape,
        grad_out: &Tensor,
        grad_gates: &[f64],
        grads: &mut Self,
    ) -> Result<Tensor> {
        if let Routing::TopK(_) = tape.routing {
            return config_err("backward through an inference (top-K) tape is not defined");
        }
        let h = self.width();
        let chunk = self.layout.chunk_modes;
        let gspec = inverse_rfft2_adjoint(grad_out);
        let mut gz = SpectrumGrid::zeros(h, tape.size);

        let gob = extract_band(&gspec, BandId::BASE, &self.layout)?;
        let mut gzb = BandBlock::zeros(BandId::BASE, h, chunk);
        mix_modes_backward(
            &self.base,
            &tape.base_in,
            &gob.values,
            &mut grads.base,
            &mut gzb.values,
        );
        scatter_band(&gzb, &mut gz, &self.layout)?;

        let gated = tape.routing == Routing::Train;
        let tau = self.gates.temperature;
        for (j, e) in self.experts.iter().enumerate() {
            let zin = &tape.band_in[j];
            let mut gzj = BandBlock::zeros(e.band, h, chunk);
            let mut dgate = 0.0;
            if let Some((pre, u)) = &tape.expert_out[j] {
                let go = extract_band(&gspec, e.band, &self.layout)?;
                let g = tape.gates[j];
                dgate = go
                    .values
                    .iter()
                    .zip(pre)
                    .map(|(a, b)| (a.conj() * b).re)
                    .sum();
                let ge: Vec<Complex64> = go.values.iter().map(|v| v * g).collect();
                expert_backward(
                    &self.base,
                    e,
                    &zin.values,
                    u,
                    &ge,
                    &mut grads.base,
                    &mut grads.experts[j],
                    &mut gzj.values,
                );
            }
            if gated {
                dgate += grad_gates.get(j).copied().unwrap_or(0.0);
            }
            if gated && dgate != 0.0 {
                let g = tape.gates[j];
                let dlogit = dgate * g * (1.0 - g) / tau;
                let f = &tape.features[j];
                let w = self.gates.row(j);
                let gw = &mut grads.gates.weights[j * h..(j + 1) * h];
                let per = (2 * chunk.0 * chunk.1) as f64;
                let block_len = 2 * chunk.0 * chunk.1;
                for c in 0..h {
                    gw[c] += dlogit * f[c];
                    let gf = dlogit * w[c] / per;
                    if gf == 0.0 {
                        continue;
                    }
                    for m in c * block_len..(c + 1) * block_len {
                        let v = zin.values[m];
                        let mag = v.norm();
                        if mag > 0.0 {
                            gzj.values[m] += v * (gf / mag);
                        }
                    }
                }
            }
            scatter_band(&gzj, &mut gz, &self.layout)?;
        }
        Ok(forward_rfft2_adjoint(&gz))
    }

    fn gate_values(tape: &MoeTape) -> &[f64] {
        match tape.routing {
            Routing::Masked => &[],
            _ => &tape.gates,
        }
    }

    fn zeros_like(&self) -> Self {
        FreqMoeLayer {
            base: self.base.zeros_like(),
            experts: self.experts.iter().map(ExpertParams::zeros_like).collect(),
            gates: GateParams {
                weights: vec![0.0; self.gates.weights.len()],
                ..self.gates.clone()
            },
            layout: self.layout,
            top_k: self.top_k,
        }
    }

    fn inference_routing(&self) -> Routing {
        Routing::TopK(self.top_k)
    }

    fn gate_bands(&self) -> Vec<BandId> {
        self.expert_bands()
    }
}

impl Parameters for FreqMoeLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], ParamRef<'_>)) {
        self.base.visit(&join(prefix, "base"), f);
        for e in &self.experts {
            let p = join(prefix, &format!("experts.{}_{}", e.band.0, e.band.1));
            f(
                &join(&p, "a"),
                &[2, e.rank, e.width],
                ParamRef::Complex(&e.a),
            );
            f(
                &join(&p, "b"),
                &[2, e.width, e.rank, e.chunk_modes.0, e.chunk_modes.1],
                ParamRef::Complex(&e.b),
            );
        }
        f(
            &join(prefix, "gates.w"),
            &[self.gates.experts(), self.gates.width],
            ParamRef::Real(&self.gates.weights),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.base.visit_mut(&join(prefix, "base"), f);
        for e in self.experts.iter_mut() {
            let p = join(prefix, &format!("experts.{}_{}", e.band.0, e.band.1));
            f(&join(&p, "a"), ParamMut::Complex(&mut e.a));
            f(&join(&p, "b"), ParamMut::Complex(&mut e.b));
        }
        f(
            &join(prefix, "gates.w"),
            ParamMut::Real(&mut self.gates.weights),
        );
    }
}

/// A FreqMoE operator network.
pub type FreqMoe = Network<FreqMoeLayer>;

impl FreqMoe {
    pub fn layout(&self) -> BandLayout {
        self.layers[0].spectral.layout
    }

    pub fn expert_count(&self) -> usize {
        self.layers[0].spectral.experts.len()
    }

    pub fn default_top_k(&self) -> usize {
        self.layers[0].spectral.top_k
    }

    /// Closed-form parameter accounting with `k` experts active per layer.
    pub fn active_param_count(&self, k: usize) -> ParamCounts {
        let e = self.layers[0].spectral.experts.first();
        let per_expert = e.map(|e| e.real_param_count()).unwrap_or(0);
        let layers = self.layers.len();
        let h = self.config.width;
        let n = self.expert_count();
        ParamCounts {
            spectral_base: layers * 2 * self.layers[0].spectral.base.data.len(),
            experts: layers * k.min(n) * per_expert,
            gates: layers * n * h,
            pointwise: layers * (h * h + h),
            lift_project: self.lift.weight.len()
                + self.lift.bias.len()
                + self.project.weight.len()
                + self.project.bias.len(),
        }
    }
}

/// Breakdown of real parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCounts {
    pub spectral_base: usize,
    pub experts: usize,
    pub gates: usize,
    pub pointwise: usize,
    pub lift_project: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.spectral_base + self.experts + self.gates + self.pointwise + self.lift_project
    }

    pub fn spectral(&self) -> usize {
        self.spectral_base + self.experts
    }
}

/// Real LoRA parameters of one expert in one layer: both corner blocks,
/// `r·H` entries of `A` plus `H·r·P1·P2` entries of `B`, complex.
pub fn lora_param_count(width: usize, rank: usize, chunk: (usize, usize)) -> usize {
    2 * 2 * rank * width * (1 + chunk.0 * chunk.1)
}

/// Shape of a FreqMoE model for closed-form accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeShape {
    pub width: usize,
    pub layers: usize,
    pub layout: BandLayout,
    pub experts: usize,
    pub rank: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl MoeShape {
    pub fn active_params(&self, k: usize) -> ParamCounts {
        let h = self.width;
        let (p1, p2) = self.layout.chunk_modes;
        ParamCounts {
            spectral_base: self.layers * 2 * 2 * h * h * p1 * p2,
            experts: self.layers
                * k.min(self.experts)
                * lora_param_count(h, self.rank, self.layout.chunk_modes),
            gates: self.layers * self.experts * h,
            pointwise: self.layers * (h * h + h),
            lift_project: self.in_channels * h + h + h * self.out_channels + self.out_channels,
        }
    }

    /// Per-sample forward cost with `k` active experts on an `S x S` grid.
    ///
    /// Expert path: each active expert costs `R z` plus the two low-rank
    /// products. Gating: the router sweeps every band of the layout
    /// (magnitudes, channel means, dot product, sigmoid), so the charge is
    /// uniform over all `J1·J2` bands.
    pub fn flops(&self, k: usize, size: usize) -> FlopCount {
        let config = FnoConfig {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            width: self.width,
            layers: self.layers,
            modes: self.layout.chunk_modes,
            grid_size: size,
        };
        let mut f = backbone_flops(&config, size);
        let l = self.layers as u64;
        f.spectral =
            l * (self.base_band_flops() + k.min(self.experts) as u64 * self.expert_flops());
        f.gating = l * self.layout.band_count() as u64 * self.gate_flops_per_band();
        f
    }

    pub fn base_band_flops(&self) -> u64 {
        let (p1, p2) = self.layout.chunk_modes;
        8 * (2 * self.width * self.width * p1 * p2) as u64
    }

    pub fn expert_flops(&self) -> u64 {
        let (p1, p2) = self.layout.chunk_modes;
        let h = self.width;
        let macs = 2 * p1 * p2 * (h * h + 2 * self.rank * h);
        8 * macs as u64
    }

    /// `|z|` (4 flops) and accumulation per coefficient, channel mean, dot
    /// product with the gate vector, temperature and sigmoid.
    pub fn gate_flops_per_band(&self) -> u64 {
        let (p1, p2) = self.layout.chunk_modes;
        let h = self.width as u64;
        let coeffs = (2 * p1 * p2) as u64 * h;
        coeffs * 5 + h + 2 * h + 2
    }
}

/// Expert bands used when `n` experts are requested: bands ordered by
/// increasing frequency (squared chunk radius, then row-major).
pub fn default_expert_bands(layout: &BandLayout, n: usize) -> Result<Vec<BandId>> {
    if n > layout.expert_band_count() {
        return config_err(format!(
            "{n} experts requested but the {:?} layout has only {} expert bands",
            layout.grid_chunks,
            layout.expert_band_count()
        ));
    }
    let mut bands: Vec<BandId> = layout.bands().filter(|b| !b.is_base()).collect();
    bands.sort_by_key(|b| (b.0 * b.0 + b.1 * b.1, b.0, b.1));
    bands.truncate(n);
    bands.sort();
    Ok(bands)
}

/// Gate values and active set of one layer for one input, as exported to
/// JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub sample: usize,
    pub layer: usize,
    pub bands: Vec<BandId>,
    pub gates: Vec<f64>,
    pub active: Vec<BandId>,
}

/// Runs an inference pass and reports the gates and active experts of every
/// layer.
pub fn gate_records(
    model: &FreqMoe,
    x: &Tensor,
    k: usize,
    sample: usize,
) -> Result<Vec<GateRecord>> {
    let (_, tape) = model.forward(x, Routing::TopK(k))?;
    Ok(tape
        .spectral_tapes()
        .iter()
        .zip(&model.layers)
        .enumerate()
        .map(|(l, (t, layer))| {
            let bands = layer.spectral.expert_bands();
            GateRecord {
                sample,
                layer: l,
                active: t.active.iter().map(|&j| bands[j]).collect(),
                gates: t.gates.clone(),
                bands,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{spectral_conv, Fno};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn crandom(n: usize, rng: &mut ChaCha8Rng) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    /// Layer with random base, LoRA factors and gate vectors.
    fn random_layer(
        h: usize,
        chunk: (usize, usize),
        grid: (usize, usize),
        bands: &[BandId],
        rank: usize,
        seed: u64,
    ) -> FreqMoeLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = BandLayout::new(chunk, grid).unwrap();
        let mut base = SpectralWeights::zeros(h, h, chunk);
        base.data = crandom(base.data.len(), &mut rng);
        let experts = bands
            .iter()
            .map(|&b| {
                let mut e = ExpertParams::zeros(b, h, rank, chunk, 0.7).unwrap();
                e.a = crandom(e.a.len(), &mut rng);
                e.b = crandom(e.b.len(), &mut rng);
                e
            })
            .collect();
        let mut gates = GateParams::new(bands.len(), h, 1.3).unwrap();
        gates
            .weights
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-0.05..0.05));
        FreqMoeLayer::new(base, experts, gates, layout, bands.len().min(1)).unwrap()
    }

    #[test]
    fn band_feature_examples() {
        let mut block = BandBlock::zeros(BandId(1, 0), 3, (2, 2));
        assert_eq!(band_features(&block), vec![0.0; 3]);
        block.values[0] = Complex64::new(3.0, 4.0);
        assert_eq!(band_features(&block), vec![5.0 / 8.0, 0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        block.values = crandom(block.values.len(), &mut rng);
        let f = band_features(&block);
        for (c, fc) in f.iter().enumerate() {
            let mut s = 0.0;
            for b in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        let v = block.get(c, b, p, q);
                        s += (v.re * v.re + v.im * v.im).sqrt();
                    }
                }
            }
            assert!((fc - s / 8.0).abs() < 1e-15);
        }
        // Permuting modes within a channel leaves the features unchanged.
        let mut shuffled = block.clone();
        shuffled.values[..8].reverse();
        assert_eq!(band_features(&shuffled), f);
    }

    #[test]
    fn gate_examples() {
        let f = vec![2.0, -1.0, 0.5];
        let g = GateParams::new(1, 3, 0.8).unwrap();
        assert_eq!(gate_forward(&f, &g, 0), 0.5);
        let mut g = GateParams::new(1, 1, 0.8).unwrap();
        g.weights[0] = 0.4;
        // <w, f> = 0.8 = τ
        assert!((gate_forward(&[2.0], &g, 0) - 0.7310585786300049).abs() < 1e-15);
        let logit = g.logit(0, &[1.3]);
        let half_tau = GateParams {
            temperature: 0.4,
            ..g.clone()
        };
        assert_eq!(gate_forward(&[1.3], &half_tau, 0), sigmoid(2.0 * logit));
        assert!(GateParams::new(1, 1, 0.0).is_err());
        assert!(GateParams::new(1, 1, -1.0).is_err());
        for x in [-800.0, -30.0, 0.0, 30.0, 800.0] {
            let s = sigmoid(x);
            assert!((0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn materialize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, chunk) = (4, (2, 3));
        let mut base = SpectralWeights::zeros(h, h, chunk);
        base.data = crandom(base.data.len(), &mut rng);
        let mut e = ExpertParams::zeros(BandId(0, 1), h, 2, chunk, 1.5).unwrap();
        e.init_lora(&mut rng);
        assert_eq!(materialize_expert(&base, &e).unwrap(), base);
        e.b = crandom(e.b.len(), &mut rng);
        let zero_alpha = ExpertParams {
            alpha: 0.0,
            ..e.clone()
        };
        assert_eq!(materialize_expert(&base, &zero_alpha).unwrap(), base);

        // Rank one: ΔR per mode is α · v uᵀ.
        let mut e1 = ExpertParams::zeros(BandId(0, 1), h, 1, chunk, 0.5).unwrap();
        e1.a = crandom(e1.a.len(), &mut rng);
        e1.b = crandom(e1.b.len(), &mut rng);
        let m = materialize_expert(&base, &e1).unwrap();
        for blk in 0..2 {
            for o in 0..h {
                for i in 0..h {
                    for mm in 0..6 {
                        let v = e1.b[e1.b_index(blk, o, 0) + mm];
                        let u = e1.a[e1.a_index(blk, 0, i)];
                        let idx = base.index(blk, o, i, 0, 0) + mm;
                        let expect = base.data[idx] + v * u * 0.5;
                        assert!((m.data[idx] - expect).norm() < 1e-14);
                    }
                }
            }
        }
        let wrong = ExpertParams::zeros(BandId(0, 1), h, 1, (2, 2), 0.5).unwrap();
        assert!(materialize_expert(&base, &wrong).is_err());
        assert!(ExpertParams::zeros(BandId(0, 1), 4, 3, chunk, 1.0).is_err());
    }

    #[test]
    fn no_experts_equals_dense_spectral_conv() {
        let h = 3;
        let layer = random_layer(h, (2, 2), (3, 3), &[], 1, 4);
        let z = random(&[h, 16, 16], 5);
        let (out, _) = layer.forward(&z, Routing::Train).unwrap();
        assert_eq!(out, spectral_conv(&z, &layer.base).unwrap());
    }

    #[test]
    fn masked_equals_base_only() {
        let h = 2;
        let bands = [BandId(0, 1), BandId(1, 1), BandId(2, 0)];
        let layer = random_layer(h, (2, 2), (3, 3), &bands, 1, 6);
        let z = random(&[h, 16, 16], 7);
        let (masked, _) = layer.forward(&z, Routing::Masked).unwrap();
        assert_eq!(masked, spectral_conv(&z, &layer.base).unwrap());
        let (k0, _) = layer.forward(&z, Routing::TopK(0)).unwrap();
        assert_eq!(k0, masked);
    }

    #[test]
    fn train_forward_matches_band_by_band_oracle() {
        let h = 2;
        let bands = [BandId(0, 1), BandId(1, 0)];
        let layer = random_layer(h, (2, 2), (2, 2), &bands, 1, 8);
        let s = 16;
        let z = random(&[h, s, s], 9);
        let zhat = forward_rfft2(&z).unwrap();
        let mut expect = SpectrumGrid::zeros(h, s);
        // Base band through R.
        let block = extract_band(&zhat, BandId::BASE, &layer.layout).unwrap();
        let mut ob = BandBlock::zeros(BandId::BASE, h, (2, 2));
        for o in 0..h {
            for b in 0..2 {
                for p in 0..2 {
                    for q in 0..2 {
                        let mut acc = C0;
                        for i in 0..h {
                            acc += layer.base.data[layer.base.index(b, o, i, p, q)]
                                * block.get(i, b, p, q);
                        }
                        let k = ob.index(o, b, p, q);
                        ob.values[k] = acc;
                    }
                }
            }
        }
        scatter_band(&ob, &mut expect, &layer.layout).unwrap();
        // Expert bands through materialized weights, scaled by the gate.
        for (j, e) in layer.experts.iter().enumerate() {
            let w = materialize_expert(&layer.base, e).unwrap();
            let block = extract_band(&zhat, e.band, &layer.layout).unwrap();
            let g = gate_forward(&band_features(&block), &layer.gates, j);
            let mut ob = BandBlock::zeros(e.band, h, (2, 2));
            for o in 0..h {
                for b in 0..2 {
                    for p in 0..2 {
                        for q in 0..2 {
                            let mut acc = C0;
                            for i in 0..h {
                                acc += w.data[w.index(b, o, i, p, q)] * block.get(i, b, p, q);
                            }
                            let k = ob.index(o, b, p, q);
                            ob.values[k] = acc * g;
                        }
                    }
                }
            }
            scatter_band(&ob, &mut expect, &layer.layout).unwrap();
        }
        let expect = inverse_rfft2(&expect);
        let (got, _) = layer.forward(&z, Routing::Train).unwrap();
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn full_top_k_equals_training_forward() {
        let h = 2;
        let bands = [BandId(0, 1), BandId(1, 0), BandId(1, 1)];
        let layer = random_layer(h, (2, 2), (2, 2), &bands, 1, 10);
        let z = random(&[h, 16, 16], 11);
        let (train, _) = layer.forward(&z, Routing::Train).unwrap();
        let (infer, tape) = layer.forward(&z, Routing::TopK(3)).unwrap();
        assert_eq!(train, infer);
        assert_eq!(tape.active_experts().len(), 3);
        assert!(layer.forward(&z, Routing::TopK(4)).is_err());
    }

    #[test]
    fn top_k_crafted_logits() {
        let gates: Vec<f64> = [2.0, 1.0, 3.0, -1.0].iter().map(|&x| sigmoid(x)).collect();
        assert_eq!(top_k_experts(&gates, 2).unwrap(), vec![2, 0]);
        assert_eq!(top_k_experts(&[0.5, 0.5, 0.5], 2).unwrap(), vec![0, 1]);
        assert!(top_k_experts(&gates, 5).is_err());
    }

    #[test]
    fn sparsity_loss_examples() {
        assert_eq!(sparsity_loss(&[vec![0.5; 63]]), 31.5);
        assert!((sparsity_loss(&[vec![0.1, 0.2, 0.3]]) - 0.6).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<Vec<f64>> = (0..7)
            .map(|_| (0..5).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let rowsums: Vec<f64> = batch.iter().map(|r| r.iter().sum()).collect();
        let expect = rowsums.iter().sum::<f64>() / 7.0;
        assert!((sparsity_loss(&batch) - expect).abs() < 1e-14);
    }

    #[test]
    fn zero_b_means_zero_a_gradient() {
        let h = 2;
        let bands = [BandId(0, 1)];
        let mut layer = random_layer(h, (2, 2), (2, 2), &bands, 1, 12);
        layer.experts[0].b.fill(C0);
        let z = random(&[h, 8, 8], 13);
        let (_, tape) = layer.forward(&z, Routing::Train).unwrap();
        let mut grads = layer.zeros_like();
        layer
            .backward(&tape, &random(&[h, 8, 8], 14), &[], &mut grads)
            .unwrap();
        assert!(grads.experts[0].a.iter().all(|v| *v == C0));
        assert!(grads.experts[0].b.iter().any(|v| v.norm() > 0.0));

        let mut zero = layer.zeros_like();
        layer
            .backward(&tape, &Tensor::zeros(&[h, 8, 8]), &[], &mut zero)
            .unwrap();
        assert_eq!(zero, layer.zeros_like());
    }

    /// Central-difference check of every parameter, the input and the
    /// direct gate gradient for `L = <c, out> + Σ γ_j g_j`.
    #[test]
    fn layer_gradients_match_finite_differences() {
        let h = 4;
        let bands = [BandId(0, 1), BandId(1, 0), BandId(1, 1)];
        let layer = random_layer(h, (2, 2), (2, 2), &bands, 2, 17);
        let z = random(&[h, 16, 16], 18);
        let c = random(&[h, 16, 16], 19);
        let gamma = vec![0.3, -0.8, 0.5];
        let loss = |layer: &FreqMoeLayer, z: &Tensor| {
            let (out, tape) = layer.forward(z, Routing::Train).unwrap();
            out.dot(&c)
                + FreqMoeLayer::gate_values(&tape)
                    .iter()
                    .zip(&gamma)
                    .map(|(g, w)| g * w)
                    .sum::<f64>()
        };
        let (_, tape) = layer.forward(&z, Routing::Train).unwrap();
        let mut grads = layer.zeros_like();
        let gz = layer.backward(&tape, &c, &gamma, &mut grads).unwrap();

        let analytic = crate::nn::flatten(&grads);
        let theta = crate::nn::flatten(&layer);
        let eps = 1e-6;
        let mut probe = layer.clone();
        for (k, &g) in analytic.iter().enumerate() {
            let mut t = theta.clone();
            t[k] += eps;
            crate::nn::load_flat(&mut probe, &t);
            let lp = loss(&probe, &z);
            t[k] -= 2.0 * eps;
            crate::nn::load_flat(&mut probe, &t);
            let lm = loss(&probe, &z);
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (fd - g).abs() <= 1e-4 * fd.abs().max(1e-3),
                "param {k}: fd {fd} vs {g}"
            );
        }
        let mut zp = z.clone();
        for k in (0..z.len()).step_by(7) {
            zp.data_mut()[k] = z.data()[k] + eps;
            let lp = loss(&layer, &zp);
            zp.data_mut()[k] = z.data()[k] - eps;
            let lm = loss(&layer, &zp);
            zp.data_mut()[k] = z.data()[k];
            let fd = (lp - lm) / (2.0 * eps);
            let g = gz.data()[k];
            assert!(
                (fd - g).abs() <= 1e-4 * fd.abs().max(1e-3),
                "input {k}: fd {fd} vs {g}"
            );
        }
    }

    #[test]
    fn backward_refuses_inference_tape() {
        let layer = random_layer(2, (2, 2), (2, 2), &[BandId(1, 1)], 1, 15);
        let z = random(&[2, 8, 8], 16);
        let (_, tape) = layer.forward(&z, Routing::TopK(1)).unwrap();
        let mut g = layer.zeros_like();
        assert!(layer.backward(&tape, &z, &[], &mut g).is_err());
    }

    #[test]
    fn lora_counts() {
        assert_eq!(lora_param_count(32, 4, (4, 4)), 8704);
        let shape = MoeShape {
            width: 32,
            layers: 4,
            layout: BandLayout::new((4, 4), (8, 8)).unwrap(),
            experts: 63,
            rank: 4,
            in_channels: 1,
            out_channels: 1,
        };
        let c = shape.active_params(2);
        assert_eq!(c.spectral_base, 262_144);
        assert_eq!(c.experts, 69_632);
        assert_eq!(c.spectral(), 331_776);
        let c0 = shape.active_params(0);
        let dense = crate::nn::dense_param_count(&FnoConfig {
            width: 32,
            modes: (4, 4),
            ..FnoConfig::default()
        });
        assert_eq!(c0.total(), dense + c0.gates);
    }

    #[test]
    fn default_bands_are_lowest_frequency_first() {
        let layout = BandLayout::new((4, 4), (3, 3)).unwrap();
        assert_eq!(default_expert_bands(&layout, 8).unwrap().len(), 8);
        assert_eq!(
            default_expert_bands(&layout, 3).unwrap(),
            vec![BandId(0, 1), BandId(1, 0), BandId(1, 1)]
        );
        assert!(default_expert_bands(&layout, 9).is_err());
    }

    #[test]
    fn layer_construction_errors() {
        let layout = BandLayout::new((2, 2), (2, 2)).unwrap();
        let base = SpectralWeights::zeros(2, 2, (2, 2));
        let e = |b| ExpertParams::zeros(b, 2, 1, (2, 2), 1.0).unwrap();
        let g = |n| GateParams::new(n, 2, 1.0).unwrap();
        assert!(FreqMoeLayer::new(base.clone(), vec![e(BandId(0, 0))], g(1), layout, 0).is_err());
        assert!(FreqMoeLayer::new(base.clone(), vec![e(BandId(2, 0))], g(1), layout, 0).is_err());
        assert!(FreqMoeLayer::new(
            base.clone(),
            vec![e(BandId(1, 0)), e(BandId(0, 1))],
            g(2),
            layout,
            0
        )
        .is_err());
        assert!(FreqMoeLayer::new(base.clone(), vec![e(BandId(1, 0))], g(2), layout, 0).is_err());
        assert!(FreqMoeLayer::new(base.clone(), vec![e(BandId(1, 0))], g(1), layout, 2).is_err());
        assert!(FreqMoeLayer::new(base, vec![e(BandId(1, 0))], g(1), layout, 1).is_ok());
    }

    #[test]
    fn gate_records_report_active_bands() {
        let cfg = FnoConfig {
            width: 2,
            layers: 1,
            modes: (2, 2),
            grid_size: 16,
            ..FnoConfig::default()
        };
        let dense = Fno::new(cfg, 0).unwrap();
        let layer = random_layer(
            2,
            (2, 2),
            (2, 2),
            &[BandId(0, 1), BandId(1, 0), BandId(1, 1)],
            1,
            3,
        );
        let model = FreqMoe {
            config: cfg,
            lift: dense.lift.clone(),
            layers: vec![crate::nn::FourierLayer {
                spectral: layer,
                pointwise: dense.layers[0].pointwise.clone(),
            }],
            project: dense.project.clone(),
        };
        let recs = gate_records(&model, &random(&[1, 16, 16], 1), 2, 0).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].active.len(), 2);
        let json = serde_json::to_string(&recs).unwrap();
        let back: Vec<GateRecord> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, recs);
    }
}
