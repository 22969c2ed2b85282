//! Dense Fourier neural operator: pointwise lifting, a stack of Fourier
//! layers `gelu(K(z) + W z + b)`, and a pointwise projection, with an
//! explicit reverse-mode tape per layer.
//!
//! The network is generic over the spectral operator so that the dense
//! kernel and the frequency mixture-of-experts layer share lifting,
//! residual, activation and projection code.

use std::cell::Cell;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::rng;
use crate::spectral::{
    check_field, extract_band, forward_rfft2, forward_rfft2_adjoint, inverse_rfft2,
    inverse_rfft2_adjoint, scatter_band, BandId, BandLayout, SpectrumGrid,
};
use crate::tensor::Tensor;

const C0: Complex64 = Complex64::new(0.0, 0.0);

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Complex multiply-adds executed by the spectral mixing kernels on this
/// thread since the last reset.
pub fn spectral_mac_count() -> u64 {
    MACS.with(|m| m.get())
}

pub fn reset_spectral_mac_count() {
    MACS.with(|m| m.set(0));
}

// ---------------------------------------------------------------------------
// Parameters

pub enum ParamRef<'a> {
    Real(&'a [f64]),
    Complex(&'a [Complex64]),
}

pub enum ParamMut<'a> {
    Real(&'a mut [f64]),
    Complex(&'a mut [Complex64]),
}

/// Named parameter tensors in a fixed declaration order.
///
/// The order defines the flat real layout used by the optimizer and the
/// tensor order in checkpoints; complex values flatten as `(re, im)`.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], ParamRef<'_>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Number of real scalars (complex counts twice).
pub fn real_param_count(p: &dyn Parameters) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, _, v| {
        n += match v {
            ParamRef::Real(x) => x.len(),
            ParamRef::Complex(x) => 2 * x.len(),
        }
    });
    n
}

pub fn flatten(p: &dyn Parameters) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, _, v| match v {
        ParamRef::Real(x) => out.extend_from_slice(x),
        ParamRef::Complex(x) => x.iter().for_each(|c| {
            out.push(c.re);
            out.push(c.im);
        }),
    });
    out
}

pub fn load_flat(p: &mut dyn Parameters, flat: &[f64]) {
    let mut at = 0;
    p.visit_mut("", &mut |_, v| match v {
        ParamMut::Real(x) => {
            x.copy_from_slice(&flat[at..at + x.len()]);
            at += x.len();
        }
        ParamMut::Complex(x) => {
            for c in x.iter_mut() {
                *c = Complex64::new(flat[at], flat[at + 1]);
                at += 2;
            }
        }
    });
    assert_eq!(at, flat.len(), "flat parameter length mismatch");
}

// ---------------------------------------------------------------------------
// Pointwise layers

/// Per-pixel affine map `y[o] = Σ_i W[o,i] x[i] + b[o]`, a 1x1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `(out_dim, in_dim)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Kaiming-uniform with `a = √5`, i.e. `U(-1/√fan_in, 1/√fan_in)` for
    /// both weight and bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut l = Self::zeros(in_dim, out_dim);
        l.weight
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-bound..bound));
        l.bias
            .iter_mut()
            .for_each(|b| *b = rng.gen_range(-bound..bound));
        l
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.dims3()?;
        if c != self.in_dim {
            return shape_err(format!(
                "pointwise layer expects {} channels, got {c}",
                self.in_dim
            ));
        }
        let plane = h * w;
        let mut y = Tensor::zeros(&[self.out_dim, h, w]);
        for o in 0..self.out_dim {
            let dst = y.channel_mut(o);
            dst.fill(self.bias[o]);
            for i in 0..self.in_dim {
                let wt = self.weight[o * self.in_dim + i];
                for (d, s) in dst.iter_mut().zip(&x.data()[i * plane..(i + 1) * plane]) {
                    *d += wt * s;
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
    pub fn backward(&self, x: &Tensor, grad_y: &Tensor, grads: &mut Linear) -> Tensor {
        let plane = x.shape()[1] * x.shape()[2];
        let mut gx = Tensor::zeros(x.shape());
        for o in 0..self.out_dim {
            let gy = grad_y.channel(o);
            grads.bias[o] += gy.iter().sum::<f64>();
            for i in 0..self.in_dim {
                let xi = &x.data()[i * plane..(i + 1) * plane];
                grads.weight[o * self.in_dim + i] +=
                    gy.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                let wt = self.weight[o * self.in_dim + i];
                for (g, a) in gx.channel_mut(i).iter_mut().zip(gy) {
                    *g += wt * a;
                }
            }
        }
        gx
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], ParamRef<'_>)) {
        f(
            &join(prefix, "weight"),
            &[self.out_dim, self.in_dim],
            ParamRef::Real(&self.weight),
        );
        f(
            &join(prefix, "bias"),
            &[self.out_dim],
            ParamRef::Real(&self.bias),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        f(&join(prefix, "weight"), ParamMut::Real(&mut self.weight));
        f(&join(prefix, "bias"), ParamMut::Real(&mut self.bias));
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn gelu_tensor(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    y
}

// ---------------------------------------------------------------------------
// Spectral weights

/// Complex mode-mixing weights `R[block, out, in, p, q]` for the two axis-0
/// corner blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    pub modes: (usize, usize),
    pub data: Vec<Complex64>,
}

impl SpectralWeights {
    pub fn zeros(out_channels: usize, in_channels: usize, modes: (usize, usize)) -> Self {
        SpectralWeights {
            out_channels,
            in_channels,
            modes,
            data: vec![C0; 2 * out_channels * in_channels * modes.0 * modes.1],
        }
    }

    /// `scale · (U[0,1) + i U[0,1))` with `scale = 1/(in·out)`.
    pub fn init(
        out_channels: usize,
        in_channels: usize,
        modes: (usize, usize),
        rng: &mut impl Rng,
    ) -> Self {
        let scale = 1.0 / (in_channels * out_channels) as f64;
        let mut w = Self::zeros(out_channels, in_channels, modes);
        for v in w.data.iter_mut() {
            *v = Complex64::new(scale * rng.gen::<f64>(), scale * rng.gen::<f64>());
        }
        w
    }

    pub fn shape(&self) -> [usize; 5] {
        [
            2,
            self.out_channels,
            self.in_channels,
            self.modes.0,
            self.modes.1,
        ]
    }

    #[inline]
    pub fn index(&self, block: usize, o: usize, i: usize, p: usize, q: usize) -> usize {
        (((block * self.out_channels + o) * self.in_channels + i) * self.modes.0 + p) * self.modes.1
            + q
    }

    /// Identity channel mixing on every retained mode.
    pub fn identity(channels: usize, modes: (usize, usize)) -> Self {
        let mut w = Self::zeros(channels, channels, modes);
        for b in 0..2 {
            for c in 0..channels {
                for p in 0..modes.0 {
                    for q in 0..modes.1 {
                        let k = w.index(b, c, c, p, q);
                        w.data[k] = Complex64::new(1.0, 0.0);
                    }
                }
            }
        }
        w
    }

    pub fn max_abs_diff(&self, other: &SpectralWeights) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }
}

impl Parameters for SpectralWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], ParamRef<'_>)) {
        f(
            &join(prefix, "weights"),
            &self.shape(),
            ParamRef::Complex(&self.data),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        f(&join(prefix, "weights"), ParamMut::Complex(&mut self.data));
    }
}

/// Band-local mode mixing: `out[o,b,p,q] = Σ_i R[b,o,i,p,q] z[i,b,p,q]`.
///
/// `z` and `out` use the band-block layout `(C, 2, P1, P2)`.
pub fn mix_modes(w: &SpectralWeights, z: &[Complex64], out: &mut [Complex64]) {
    let (m1, m2) = w.modes;
    let plane = m1 * m2;
    let mut macs = 0u64;
    for b in 0..2 {
        for o in 0..w.out_channels {
            let dst = &mut out[(o * 2 + b) * plane..(o * 2 + b + 1) * plane];
            dst.fill(C0);
            for i in 0..w.in_channels {
                let wr = &w.data[w.index(b, o, i, 0, 0)..][..plane];
                let src = &z[(i * 2 + b) * plane..(i * 2 + b + 1) * plane];
                for m in 0..plane {
                    dst[m] += wr[m] * src[m];
                    macs += 1;
                }
            }
        }
    }
    MACS.with(|c| c.set(c.get() + macs));
}

/// Reverse of [`mix_modes`]: accumulates `gw += gout ⊗ conj(z)` and
/// `gz += Rᴴ gout`.
pub fn mix_modes_backward(
    w: &SpectralWeights,
    z: &[Complex64],
    gout: &[Complex64],
    gw: &mut SpectralWeights,
    gz: &mut [Complex64],
) {
    let (m1, m2) = w.modes;
    let plane = m1 * m2;
    for b in 0..2 {
        for o in 0..w.out_channels {
            let go = &gout[(o * 2 + b) * plane..(o * 2 + b + 1) * plane];
            for i in 0..w.in_channels {
                let base = w.index(b, o, i, 0, 0);
                let src = &z[(i * 2 + b) * plane..(i * 2 + b + 1) * plane];
                let gsrc = &mut gz[(i * 2 + b) * plane..(i * 2 + b + 1) * plane];
                for m in 0..plane {
                    gw.data[base + m] += go[m] * src[m].conj();
                    gsrc[m] += w.data[base + m].conj() * go[m];
                }
            }
        }
    }
}

/// Plain spectral convolution `IFFT(R · FFT(z))` with every mode outside
/// the retained corner blocks set to zero.
pub fn spectral_conv(z: &Tensor, w: &SpectralWeights) -> Result<Tensor> {
    let s = check_field(z, w.in_channels)?;
    let layout = BandLayout::single(w.modes)?;
    layout.check_fits(s)?;
    let zhat = forward_rfft2(z)?;
    let zb = extract_band(&zhat, BandId::BASE, &layout)?;
    let mut ob = crate::spectral::BandBlock::zeros(BandId::BASE, w.out_channels, w.modes);
    mix_modes(w, &zb.values, &mut ob.values);
    let mut out = SpectrumGrid::zeros(w.out_channels, s);
    scatter_band(&ob, &mut out, &layout)?;
    Ok(inverse_rfft2(&out))
}

// ---------------------------------------------------------------------------
// Spectral kernels and the network

/// How a mixture-of-experts layer routes a forward pass. Dense kernels
/// ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Routing {
    /// Every expert active, scaled by its gate.
    Train,
    /// Experts switched off: only the base band is processed. Differentiable.
    Masked,
    /// Only the `k` highest-gated experts per input. Not differentiable.
    TopK(usize),
}

pub trait SpectralKernel: Clone + Send + Sync + Parameters {
    type Tape: Send + Sync;

    fn in_channels(&self) -> usize;
    fn out_channels(&self) -> usize;
    fn check_grid(&self, size: usize) -> Result<()>;
    fn forward(&self, z: &Tensor, routing: Routing) -> Result<(Tensor, Self::Tape)>;
    /// Accumulates parameter gradients into `grads`, returns `∂L/∂z`.
    /// `grad_gates` is the direct loss gradient on this layer's gate values
    /// (empty when there is none).
    fn backward(
        &self,
        tape: &Self::Tape,
        grad_out: &Tensor,
        grad_gates: &[f64],
        grads: &mut Self,
    ) -> Result<Tensor>;
    fn gate_values(tape: &Self::Tape) -> &[f64];
    fn zeros_like(&self) -> Self;
    /// Routing for evaluation and deployment.
    fn inference_routing(&self) -> Routing {
        Routing::Train
    }
    /// Band of each entry of `gate_values`.
    fn gate_bands(&self) -> Vec<BandId> {
        Vec::new()
    }
}

pub struct DenseTape {
    zhat_base: Vec<Complex64>,
    size: usize,
}

impl SpectralKernel for SpectralWeights {
    type Tape = DenseTape;

    fn in_channels(&self) -> usize {
        self.in_channels
    }

    fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn check_grid(&self, size: usize) -> Result<()> {
        BandLayout::single(self.modes)?.check_fits(size)
    }

    fn forward(&self, z: &Tensor, _routing: Routing) -> Result<(Tensor, DenseTape)> {
        let s = check_field(z, self.in_channels)?;
        let layout = BandLayout::single(self.modes)?;
        layout.check_fits(s)?;
        let zhat = forward_rfft2(z)?;
        let zb = extract_band(&zhat, BandId::BASE, &layout)?;
        let mut ob = crate::spectral::BandBlock::zeros(BandId::BASE, self.out_channels, self.modes);
        mix_modes(self, &zb.values, &mut ob.values);
        let mut out = SpectrumGrid::zeros(self.out_channels, s);
        scatter_band(&ob, &mut out, &layout)?;
        Ok((
            inverse_rfft2(&out),
            DenseTape {
                zhat_base: zb.values,
                size: s,
            },
        ))
    }

    fn backward(
        &self,
        tape: &DenseTape,
        grad_out: &Tensor,
        _grad_gates: &[f64],
        grads: &mut Self,
    ) -> Result<Tensor> {
        let layout = BandLayout::single(self.modes)?;
        let gspec = inverse_rfft2_adjoint(grad_out);
        let gob = extract_band(&gspec, BandId::BASE, &layout)?;
        let mut gzb = crate::spectral::BandBlock::zeros(BandId::BASE, self.in_channels, self.modes);
        mix_modes_backward(self, &tape.zhat_base, &gob.values, grads, &mut gzb.values);
        let mut gz = SpectrumGrid::zeros(self.in_channels, tape.size);
        scatter_band(&gzb, &mut gz, &layout)?;
        Ok(forward_rfft2_adjoint(&gz))
    }

    fn gate_values(_tape: &DenseTape) -> &[f64] {
        &[]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.out_channels, self.in_channels, self.modes)
    }
}

/// Architecture of the operator network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FnoConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub layers: usize,
    /// Retained modes per corner block of the dense spectral weights (for a
    /// mixture-of-experts model: the chunk size of every band).
    pub modes: (usize, usize),
    /// Resolution the model was built for. Forward passes accept any grid
    /// large enough to hold the retained modes.
    pub grid_size: usize,
}

impl Default for FnoConfig {
    fn default() -> Self {
        FnoConfig {
            in_channels: 1,
            out_channels: 1,
            width: 32,
            layers: 4,
            modes: (4, 4),
            grid_size: 64,
        }
    }
}

impl FnoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.width == 0 || self.layers == 0 {
            return config_err(format!(
                "channels, width and layer count must be positive: {self:?}"
            ));
        }
        BandLayout::single(self.modes)?.check_fits(self.grid_size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierLayer<K> {
    pub spectral: K,
    pub pointwise: Linear,
}

/// Lifting, Fourier layers and projection around a spectral kernel `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<K> {
    pub config: FnoConfig,
    pub lift: Linear,
    pub layers: Vec<FourierLayer<K>>,
    pub project: Linear,
}

/// The dense FNO.
pub type Fno = Network<SpectralWeights>;

/// Forward activations kept for the backward pass.
pub struct Tape<T> {
    routing: Routing,
    lifted_input: Tensor,
    layer_inputs: Vec<Tensor>,
    pre_activations: Vec<Tensor>,
    spectral: Vec<T>,
    last: Tensor,
}

impl<T> Tape<T> {
    pub fn routing(&self) -> Routing {
        self.routing
    }

    pub fn spectral_tapes(&self) -> &[T] {
        &self.spectral
    }
}

impl Fno {
    pub fn new(config: FnoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, rng::INIT);
        let h = config.width;
        let lift = Linear::init(config.in_channels, h, &mut rng);
        let layers = (0..config.layers)
            .map(|_| FourierLayer {
                spectral: SpectralWeights::init(h, h, config.modes, &mut rng),
                pointwise: Linear::init(h, h, &mut rng),
            })
            .collect();
        let project = Linear::init(h, config.out_channels, &mut rng);
        Ok(Network {
            config,
            lift,
            layers,
            project,
        })
    }
}

impl<K: SpectralKernel> Network<K> {
    pub fn forward(&self, x: &Tensor, routing: Routing) -> Result<(Tensor, Tape<K::Tape>)> {
        let s = check_field(x, self.config.in_channels)?;
        x.ensure_finite("model input")?;
        for layer in &self.layers {
            layer.spectral.check_grid(s)?;
        }
        let mut h = self.lift.forward(x)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut spectral = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (mut pre, tape) = layer.spectral.forward(&h, routing)?;
            pre.add_assign(&layer.pointwise.forward(&h)?);
            let next = gelu_tensor(&pre);
            layer_inputs.push(std::mem::replace(&mut h, next));
            pre_activations.push(pre);
            spectral.push(tape);
        }
        let y = self.project.forward(&h)?;
        Ok((
            y,
            Tape {
                routing,
                lifted_input: x.clone(),
                layer_inputs,
                pre_activations,
                spectral,
                last: h,
            },
        ))
    }

    pub fn inference_routing(&self) -> Routing {
        self.layers
            .first()
            .map(|l| l.spectral.inference_routing())
            .unwrap_or(Routing::Train)
    }

    pub fn predict(&self, x: &Tensor, routing: Routing) -> Result<Tensor> {
        Ok(self.forward(x, routing)?.0)
    }

    /// Gate values recorded by each layer of a forward pass.
    pub fn gate_values<'t>(&self, tape: &'t Tape<K::Tape>) -> Vec<&'t [f64]> {
        tape.spectral.iter().map(K::gate_values).collect()
    }

    /// Reverse pass. Parameter gradients are accumulated into `grads` (a
    /// network of identical shape); returns the gradient with respect to the
    /// input. `grad_gates[l]`, when given, is the direct loss gradient on
    /// layer `l`'s gate values.
    pub fn backward(
        &self,
        tape: &Tape<K::Tape>,
        grad_y: &Tensor,
        grad_gates: Option<&[Vec<f64>]>,
        grads: &mut Self,
    ) -> Result<Tensor> {
        if let Routing::TopK(_) = tape.routing {
            return config_err("backward through an inference (top-K) tape is not defined");
        }
        let mut g = self
            .project
            .backward(&tape.last, grad_y, &mut grads.project);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let pre = &tape.pre_activations[l];
            for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
                *gv *= gelu_grad(p);
            }
            let input = &tape.layer_inputs[l];
            let gates: &[f64] = grad_gates
                .and_then(|gg| gg.get(l))
                .map(|v| v.as_slice())
                .unwrap_or(&[]);
            let grads_layer = &mut grads.layers[l];
            let mut gin =
                layer
                    .spectral
                    .backward(&tape.spectral[l], &g, gates, &mut grads_layer.spectral)?;
            gin.add_assign(
                &layer
                    .pointwise
                    .backward(input, &g, &mut grads_layer.pointwise),
            );
            g = gin;
        }
        Ok(self.lift.backward(&tape.lifted_input, &g, &mut grads.lift))
    }

    pub fn zeros_like(&self) -> Self {
        Network {
            config: self.config,
            lift: Linear::zeros(self.lift.in_dim, self.lift.out_dim),
            layers: self
                .layers
                .iter()
                .map(|l| FourierLayer {
                    spectral: l.spectral.zeros_like(),
                    pointwise: Linear::zeros(l.pointwise.in_dim, l.pointwise.out_dim),
                })
                .collect(),
            project: Linear::zeros(self.project.in_dim, self.project.out_dim),
        }
    }

    pub fn param_count(&self) -> usize {
        real_param_count(self)
    }
}

impl<K: SpectralKernel> Parameters for Network<K> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], ParamRef<'_>)) {
        self.lift.visit(&join(prefix, "lift"), f);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = join(prefix, &format!("layers.{l}"));
            layer.spectral.visit(&join(&p, "spectral"), f);
            layer.pointwise.visit(&join(&p, "pointwise"), f);
        }
        self.project.visit(&join(prefix, "project"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.lift.visit_mut(&join(prefix, "lift"), f);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = join(prefix, &format!("layers.{l}"));
            layer.spectral.visit_mut(&join(&p, "spectral"), f);
            layer.pointwise.visit_mut(&join(&p, "pointwise"), f);
        }
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

// ---------------------------------------------------------------------------
// Cost model

/// Floating-point operation estimate for one forward pass on one sample.
///
/// Counting conventions: a complex multiply-add is 8 flops, a real one 2;
/// a real-input 2-d FFT of `N = S²` points is `2.5·N·log2 N`; every
/// activation or gate nonlinearity evaluation counts as one operation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopCount {
    pub fft: u64,
    pub spectral: u64,
    pub pointwise: u64,
    pub activation: u64,
    pub lift_project: u64,
    pub gating: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.fft
            + self.spectral
            + self.pointwise
            + self.activation
            + self.lift_project
            + self.gating
    }
}

pub fn fft2_flops(channels: usize, size: usize) -> u64 {
    5 * (channels * size * size) as u64 * size.trailing_zeros() as u64
}

/// Complex multiply-adds of one dense spectral convolution.
pub fn spectral_macs(width: usize, modes: (usize, usize)) -> u64 {
    (2 * width * width * modes.0 * modes.1) as u64
}

/// Shared per-sample costs of lifting, pointwise paths, activations,
/// projection and transforms. The spectral and gating terms are left at
/// zero for the caller to fill in.
pub fn backbone_flops(config: &FnoConfig, size: usize) -> FlopCount {
    let px = (size * size) as u64;
    let (h, l) = (config.width as u64, config.layers as u64);
    let (cin, cout) = (config.in_channels as u64, config.out_channels as u64);
    FlopCount {
        fft: l * (fft2_flops(config.width, size) * 2),
        spectral: 0,
        pointwise: l * (2 * h * h * px + h * px),
        activation: l * h * px,
        lift_project: (2 * cin * h + h) * px + (2 * h * cout + cout) * px,
        gating: 0,
    }
}

pub fn count_flops(config: &FnoConfig, size: usize) -> FlopCount {
    let mut f = backbone_flops(config, size);
    f.spectral = config.layers as u64 * 8 * spectral_macs(config.width, config.modes);
    f
}

pub fn count_params(model: &Fno) -> usize {
    model.param_count()
}

/// Closed-form real parameter count of a dense FNO.
pub fn dense_param_count(config: &FnoConfig) -> usize {
    let h = config.width;
    let spectral = 2 * 2 * h * h * config.modes.0 * config.modes.1;
    let pointwise = h * h + h;
    let lift = config.in_channels * h + h;
    let project = h * config.out_channels + config.out_channels;
    lift + config.layers * (spectral + pointwise) + project
}

/// Real parameters in dense spectral weights over `blocks` corner blocks
/// (2 for every model built by this crate).
pub fn dense_spectral_param_count(
    width: usize,
    modes: (usize, usize),
    layers: usize,
    blocks: usize,
) -> usize {
    blocks * 2 * width * width * modes.0 * modes.1 * layers
}

pub(crate) fn finite_or(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training(format!("{what} is not finite ({v})")))
    }
}
