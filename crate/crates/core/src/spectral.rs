//! Real 2-d FFTs on power-of-two grids, frequency-band partitioning and
//! radial spectrum diagnostics.
//!
//! Conventions: the forward transform is unnormalized, the inverse carries the
//! `1/S²` factor. Spectra use the half-spectrum layout `(C, S, S/2 + 1)`:
//! axis 0 holds every wavenumber in FFT order, axis 1 only the non-negative
//! ones.

use std::cell::RefCell;
use std::ops::Range;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

pub fn check_grid_size(size: usize) -> Result<()> {
    if size < 2 || !size.is_power_of_two() {
        return config_err(format!("grid size must be a power of two >= 2, got {size}"));
    }
    Ok(())
}

/// Signed wavenumber of FFT index `k` on an `n`-point axis.
pub fn signed_wavenumber(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Half-spectrum Fourier coefficients of a real multi-channel field.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumGrid {
    channels: usize,
    size: usize,
    coeffs: Vec<Complex64>,
}

impl SpectrumGrid {
    pub fn zeros(channels: usize, size: usize) -> Self {
        SpectrumGrid {
            channels,
            size,
            coeffs: vec![Complex64::new(0.0, 0.0); channels * size * (size / 2 + 1)],
        }
    }

    pub fn from_coeffs(channels: usize, size: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        check_grid_size(size)?;
        if coeffs.len() != channels * size * (size / 2 + 1) {
            return shape_err(format!(
                "spectrum ({channels}, {size}, {}) needs {} coefficients, got {}",
                size / 2 + 1,
                channels * size * (size / 2 + 1),
                coeffs.len()
            ));
        }
        Ok(SpectrumGrid {
            channels,
            size,
            coeffs,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Number of stored axis-1 frequencies, `S/2 + 1`.
    pub fn half(&self) -> usize {
        self.size / 2 + 1
    }

    #[inline]
    pub fn index(&self, c: usize, k1: usize, k2: usize) -> usize {
        (c * self.size + k1) * self.half() + k2
    }

    #[inline]
    pub fn get(&self, c: usize, k1: usize, k2: usize) -> Complex64 {
        self.coeffs[self.index(c, k1, k2)]
    }

    #[inline]
    pub fn get_mut(&mut self, c: usize, k1: usize, k2: usize) -> &mut Complex64 {
        let i = self.index(c, k1, k2);
        &mut self.coeffs[i]
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Multiplicity of axis-1 column `k2` in the full spectrum: the zero and
    /// Nyquist columns appear once, every other column stands for itself and
    /// its conjugate mirror.
    #[inline]
    pub fn column_weight(&self, k2: usize) -> f64 {
        if k2 == 0 || k2 == self.size / 2 {
            1.0
        } else {
            2.0
        }
    }

    /// Zeroes every coefficient outside the region retained by `layout`.
    pub fn truncate(&mut self, layout: &BandLayout) -> Result<()> {
        layout.check_fits(self.size)?;
        let mut mask = vec![false; self.size * self.half()];
        for band in layout.bands() {
            for block in 0..2 {
                for k1 in layout.rows(band, block, self.size) {
                    for k2 in layout.cols(band) {
                        mask[k1 * self.half() + k2] = true;
                    }
                }
            }
        }
        let plane = mask.len();
        for (i, v) in self.coeffs.iter_mut().enumerate() {
            if !mask[i % plane] {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        Ok(())
    }
}

/// Unnormalized forward transform of a real `(C, S, S)` field.
pub fn forward_rfft2(field: &Tensor) -> Result<SpectrumGrid> {
    let (channels, rows, cols) = field.dims3()?;
    if rows != cols {
        return shape_err(format!("field must be square, got {rows}x{cols}"));
    }
    check_grid_size(rows)?;
    field.ensure_finite("rfft2 input")?;
    Ok(rfft2_unchecked(field, channels, rows))
}

pub(crate) fn rfft2_unchecked(field: &Tensor, channels: usize, s: usize) -> SpectrumGrid {
    let half = s / 2 + 1;
    let (fwd, _) = plans(s);
    let mut out = SpectrumGrid::zeros(channels, s);
    let mut buf = vec![Complex64::new(0.0, 0.0); s];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fwd.get_inplace_scratch_len()];
    for c in 0..channels {
        let src = field.channel(c);
        let plane = &mut out.coeffs[c * s * half..(c + 1) * s * half];
        for x in 0..s {
            for (b, &v) in buf.iter_mut().zip(&src[x * s..(x + 1) * s]) {
                *b = Complex64::new(v, 0.0);
            }
            fwd.process_with_scratch(&mut buf, &mut scratch);
            plane[x * half..(x + 1) * half].copy_from_slice(&buf[..half]);
        }
        for k2 in 0..half {
            for (x, b) in buf.iter_mut().enumerate() {
                *b = plane[x * half + k2];
            }
            fwd.process_with_scratch(&mut buf, &mut scratch);
            for (k1, b) in buf.iter().enumerate() {
                plane[k1 * half + k2] = *b;
            }
        }
    }
    out
}

/// Inverse transform, normalized by `1/S²`.
///
/// For columns other than zero and Nyquist the conjugate mirror is implied;
/// on those two columns only the real part of the axis-0 inverse survives.
/// The result is therefore real for every input spectrum.
pub fn inverse_rfft2(spec: &SpectrumGrid) -> Tensor {
    let s = spec.size;
    let half = spec.half();
    let (_, inv) = plans(s);
    let mut out = Tensor::zeros(&[spec.channels, s, s]);
    let mut col = vec![Complex64::new(0.0, 0.0); s];
    let mut row = vec![Complex64::new(0.0, 0.0); s];
    let mut tmp = vec![Complex64::new(0.0, 0.0); s * half];
    let mut scratch = vec![Complex64::new(0.0, 0.0); inv.get_inplace_scratch_len()];
    let norm = 1.0 / (s * s) as f64;
    for c in 0..spec.channels {
        let plane = &spec.coeffs[c * s * half..(c + 1) * s * half];
        for k2 in 0..half {
            for (k1, b) in col.iter_mut().enumerate() {
                *b = plane[k1 * half + k2];
            }
            inv.process_with_scratch(&mut col, &mut scratch);
            for (x, b) in col.iter().enumerate() {
                tmp[x * half + k2] = *b;
            }
        }
        let dst = out.channel_mut(c);
        for x in 0..s {
            let t = &tmp[x * half..(x + 1) * half];
            row[0] = Complex64::new(t[0].re, 0.0);
            for k2 in 1..half - 1 {
                row[k2] = t[k2];
                row[s - k2] = t[k2].conj();
            }
            row[s / 2] = Complex64::new(t[s / 2].re, 0.0);
            inv.process_with_scratch(&mut row, &mut scratch);
            for (d, r) in dst[x * s..(x + 1) * s].iter_mut().zip(&row) {
                *d = r.re * norm;
            }
        }
    }
    out
}

/// Checked variant of [`inverse_rfft2`] against an expected field shape.
pub fn inverse_rfft2_checked(spec: &SpectrumGrid, channels: usize, size: usize) -> Result<Tensor> {
    if spec.channels != channels || spec.size != size {
        return shape_err(format!(
            "spectrum is ({}, {}), expected ({channels}, {size})",
            spec.channels, spec.size
        ));
    }
    Ok(inverse_rfft2(spec))
}

/// Adjoint of [`inverse_rfft2`] with respect to the real inner product.
///
/// Returns the complex gradient `∂L/∂Re + i ∂L/∂Im` of every stored
/// coefficient given `∂L/∂field`.
pub fn inverse_rfft2_adjoint(grad_field: &Tensor) -> SpectrumGrid {
    let (c, s, _) = grad_field.dims3().expect("3-d gradient");
    let mut g = rfft2_unchecked(grad_field, c, s);
    let half = g.half();
    let norm = 1.0 / (s * s) as f64;
    for (i, v) in g.coeffs.iter_mut().enumerate() {
        let k2 = i % half;
        let w = if k2 == 0 || k2 == s / 2 { 1.0 } else { 2.0 };
        *v *= w * norm;
    }
    g
}

/// Adjoint of [`forward_rfft2`]: maps coefficient gradients back to a field
/// gradient.
pub fn forward_rfft2_adjoint(grad_spec: &SpectrumGrid) -> Tensor {
    let s = grad_spec.size;
    let half = grad_spec.half();
    let mut g = grad_spec.clone();
    let scale = (s * s) as f64;
    for (i, v) in g.coeffs.iter_mut().enumerate() {
        let k2 = i % half;
        let w = if k2 == 0 || k2 == s / 2 { 1.0 } else { 2.0 };
        *v *= scale / w;
    }
    inverse_rfft2(&g)
}

/// Band coordinate `(i1, i2)` inside a [`BandLayout`]; `(0, 0)` is the base band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BandId(pub usize, pub usize);

impl BandId {
    pub const BASE: BandId = BandId(0, 0);

    pub fn is_base(self) -> bool {
        self == Self::BASE
    }
}

impl std::fmt::Display for BandId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.0, self.1)
    }
}

/// Partition of the retained modes into a `J1 x J2` grid of `P1 x P2`
/// chunks, each present in both axis-0 corner blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandLayout {
    pub chunk_modes: (usize, usize),
    pub grid_chunks: (usize, usize),
}

impl BandLayout {
    pub fn new(chunk_modes: (usize, usize), grid_chunks: (usize, usize)) -> Result<Self> {
        if chunk_modes.0 == 0 || chunk_modes.1 == 0 || grid_chunks.0 == 0 || grid_chunks.1 == 0 {
            return config_err(format!(
                "band layout needs positive chunk sizes and counts, got chunk {chunk_modes:?} grid {grid_chunks:?}"
            ));
        }
        Ok(BandLayout {
            chunk_modes,
            grid_chunks,
        })
    }

    /// A single band: the plain truncation used by a dense FNO.
    pub fn single(modes: (usize, usize)) -> Result<Self> {
        Self::new(modes, (1, 1))
    }

    /// Retained modes per corner block, `(J1·P1, J2·P2)`.
    pub fn retained_modes(&self) -> (usize, usize) {
        (
            self.grid_chunks.0 * self.chunk_modes.0,
            self.grid_chunks.1 * self.chunk_modes.1,
        )
    }

    pub fn band_count(&self) -> usize {
        self.grid_chunks.0 * self.grid_chunks.1
    }

    pub fn expert_band_count(&self) -> usize {
        self.band_count() - 1
    }

    pub fn modes_per_band(&self) -> usize {
        self.chunk_modes.0 * self.chunk_modes.1
    }

    /// Every band in row-major order, base band first.
    pub fn bands(&self) -> impl Iterator<Item = BandId> + '_ {
        let (j1, j2) = self.grid_chunks;
        (0..j1).flat_map(move |a| (0..j2).map(move |b| BandId(a, b)))
    }

    pub fn contains(&self, band: BandId) -> bool {
        band.0 < self.grid_chunks.0 && band.1 < self.grid_chunks.1
    }

    pub fn check_band(&self, band: BandId) -> Result<()> {
        if !self.contains(band) {
            return config_err(format!(
                "band {band} outside layout grid {:?}",
                self.grid_chunks
            ));
        }
        Ok(())
    }

    /// Row-major position of a band.
    pub fn band_index(&self, band: BandId) -> usize {
        band.0 * self.grid_chunks.1 + band.1
    }

    pub fn check_fits(&self, size: usize) -> Result<()> {
        check_grid_size(size)?;
        let (r1, r2) = self.retained_modes();
        if r1 > size / 2 || r2 > size / 2 + 1 {
            return config_err(format!(
                "retained modes ({r1}, {r2}) do not fit a {size}x{size} grid (limits {}, {})",
                size / 2,
                size / 2 + 1
            ));
        }
        Ok(())
    }

    /// Axis-0 rows of `band` in corner block 0 (non-negative) or 1 (mirrored).
    pub fn rows(&self, band: BandId, block: usize, size: usize) -> Range<usize> {
        let p1 = self.chunk_modes.0;
        match block {
            0 => band.0 * p1..(band.0 + 1) * p1,
            _ => size - (band.0 + 1) * p1..size - band.0 * p1,
        }
    }

    pub fn cols(&self, band: BandId) -> Range<usize> {
        let p2 = self.chunk_modes.1;
        band.1 * p2..(band.1 + 1) * p2
    }

    /// First row of each corner block for `band`.
    pub fn row_starts(&self, band: BandId, size: usize) -> [usize; 2] {
        [
            self.rows(band, 0, size).start,
            self.rows(band, 1, size).start,
        ]
    }
}

/// Coefficients of one band, laid out `(C, 2, P1, P2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandBlock {
    pub band: BandId,
    pub channels: usize,
    pub chunk_modes: (usize, usize),
    pub values: Vec<Complex64>,
}

impl BandBlock {
    pub fn zeros(band: BandId, channels: usize, chunk_modes: (usize, usize)) -> Self {
        BandBlock {
            band,
            channels,
            chunk_modes,
            values: vec![Complex64::new(0.0, 0.0); channels * 2 * chunk_modes.0 * chunk_modes.1],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, block: usize, p: usize, q: usize) -> usize {
        ((c * 2 + block) * self.chunk_modes.0 + p) * self.chunk_modes.1 + q
    }

    pub fn get(&self, c: usize, block: usize, p: usize, q: usize) -> Complex64 {
        self.values[self.index(c, block, p, q)]
    }
}

pub fn extract_band(spec: &SpectrumGrid, band: BandId, layout: &BandLayout) -> Result<BandBlock> {
    layout.check_band(band)?;
    layout.check_fits(spec.size)?;
    let mut out = BandBlock::zeros(band, spec.channels, layout.chunk_modes);
    let cols = layout.cols(band);
    let mut i = 0;
    for c in 0..spec.channels {
        for block in 0..2 {
            for k1 in layout.rows(band, block, spec.size) {
                for k2 in cols.clone() {
                    out.values[i] = spec.get(c, k1, k2);
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Writes a band's coefficients back into `spec`, overwriting exactly the
/// indices the band owns.
pub fn scatter_band(block: &BandBlock, spec: &mut SpectrumGrid, layout: &BandLayout) -> Result<()> {
    layout.check_band(block.band)?;
    layout.check_fits(spec.size)?;
    if block.chunk_modes != layout.chunk_modes || block.channels != spec.channels {
        return shape_err(format!(
            "band block (C={}, chunk {:?}) does not match layout chunk {:?} with C={}",
            block.channels, block.chunk_modes, layout.chunk_modes, spec.channels
        ));
    }
    let cols = layout.cols(block.band);
    let size = spec.size;
    let mut i = 0;
    for c in 0..spec.channels {
        for b in 0..2 {
            for k1 in layout.rows(block.band, b, size) {
                for k2 in cols.clone() {
                    *spec.get_mut(c, k1, k2) = block.values[i];
                    i += 1;
                }
            }
        }
    }
    Ok(())
}

/// Energy per integer radial wavenumber bin, `round(|k|)`, summed over
/// channels. Bins sum to `Σ field²`.
pub fn radial_energy_spectrum(field: &Tensor) -> Result<Vec<(usize, f64)>> {
    let spec = forward_rfft2(field)?;
    Ok(radial_energy_of_spectrum(&spec))
}

pub fn radial_energy_of_spectrum(spec: &SpectrumGrid) -> Vec<(usize, f64)> {
    let s = spec.size;
    let max_bin = ((s as f64 / 2.0) * std::f64::consts::SQRT_2).ceil() as usize;
    let mut bins = vec![0.0; max_bin + 1];
    let norm = 1.0 / (s * s) as f64;
    for c in 0..spec.channels {
        for k1 in 0..s {
            let a = signed_wavenumber(k1, s) as f64;
            for k2 in 0..spec.half() {
                let k = (a * a + (k2 * k2) as f64).sqrt().round() as usize;
                bins[k] += spec.column_weight(k2) * spec.get(c, k1, k2).norm_sqr() * norm;
            }
        }
    }
    bins.into_iter().enumerate().collect()
}

/// Validation for operations that need a square power-of-two field with a
/// given channel count.
pub(crate) fn check_field(field: &Tensor, channels: usize) -> Result<usize> {
    let (c, h, w) = field.dims3()?;
    if c != channels {
        return Err(Error::Shape(format!(
            "expected {channels} channels, got {c}"
        )));
    }
    if h != w {
        return shape_err(format!("field must be square, got {h}x{w}"));
    }
    check_grid_size(h)?;
    Ok(h)
}
