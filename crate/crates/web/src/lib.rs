//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export returns a JSON string; errors surface as JS exceptions.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use freqmoe::evalx::{bench_modes, BenchConfig, BenchRow};
use freqmoe::moe::{band_features, gate_forward, top_k_experts, GateParams};
use freqmoe::pde::{turbulent_init, NsSolver};
use freqmoe::rng;
use freqmoe::spectral::{extract_band, forward_rfft2, radial_energy_spectrum, BandId, BandLayout};
use freqmoe::Tensor;

fn js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(js)
}

#[derive(Serialize)]
struct FieldView {
    size: usize,
    time: f64,
    substeps: usize,
    vorticity: Vec<f64>,
    /// `(shell, energy)` pairs.
    spectrum: Vec<(usize, f64)>,
}

fn evolve(size: usize, seed: u64, viscosity: f64, time: f64) -> Result<(Tensor, usize), JsValue> {
    let mut r = rng::stream(seed, rng::DATA);
    let w0 = turbulent_init(size, 8, 1.0, 4, &mut r)
        .map_err(js)?
        .vorticity;
    if time <= 0.0 {
        return Ok((w0, 0));
    }
    let solver = NsSolver::new(size, viscosity, None).map_err(js)?;
    solver.advance(&w0, time, 0.4).map_err(js)
}

/// Random turbulent vorticity evolved for `time` units with the unforced
/// pseudo-spectral solver, plus its radial energy spectrum.
#[wasm_bindgen]
pub fn turbulent_field(
    size: usize,
    seed: u64,
    viscosity: f64,
    time: f64,
) -> Result<String, JsValue> {
    let (w, substeps) = evolve(size, seed, viscosity, time)?;
    let spectrum = radial_energy_spectrum(&w).map_err(js)?;
    to_json(&FieldView {
        size,
        time,
        substeps,
        vorticity: w.into_data(),
        spectrum,
    })
}

#[derive(Serialize)]
struct BandCell {
    row: usize,
    col: usize,
    energy: f64,
    /// `None` for the base band.
    gate: Option<f64>,
    active: bool,
}

#[derive(Serialize)]
struct BandMap {
    grid: (usize, usize),
    top_k: usize,
    cells: Vec<BandCell>,
}

/// Band energies of the same field and the gates of a single-weight router
/// whose weight is the reciprocal of the mean expert-band feature, so that
/// logits are band magnitudes relative to the average, divided by
/// `temperature`. The `top_k` highest gates are marked active.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn band_map(
    size: usize,
    seed: u64,
    viscosity: f64,
    time: f64,
    chunk: usize,
    grid: usize,
    top_k: usize,
    temperature: f64,
) -> Result<String, JsValue> {
    let (w, _) = evolve(size, seed, viscosity, time)?;
    let layout = BandLayout::new((chunk, chunk), (grid, grid)).map_err(js)?;
    layout.check_fits(size).map_err(js)?;
    let spec = forward_rfft2(&w).map_err(js)?;
    let bands: Vec<BandId> = layout.bands().collect();
    let experts = layout.expert_band_count();
    let blocks = bands
        .iter()
        .map(|&b| extract_band(&spec, b, &layout))
        .collect::<freqmoe::Result<Vec<_>>>()
        .map_err(js)?;
    let features: Vec<Vec<f64>> = blocks.iter().map(band_features).collect();
    let mean = features[1..].iter().map(|f| f[0]).sum::<f64>() / experts.max(1) as f64;
    let mut router = GateParams::new(experts, 1, temperature).map_err(js)?;
    router
        .weights
        .iter_mut()
        .for_each(|v| *v = if mean > 0.0 { 1.0 / mean } else { 0.0 });

    let mut cells = Vec::with_capacity(bands.len());
    let mut gates = Vec::with_capacity(experts);
    for ((&b, block), f) in bands.iter().zip(&blocks).zip(&features) {
        let energy = block.values.iter().map(|c| c.norm_sqr()).sum::<f64>() / (size * size) as f64;
        let gate = if b.is_base() {
            None
        } else {
            let g = gate_forward(f, &router, gates.len());
            gates.push(g);
            Some(g)
        };
        cells.push(BandCell {
            row: b.0,
            col: b.1,
            energy,
            gate,
            active: b.is_base(),
        });
    }
    let picked = top_k_experts(&gates, top_k.min(experts)).map_err(js)?;
    // Expert j sits on the (j+1)-th band in row-major order.
    for j in picked {
        cells[j + 1].active = true;
    }
    to_json(&BandMap {
        grid: (grid, grid),
        top_k,
        cells,
    })
}

/// Dense versus FreqMoE cost rows for the given mode counts.
#[wasm_bindgen]
pub fn flop_curves(
    modes: Vec<usize>,
    width: usize,
    layers: usize,
    chunk: usize,
    rank: usize,
    top_k: usize,
    grid_size: usize,
) -> Result<String, JsValue> {
    let cfg = BenchConfig {
        width,
        layers,
        chunk: (chunk, chunk),
        rank,
        top_k,
        grid_size,
        time: false,
    };
    let rows: Vec<BenchRow> = bench_modes(&modes, &cfg).map_err(js)?;
    to_json(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exports_produce_json() {
        let f: serde_json::Value =
            serde_json::from_str(&turbulent_field(32, 1, 1e-3, 0.5).unwrap()).unwrap();
        assert_eq!(f["vorticity"].as_array().unwrap().len(), 32 * 32);
        let m: serde_json::Value =
            serde_json::from_str(&band_map(64, 1, 1e-3, 0.0, 4, 4, 2, 1.0).unwrap()).unwrap();
        let cells = m["cells"].as_array().unwrap();
        assert_eq!(cells.len(), 16);
        assert_eq!(cells.iter().filter(|c| c["active"] == true).count(), 3);
        let rows: serde_json::Value =
            serde_json::from_str(&flop_curves(vec![4, 8], 32, 4, 4, 4, 2, 64).unwrap()).unwrap();
        assert_eq!(rows.as_array().unwrap().len(), 2);
    }
}
