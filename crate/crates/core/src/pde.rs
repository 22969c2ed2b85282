//! Synthetic PDE data on the periodic domain `[0, 2π)²`.
//!
//! Two problems: the heat equation, advanced with its exact Fourier
//! multiplier, and incompressible 2-d Navier-Stokes in vorticity form,
//! advanced pseudo-spectrally with RK4 and 2/3-rule dealiasing.
//!
//! Grid conventions: row index `i` is `y = 2πi/S`, column index `j` is
//! `x = 2πj/S`. In the half spectrum, rows carry `k_y` and columns `k_x`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::par;
use crate::rng;
use crate::spectral::{
    check_field, check_grid_size, forward_rfft2, inverse_rfft2, signed_wavenumber, SpectrumGrid,
};
use crate::tensor::Tensor;

const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    Heat,
    NsVorticity,
}

impl std::str::FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat" => Ok(Problem::Heat),
            "ns" | "ns-vorticity" => Ok(Problem::NsVorticity),
            _ => config_err(format!("unknown problem '{s}' (expected heat or ns)")),
        }
    }
}

/// Vorticity source `A·(sin(n(x+y)) + cos(n(x+y)))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Forcing {
    pub amplitude: f64,
    pub wavenumber: i64,
}

impl Forcing {
    pub fn field(&self, size: usize) -> Tensor {
        let mut t = Tensor::zeros(&[1, size, size]);
        let h = 2.0 * PI / size as f64;
        let n = self.wavenumber as f64;
        for i in 0..size {
            for j in 0..size {
                let phase = n * h * (i + j) as f64;
                t.data_mut()[i * size + j] = self.amplitude * (phase.sin() + phase.cos());
            }
        }
        t
    }
}

// ---------------------------------------------------------------------------
// Heat

/// Multiplies every Fourier coefficient by `exp(−ν|k|²Δt)`.
pub fn heat_step_analytic(field: &Tensor, nu: f64, dt: f64) -> Result<Tensor> {
    let (channels, s, _) = field.dims3()?;
    check_field(field, channels)?;
    let mut spec = forward_rfft2(field)?;
    let half = spec.half();
    for c in 0..channels {
        for k1 in 0..s {
            let ky = signed_wavenumber(k1, s) as f64;
            for k2 in 0..half {
                let kx = k2 as f64;
                let f = (-nu * (kx * kx + ky * ky) * dt).exp();
                *spec.get_mut(c, k1, k2) *= f;
            }
        }
    }
    Ok(inverse_rfft2(&spec))
}

// ---------------------------------------------------------------------------
// Spectral calculus on single-channel fields

struct Wavenumbers {
    size: usize,
    /// `k_x` per half-spectrum column, `k_y` per row.
    kx: Vec<f64>,
    ky: Vec<f64>,
    /// Same, with the Nyquist entry zeroed for odd derivatives.
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl Wavenumbers {
    fn new(size: usize) -> Self {
        let half = size / 2 + 1;
        let kx: Vec<f64> = (0..half).map(|k| k as f64).collect();
        let ky: Vec<f64> = (0..size)
            .map(|k| signed_wavenumber(k, size) as f64)
            .collect();
        let odd = |k: usize, v: f64| if k == size / 2 { 0.0 } else { v };
        Wavenumbers {
            size,
            dx: kx.iter().enumerate().map(|(k, &v)| odd(k, v)).collect(),
            dy: ky.iter().enumerate().map(|(k, &v)| odd(k, v)).collect(),
            kx,
            ky,
        }
    }

    fn half(&self) -> usize {
        self.size / 2 + 1
    }

    fn k2(&self, k1: usize, k2: usize) -> f64 {
        self.kx[k2] * self.kx[k2] + self.ky[k1] * self.ky[k1]
    }

    fn map(
        &self,
        spec: &SpectrumGrid,
        f: impl Fn(usize, usize, Complex64) -> Complex64,
    ) -> SpectrumGrid {
        let mut out = SpectrumGrid::zeros(1, self.size);
        for k1 in 0..self.size {
            for k2 in 0..self.half() {
                *out.get_mut(0, k1, k2) = f(k1, k2, spec.get(0, k1, k2));
            }
        }
        out
    }

    fn ddx(&self, spec: &SpectrumGrid) -> SpectrumGrid {
        self.map(spec, |_, k2, v| I * self.dx[k2] * v)
    }

    fn ddy(&self, spec: &SpectrumGrid) -> SpectrumGrid {
        self.map(spec, |k1, _, v| I * self.dy[k1] * v)
    }

    /// `ψ̂ = ω̂/|k|²`, zero mean.
    fn stream_function(&self, w: &SpectrumGrid) -> SpectrumGrid {
        self.map(w, |k1, k2, v| {
            let k2 = self.k2(k1, k2);
            if k2 == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                v / k2
            }
        })
    }

    /// `(u, v) = (ψ_y, −ψ_x)`.
    fn velocity_hat(&self, w: &SpectrumGrid) -> (SpectrumGrid, SpectrumGrid) {
        let psi = self.stream_function(w);
        let u = self.ddy(&psi);
        let v = self.map(&self.ddx(&psi), |_, _, z| -z);
        (u, v)
    }
}

fn stack(a: Tensor, b: Tensor) -> Tensor {
    let s = a.shape()[1];
    let mut data = a.into_data();
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[2, s, s], data).expect("stacked shape")
}

fn single(field: &Tensor, c: usize) -> Tensor {
    let s = field.shape()[1];
    Tensor::from_vec(&[1, s, s], field.channel(c).to_vec()).expect("channel shape")
}

/// Velocity `(2, S, S)` of a vorticity field `(1, S, S)`.
pub fn velocity_from_vorticity(omega: &Tensor) -> Result<Tensor> {
    let s = check_field(omega, 1)?;
    let k = Wavenumbers::new(s);
    let (u, v) = k.velocity_hat(&forward_rfft2(omega)?);
    Ok(stack(inverse_rfft2(&u), inverse_rfft2(&v)))
}

/// `ω = ∂v/∂x − ∂u/∂y` of a velocity field `(2, S, S)`.
pub fn vorticity_of(velocity: &Tensor) -> Result<Tensor> {
    let s = check_field(velocity, 2)?;
    let k = Wavenumbers::new(s);
    let u = forward_rfft2(&single(velocity, 0))?;
    let v = forward_rfft2(&single(velocity, 1))?;
    let vx = k.ddx(&v);
    let uy = k.ddy(&u);
    let w = k.map(&vx, |k1, k2, z| z - uy.get(0, k1, k2));
    Ok(inverse_rfft2(&w))
}

/// Largest `|∂u/∂x + ∂v/∂y|` on the grid, computed spectrally.
pub fn max_divergence(velocity: &Tensor) -> Result<f64> {
    let s = check_field(velocity, 2)?;
    let k = Wavenumbers::new(s);
    let u = forward_rfft2(&single(velocity, 0))?;
    let v = forward_rfft2(&single(velocity, 1))?;
    let ux = k.ddx(&u);
    let vy = k.ddy(&v);
    let div = inverse_rfft2(&k.map(&ux, |k1, k2, z| z + vy.get(0, k1, k2)));
    Ok(div.data().iter().fold(0.0, |m, &x| m.max(x.abs())))
}

/// Removes the compressible part of a velocity field:
/// `û ← û − k (k·û)/|k|²`.
pub fn helmholtz_project(velocity: &Tensor) -> Result<Tensor> {
    let s = check_field(velocity, 2)?;
    let k = Wavenumbers::new(s);
    let u = forward_rfft2(&single(velocity, 0))?;
    let v = forward_rfft2(&single(velocity, 1))?;
    let mut pu = SpectrumGrid::zeros(1, s);
    let mut pv = SpectrumGrid::zeros(1, s);
    for k1 in 0..s {
        for k2 in 0..k.half() {
            // Nyquist wavenumbers carry no derivative; project with the
            // same wavevector the divergence check uses.
            let (kx, ky) = (k.dx[k2], k.dy[k1]);
            let kk = kx * kx + ky * ky;
            let (a, b) = (u.get(0, k1, k2), v.get(0, k1, k2));
            if kk == 0.0 {
                *pu.get_mut(0, k1, k2) = a;
                *pv.get_mut(0, k1, k2) = b;
            } else {
                let dot = (a * kx + b * ky) / kk;
                *pu.get_mut(0, k1, k2) = a - dot * kx;
                *pv.get_mut(0, k1, k2) = b - dot * ky;
            }
        }
    }
    Ok(stack(inverse_rfft2(&pu), inverse_rfft2(&pv)))
}

/// `½⟨u² + v²⟩` of the velocity induced by `omega`.
pub fn kinetic_energy(omega: &Tensor) -> Result<f64> {
    let vel = velocity_from_vorticity(omega)?;
    Ok(0.5 * vel.data().iter().map(|x| x * x).sum::<f64>() / (omega.len() as f64))
}

/// `½⟨ω²⟩`.
pub fn enstrophy(omega: &Tensor) -> f64 {
    0.5 * omega.data().iter().map(|x| x * x).sum::<f64>() / omega.len() as f64
}

// ---------------------------------------------------------------------------
// Navier-Stokes

/// RK4 pseudo-spectral solver for `ω_t + u·∇ω = νΔω + f`.
pub struct NsSolver {
    k: Wavenumbers,
    nu: f64,
    dealias: Vec<bool>,
    forcing: Option<SpectrumGrid>,
}

/// One solver step and its CFL number `max|u|·Δt/h`.
#[derive(Debug, Clone)]
pub struct NsStep {
    pub omega: Tensor,
    pub cfl: f64,
}

impl NsStep {
    pub fn cfl_violated(&self) -> bool {
        self.cfl > 0.5
    }
}

impl NsSolver {
    pub fn new(size: usize, nu: f64, forcing: Option<Forcing>) -> Result<Self> {
        check_grid_size(size)?;
        if !(nu > 0.0 && nu.is_finite()) {
            return config_err(format!("viscosity must be positive, got {nu}"));
        }
        let k = Wavenumbers::new(size);
        let cut = size as f64 / 3.0;
        let mut dealias = Vec::with_capacity(size * k.half());
        for k1 in 0..size {
            for k2 in 0..k.half() {
                dealias.push(k.ky[k1].abs() < cut && k.kx[k2] < cut);
            }
        }
        let forcing = match forcing {
            Some(f) => Some(forward_rfft2(&f.field(size))?),
            None => None,
        };
        Ok(NsSolver {
            k,
            nu,
            dealias,
            forcing,
        })
    }

    pub fn size(&self) -> usize {
        self.k.size
    }

    fn rhs(&self, w: &SpectrumGrid) -> SpectrumGrid {
        let k = &self.k;
        let (uh, vh) = k.velocity_hat(w);
        let u = inverse_rfft2(&uh);
        let v = inverse_rfft2(&vh);
        let wx = inverse_rfft2(&k.ddx(w));
        let wy = inverse_rfft2(&k.ddy(w));
        let adv: Vec<f64> = (0..u.len())
            .map(|p| u.data()[p] * wx.data()[p] + v.data()[p] * wy.data()[p])
            .collect();
        let s = k.size;
        let adv = Tensor::from_vec(&[1, s, s], adv).expect("advection shape");
        let nh = crate::spectral::rfft2_unchecked(&adv, 1, s);
        let mut out = SpectrumGrid::zeros(1, s);
        let half = k.half();
        for k1 in 0..s {
            for k2 in 0..half {
                let idx = k1 * half + k2;
                let n = if self.dealias[idx] {
                    nh.get(0, k1, k2)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                let mut r = -n - w.get(0, k1, k2) * (self.nu * k.k2(k1, k2));
                if let Some(f) = &self.forcing {
                    r += f.get(0, k1, k2);
                }
                if k1 == 0 && k2 == 0 {
                    r = Complex64::new(0.0, 0.0);
                }
                *out.get_mut(0, k1, k2) = r;
            }
        }
        out
    }

    fn axpy(a: &SpectrumGrid, dt: f64, b: &SpectrumGrid) -> SpectrumGrid {
        let mut out = a.clone();
        for (o, &x) in out.coeffs_mut().iter_mut().zip(b.coeffs()) {
            *o += x * dt;
        }
        out
    }

    fn step_hat(&self, w: &SpectrumGrid, dt: f64) -> SpectrumGrid {
        let k1 = self.rhs(w);
        let k2 = self.rhs(&Self::axpy(w, 0.5 * dt, &k1));
        let k3 = self.rhs(&Self::axpy(w, 0.5 * dt, &k2));
        let k4 = self.rhs(&Self::axpy(w, dt, &k3));
        let mut out = w.clone();
        for (i, o) in out.coeffs_mut().iter_mut().enumerate() {
            *o += (k1.coeffs()[i] + (k2.coeffs()[i] + k3.coeffs()[i]) * 2.0 + k4.coeffs()[i])
                * (dt / 6.0);
        }
        out
    }

    fn max_speed(&self, w: &SpectrumGrid) -> f64 {
        let (uh, vh) = self.k.velocity_hat(w);
        let u = inverse_rfft2(&uh);
        let v = inverse_rfft2(&vh);
        u.data()
            .iter()
            .zip(v.data())
            .fold(0.0, |m, (a, b)| m.max((a * a + b * b).sqrt()))
    }

    fn cfl(&self, w: &SpectrumGrid, dt: f64) -> f64 {
        self.max_speed(w) * dt * self.size() as f64 / (2.0 * PI)
    }

    fn prepare(&self, omega: &Tensor) -> Result<SpectrumGrid> {
        let s = check_field(omega, 1)?;
        if s != self.size() {
            return Err(Error::Shape(format!(
                "solver grid is {}, field is {s}",
                self.size()
            )));
        }
        let mut w = forward_rfft2(omega)?;
        *w.get_mut(0, 0, 0) = Complex64::new(0.0, 0.0);
        Ok(w)
    }

    /// One RK4 step of size `dt`. The mean of `omega` is removed first.
    pub fn step(&self, omega: &Tensor, dt: f64) -> Result<NsStep> {
        let w = self.prepare(omega)?;
        let cfl = self.cfl(&w, dt);
        let next = inverse_rfft2(&self.step_hat(&w, dt));
        next.ensure_finite("vorticity")?;
        Ok(NsStep { omega: next, cfl })
    }

    /// Advances by `time` with equal substeps no larger than the CFL limit
    /// `cfl_target·h/max|u|` at the start of the interval. Returns the field
    /// and the number of substeps.
    pub fn advance(&self, omega: &Tensor, time: f64, cfl_target: f64) -> Result<(Tensor, usize)> {
        let mut w = self.prepare(omega)?;
        let h = 2.0 * PI / self.size() as f64;
        let umax = self.max_speed(&w).max(1e-12);
        let n = ((time * umax / (cfl_target * h)).ceil() as usize).max(1);
        let dt = time / n as f64;
        for _ in 0..n {
            w = self.step_hat(&w, dt);
        }
        let out = inverse_rfft2(&w);
        out.ensure_finite("vorticity")?;
        Ok((out, n))
    }
}

/// Single RK4 step of the vorticity equation.
pub fn ns_vorticity_step(
    omega: &Tensor,
    nu: f64,
    dt: f64,
    forcing: Option<Forcing>,
) -> Result<NsStep> {
    let s = check_field(omega, 1)?;
    let step = NsSolver::new(s, nu, forcing)?.step(omega, dt)?;
    if step.cfl_violated() {
        eprintln!(
            "warning: CFL number {:.3} exceeds 0.5 (dt = {dt})",
            step.cfl
        );
    }
    Ok(step)
}

// ---------------------------------------------------------------------------
// Initial conditions

/// One sinusoid `d·sin(k·x + φ)` of an initial velocity field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineMode {
    /// `(k_x, k_y)`.
    pub k: (i64, i64),
    pub direction: (f64, f64),
    pub phase: f64,
}

pub fn random_sine_modes(n: usize, kmax: i64, rng: &mut impl Rng) -> Vec<SineMode> {
    (0..n)
        .map(|_| {
            let k = loop {
                let k = (rng.gen_range(-kmax..=kmax), rng.gen_range(-kmax..=kmax));
                if k != (0, 0) {
                    break k;
                }
            };
            let theta = rng.gen_range(0.0..2.0 * PI);
            SineMode {
                k,
                direction: (theta.cos(), theta.sin()),
                phase: rng.gen_range(0.0..2.0 * PI),
            }
        })
        .collect()
}

/// `Σ v̄/|k|² · d·sin(k·x + φ)` on an `S x S` grid, shape `(2, S, S)`.
pub fn sine_velocity(size: usize, v_bar: f64, modes: &[SineMode]) -> Tensor {
    let mut t = Tensor::zeros(&[2, size, size]);
    let h = 2.0 * PI / size as f64;
    for m in modes {
        let (kx, ky) = (m.k.0 as f64, m.k.1 as f64);
        let amp = v_bar / (kx * kx + ky * ky);
        for i in 0..size {
            for j in 0..size {
                let s = (kx * h * j as f64 + ky * h * i as f64 + m.phase).sin() * amp;
                t.data_mut()[i * size + j] += m.direction.0 * s;
                t.data_mut()[size * size + i * size + j] += m.direction.1 * s;
            }
        }
    }
    t
}

#[derive(Debug, Clone)]
pub struct InitialCondition {
    pub modes: Vec<SineMode>,
    /// Divergence-free, `(2, S, S)`.
    pub velocity: Tensor,
    /// `(1, S, S)`.
    pub vorticity: Tensor,
}

/// Random sinusoidal velocity with wavenumber components up to `kmax`,
/// projected to be divergence-free.
pub fn turbulent_init(
    size: usize,
    n_modes: usize,
    v_bar: f64,
    kmax: i64,
    rng: &mut impl Rng,
) -> Result<InitialCondition> {
    let modes = random_sine_modes(n_modes, kmax, rng);
    init_from_modes(size, v_bar, modes)
}

pub fn init_from_modes(size: usize, v_bar: f64, modes: Vec<SineMode>) -> Result<InitialCondition> {
    check_grid_size(size)?;
    let velocity = helmholtz_project(&sine_velocity(size, v_bar, &modes))?;
    let vorticity = vorticity_of(&velocity)?;
    Ok(InitialCondition {
        modes,
        velocity,
        vorticity,
    })
}

// ---------------------------------------------------------------------------
// Datasets

/// Description of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeDatasetMeta {
    pub problem: Problem,
    pub grid_size: usize,
    pub channels: usize,
    pub viscosity: f64,
    /// Time between an input and its target.
    pub dt: f64,
    pub samples: usize,
    pub trajectory_len: usize,
    pub seed: u64,
    pub velocity_scale: f64,
    pub init_modes: usize,
    pub init_kmax: i64,
    /// Time simulated before the first recorded state.
    pub burn_in: f64,
    pub forcing: Option<Forcing>,
    pub cfl_target: f64,
    /// Largest solver substep count used for one sample interval.
    #[serde(default)]
    pub max_substeps: usize,
}

impl PdeDatasetMeta {
    pub fn heat(grid_size: usize, samples: usize, seed: u64) -> Self {
        PdeDatasetMeta {
            problem: Problem::Heat,
            grid_size,
            channels: 1,
            viscosity: 1e-2,
            dt: 1.0,
            samples,
            trajectory_len: 10,
            seed,
            velocity_scale: 1.0,
            init_modes: 4,
            init_kmax: 3,
            burn_in: 0.0,
            forcing: None,
            cfl_target: 0.4,
            max_substeps: 0,
        }
    }

    pub fn ns(grid_size: usize, samples: usize, seed: u64) -> Self {
        PdeDatasetMeta {
            problem: Problem::NsVorticity,
            viscosity: 1e-3,
            dt: 1.0,
            init_kmax: 4,
            burn_in: 10.0,
            ..Self::heat(grid_size, samples, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_grid_size(self.grid_size)?;
        if self.grid_size < 16 {
            return config_err(format!(
                "grid size must be at least 16, got {}",
                self.grid_size
            ));
        }
        if !(self.viscosity > 0.0)
            || !(self.dt > 0.0)
            || !(self.cfl_target > 0.0)
            || self.burn_in < 0.0
        {
            return config_err(
                "viscosity, dt and CFL target must be positive and burn-in non-negative",
            );
        }
        if self.channels != 1 {
            return config_err("only single-channel problems are generated");
        }
        if self.trajectory_len == 0
            || self.samples == 0
            || !self.samples.is_multiple_of(self.trajectory_len)
        {
            return config_err(format!(
                "samples ({}) must be a positive multiple of the trajectory length ({})",
                self.samples, self.trajectory_len
            ));
        }
        if self.trajectories() < 2 {
            return config_err("at least two trajectories are needed for a train/validation split");
        }
        if 2 * self.init_kmax as usize >= self.grid_size {
            return config_err("initial wavenumbers must be resolved by the grid");
        }
        Ok(())
    }

    pub fn trajectories(&self) -> usize {
        self.samples / self.trajectory_len
    }

    pub fn val_trajectories(&self) -> usize {
        ((self.trajectories() as f64 * 0.1).round() as usize).clamp(1, self.trajectories() - 1)
    }
}

/// Input/target pairs, ordered trajectory by trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeDataset {
    pub meta: PdeDatasetMeta,
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl PdeDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Sample indices of the training and validation trajectories (the last
    /// tenth of the trajectories, at least one).
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let n_val = self.meta.val_trajectories() * self.meta.trajectory_len;
        let cut = self.len() - n_val;
        ((0..cut).collect(), (cut..self.len()).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> PdeDataset {
        PdeDataset {
            meta: PdeDatasetMeta {
                samples: idx.len(),
                ..self.meta.clone()
            },
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }

    pub fn trajectory(&self, t: usize) -> std::ops::Range<usize> {
        let l = self.meta.trajectory_len;
        t * l..((t + 1) * l).min(self.len())
    }
}

struct Trajectory {
    inputs: Vec<Tensor>,
    targets: Vec<Tensor>,
    substeps: usize,
}

fn generate_trajectory(meta: &PdeDatasetMeta, t: usize) -> Result<Trajectory> {
    let mut rng = rng::substream(meta.seed, rng::DATA, t as u64);
    let init = turbulent_init(
        meta.grid_size,
        meta.init_modes,
        meta.velocity_scale,
        meta.init_kmax,
        &mut rng,
    )?;
    let mut state = init.vorticity;
    let mut inputs = Vec::with_capacity(meta.trajectory_len);
    let mut targets = Vec::with_capacity(meta.trajectory_len);
    let mut substeps = 0;
    match meta.problem {
        Problem::Heat => {
            state = heat_step_analytic(&state, meta.viscosity, meta.burn_in)?;
            for _ in 0..meta.trajectory_len {
                let next = heat_step_analytic(&state, meta.viscosity, meta.dt)?;
                inputs.push(std::mem::replace(&mut state, next.clone()));
                targets.push(next);
            }
        }
        Problem::NsVorticity => {
            let solver = NsSolver::new(meta.grid_size, meta.viscosity, meta.forcing)?;
            if meta.burn_in > 0.0 {
                state = solver.advance(&state, meta.burn_in, meta.cfl_target)?.0;
            }
            for _ in 0..meta.trajectory_len {
                let (next, n) = solver.advance(&state, meta.dt, meta.cfl_target)?;
                substeps = substeps.max(n);
                inputs.push(std::mem::replace(&mut state, next.clone()));
                targets.push(next);
            }
        }
    }
    Ok(Trajectory {
        inputs,
        targets,
        substeps,
    })
}

/// Deterministic given `meta`; trajectories are simulated in parallel and
/// assembled in order.
pub fn generate_dataset(meta: &PdeDatasetMeta) -> Result<PdeDataset> {
    meta.validate()?;
    let trajs = par::map(meta.trajectories(), |t| generate_trajectory(meta, t));
    let mut meta = meta.clone();
    let mut inputs = Vec::with_capacity(meta.samples);
    let mut targets = Vec::with_capacity(meta.samples);
    meta.max_substeps = 0;
    for t in trajs {
        let t = t?;
        meta.max_substeps = meta.max_substeps.max(t.substeps);
        inputs.extend(t.inputs);
        targets.extend(t.targets);
    }
    Ok(PdeDataset {
        meta,
        inputs,
        targets,
    })
}

/// Spectral resampling to `size`: truncation when coarsening, zero padding
/// when refining. The Nyquist row and column of the source are dropped.
pub fn resample(field: &Tensor, size: usize) -> Result<Tensor> {
    let (c, s, _) = field.dims3()?;
    check_field(field, c)?;
    check_grid_size(size)?;
    let spec = forward_rfft2(field)?;
    let keep = s.min(size) / 2;
    let mut out = SpectrumGrid::zeros(c, size);
    let scale = (size * size) as f64 / (s * s) as f64;
    for ch in 0..c {
        for k1 in 0..s {
            let ky = signed_wavenumber(k1, s);
            if ky.unsigned_abs() as usize >= keep {
                continue;
            }
            let r = if ky >= 0 {
                ky as usize
            } else {
                (size as i64 + ky) as usize
            };
            for k2 in 0..keep {
                *out.get_mut(ch, r, k2) = spec.get(ch, k1, k2) * scale;
            }
        }
    }
    Ok(inverse_rfft2(&out))
}
