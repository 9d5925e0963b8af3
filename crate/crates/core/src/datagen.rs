//! Reference trajectory generation and dataset preparation.
//!
//! The solvers here are deliberately independent of the tape: plain f64
//! loops with hard-coded fourth-order stencils for the reaction-diffusion
//! and Burgers references, and a dealiased pseudo-spectral vorticity solver
//! for Navier-Stokes. They produce the labels the coarse model trains on
//! and serve as oracles in tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_records_from_file, write_records_to_file, AnyTensor};
use crate::pde::{ForcingSpec, Grid, SystemKind, SystemSpec, Trig};
use crate::tensor::Tensor;

/// A time-major stack of snapshots plus everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    /// `[n_t, channels, H, W]`
    pub fields: Tensor<f64>,
    /// Interval between consecutive snapshots (seconds).
    pub dt: f64,
    /// Square domain extent.
    pub domain: f64,
    pub system: SystemSpec,
    pub forcing: ForcingSpec,
    pub seed: u64,
    pub channel_names: Vec<String>,
    /// Original snapshot indices; present after sparsification.
    pub time_indices: Option<Vec<u64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryMeta {
    system: SystemSpec,
    forcing: ForcingSpec,
    dt: f64,
    domain: f64,
    seed: u64,
    channels: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    time_indices: Option<Vec<u64>>,
}

impl TrajectorySet {
    pub fn n_snapshots(&self) -> usize {
        self.fields.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.fields.shape()[1]
    }

    pub fn grid_size(&self) -> usize {
        self.fields.shape()[2]
    }

    /// Borrow of snapshot `t` as a flat `[C * H * W]` slice.
    pub fn snapshot(&self, t: usize) -> &[f64] {
        let len: usize = self.fields.shape()[1..].iter().product();
        &self.fields.data()[t * len..(t + 1) * len]
    }

    pub fn snapshot_tensor(&self, t: usize) -> Tensor<f64> {
        let shape = &self.fields.shape()[1..];
        Tensor::from_vec(shape, self.snapshot(t).to_vec()).expect("shape agrees")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = TrajectoryMeta {
            system: self.system,
            forcing: self.forcing,
            dt: self.dt,
            domain: self.domain,
            seed: self.seed,
            channels: self.channel_names.clone(),
            time_indices: self.time_indices.clone(),
        };
        let meta = serde_json::to_value(&meta)
            .map_err(|e| Error::Format(format!("trajectory metadata: {e}")))?;
        write_records_to_file(path, &[(AnyTensor::from_tensor(&self.fields), meta)])
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let records = read_records_from_file(path)?;
        let rec = records
            .first()
            .ok_or_else(|| Error::Format(format!("{}: empty GCT1 file", path.display())))?;
        let meta: TrajectoryMeta = serde_json::from_value(rec.metadata.clone())
            .map_err(|e| Error::Format(format!("{}: metadata: {e}", path.display())))?;
        let fields: Tensor<f64> = rec.tensor.into_tensor();
        if fields.shape().len() != 4 {
            return Err(Error::RankMismatch {
                expected: "4D trajectory",
                got: fields.shape().to_vec(),
            });
        }
        Ok(TrajectorySet {
            fields,
            dt: meta.dt,
            domain: meta.domain,
            system: meta.system,
            forcing: meta.forcing,
            seed: meta.seed,
            channel_names: meta.channels,
            time_indices: meta.time_indices,
        })
    }
}

/// Smooth band-limited random periodic field per channel, amplitude-normalised
/// to [-1, 1]. Deterministic per seed.
pub fn generate_ic(system: &SystemSpec, grid: &Grid, seed: u64) -> Tensor<f64> {
    generate_ic_with(system, grid, seed, 8, 1.0)
}

/// [`generate_ic`] with explicit band limit and peak amplitude, for dataset
/// recipes that need gentler gradients.
pub fn generate_ic_with(
    system: &SystemSpec,
    grid: &Grid,
    seed: u64,
    max_mode: usize,
    amplitude: f64,
) -> Tensor<f64> {
    let n = grid.size;
    let channels = system.channels();
    let kmax = max_mode.min(n / 2 - 1).max(1) as i32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Tensor::zeros(&[channels, n, n]);
    let tau = std::f64::consts::TAU;
    for ch in 0..channels {
        // Random cosine modes over a half-plane of wavenumbers: exactly
        // periodic by construction.
        let mut modes = Vec::new();
        for k2 in 0..=kmax {
            let k1_lo = if k2 == 0 { 1 } else { -kmax };
            for k1 in k1_lo..=kmax {
                let amp: f64 = rng.sample(StandardNormal);
                let phase: f64 = rng.gen_range(0.0..tau);
                modes.push((k1, k2, amp, phase));
            }
        }
        let plane = &mut out.data_mut()[ch * n * n..(ch + 1) * n * n];
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (j as f64 / n as f64, i as f64 / n as f64);
                let mut acc = 0.0;
                for &(k1, k2, amp, phase) in &modes {
                    acc += amp * (tau * (k1 as f64 * x + k2 as f64 * y) + phase).cos();
                }
                plane[i * n + j] = acc;
            }
        }
        let max = plane.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        if max > 0.0 {
            plane.iter_mut().for_each(|v| *v = *v / max * amplitude);
        }
    }
    out
}

/// High-resolution simulation recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRecipe {
    pub dt_sim: f64,
    /// Simulated seconds discarded before the first recorded snapshot.
    pub warmup: f64,
    pub n_snapshots: usize,
    /// Simulation steps between recorded snapshots.
    pub record_every: usize,
}

fn max_abs(data: &[f64]) -> f64 {
    data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

/// Explicit stability bounds: diffusive `dt <= 0.5 * dx^2 / (4 D_max)` and,
/// for advective systems, `dt <= 0.5 * dx / max |u_0|`.
pub fn stability_limit(system: &SystemSpec, grid: &Grid, ic: &Tensor<f64>) -> f64 {
    let dx = grid.dx();
    let diffusive = 0.5 * dx * dx / (4.0 * system.max_diffusion());
    match system.kind() {
        SystemKind::Burgers | SystemKind::NavierStokes => {
            let umax = max_abs(ic.data()).max(1e-12);
            diffusive.min(0.5 * dx / umax)
        }
        _ => diffusive,
    }
}

fn check_stability(system: &SystemSpec, grid: &Grid, ic: &Tensor<f64>, dt: f64) -> Result<()> {
    let limit = stability_limit(system, grid, ic);
    if dt > limit {
        return Err(Error::Unstable {
            dt,
            limit,
            kind: match system.kind() {
                SystemKind::Burgers | SystemKind::NavierStokes => "advective/diffusive",
                _ => "diffusive",
            },
        });
    }
    Ok(())
}

// ---- fourth-order finite differences on the torus -------------------------

const D1: [f64; 5] = [1.0 / 12.0, -2.0 / 3.0, 0.0, 2.0 / 3.0, -1.0 / 12.0];
const D2: [f64; 5] = [-1.0 / 12.0, 4.0 / 3.0, -5.0 / 2.0, 4.0 / 3.0, -1.0 / 12.0];

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
}

fn apply_stencil(src: &[f64], out: &mut [f64], n: usize, coeffs: &[f64; 5], axis: Axis, scale: f64) {
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (t, &c) in coeffs.iter().enumerate() {
                let o = t as isize - 2;
                let (si, sj) = match axis {
                    Axis::X => (i, (j as isize + o).rem_euclid(n as isize) as usize),
                    Axis::Y => ((i as isize + o).rem_euclid(n as isize) as usize, j),
                };
                acc += c * src[si * n + sj];
            }
            out[i * n + j] = acc * scale;
        }
    }
}

struct FdScratch {
    dx1: Vec<f64>,
    dy1: Vec<f64>,
    lap: Vec<f64>,
    tmp: Vec<f64>,
}

impl FdScratch {
    fn new(n: usize) -> Self {
        FdScratch {
            dx1: vec![0.0; n * n],
            dy1: vec![0.0; n * n],
            lap: vec![0.0; n * n],
            tmp: vec![0.0; n * n],
        }
    }
}

/// RHS of the FD systems into `out`, channel-major `[2, n, n]`.
fn fd_rhs(system: &SystemSpec, grid: &Grid, state: &[f64], out: &mut [f64], s: &mut FdScratch) {
    let n = grid.size;
    let plane = n * n;
    let dx = grid.dx();
    let inv_dx = 1.0 / dx;
    let inv_dx2 = 1.0 / (dx * dx);
    let (u, v) = state.split_at(plane);
    match *system {
        SystemSpec::Burgers { nu } => {
            for ch in 0..2 {
                let f = &state[ch * plane..(ch + 1) * plane];
                apply_stencil(f, &mut s.dx1, n, &D1, Axis::X, inv_dx);
                apply_stencil(f, &mut s.dy1, n, &D1, Axis::Y, inv_dx);
                apply_stencil(f, &mut s.lap, n, &D2, Axis::X, inv_dx2);
                apply_stencil(f, &mut s.tmp, n, &D2, Axis::Y, inv_dx2);
                let o = &mut out[ch * plane..(ch + 1) * plane];
                for p in 0..plane {
                    o[p] = nu * (s.lap[p] + s.tmp[p]) - (u[p] * s.dx1[p] + v[p] * s.dy1[p]);
                }
            }
        }
        SystemSpec::GrayScott { du, dv, f, kappa } => {
            apply_stencil(u, &mut s.lap, n, &D2, Axis::X, inv_dx2);
            apply_stencil(u, &mut s.tmp, n, &D2, Axis::Y, inv_dx2);
            for p in 0..plane {
                let uvv = u[p] * v[p] * v[p];
                out[p] = du * (s.lap[p] + s.tmp[p]) - uvv + f * (1.0 - u[p]);
            }
            apply_stencil(v, &mut s.lap, n, &D2, Axis::X, inv_dx2);
            apply_stencil(v, &mut s.tmp, n, &D2, Axis::Y, inv_dx2);
            for p in 0..plane {
                let uvv = u[p] * v[p] * v[p];
                out[plane + p] = dv * (s.lap[p] + s.tmp[p]) + uvv - (f + kappa) * v[p];
            }
        }
        SystemSpec::FitzhughNagumo { gamma, alpha, beta } => {
            apply_stencil(u, &mut s.lap, n, &D2, Axis::X, inv_dx2);
            apply_stencil(u, &mut s.tmp, n, &D2, Axis::Y, inv_dx2);
            for p in 0..plane {
                out[p] = gamma * (s.lap[p] + s.tmp[p]) + u[p] - u[p].powi(3) - v[p] + alpha;
            }
            apply_stencil(v, &mut s.lap, n, &D2, Axis::X, inv_dx2);
            apply_stencil(v, &mut s.tmp, n, &D2, Axis::Y, inv_dx2);
            for p in 0..plane {
                out[plane + p] = gamma * (s.lap[p] + s.tmp[p]) + beta * (u[p] - v[p]);
            }
        }
        SystemSpec::NavierStokes { .. } => unreachable!("NS uses the spectral reference"),
    }
}

fn fd_simulate(
    system: &SystemSpec,
    grid: &Grid,
    ic: &Tensor<f64>,
    recipe: &SimRecipe,
) -> Result<Vec<f64>> {
    let n = grid.size;
    let plane = n * n;
    let len = 2 * plane;
    let dt = recipe.dt_sim;
    let mut state = ic.data().to_vec();
    let mut s = FdScratch::new(n);
    let mut k1 = vec![0.0; len];
    let mut k2 = vec![0.0; len];
    let mut k3 = vec![0.0; len];
    let mut k4 = vec![0.0; len];
    let mut stage = vec![0.0; len];

    let warm_steps = (recipe.warmup / dt).round() as usize;
    let total = warm_steps + (recipe.n_snapshots.saturating_sub(1)) * recipe.record_every;
    let mut recorded = Vec::with_capacity(recipe.n_snapshots * len);

    let record = |state: &[f64], out: &mut Vec<f64>, step: usize| -> Result<()> {
        if !state.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                step,
                max_abs: f64::NAN,
                threshold: f64::INFINITY,
            });
        }
        out.extend_from_slice(state);
        Ok(())
    };

    for step in 0..=total {
        if step >= warm_steps && (step - warm_steps).is_multiple_of(recipe.record_every) {
            record(&state, &mut recorded, step)?;
            if recorded.len() == recipe.n_snapshots * len {
                break;
            }
        }
        fd_rhs(system, grid, &state, &mut k1, &mut s);
        for p in 0..len {
            stage[p] = state[p] + 0.5 * dt * k1[p];
        }
        fd_rhs(system, grid, &stage, &mut k2, &mut s);
        for p in 0..len {
            stage[p] = state[p] + 0.5 * dt * k2[p];
        }
        fd_rhs(system, grid, &stage, &mut k3, &mut s);
        for p in 0..len {
            stage[p] = state[p] + dt * k3[p];
        }
        fd_rhs(system, grid, &stage, &mut k4, &mut s);
        for p in 0..len {
            state[p] += dt / 6.0 * (k1[p] + 2.0 * k2[p] + 2.0 * k3[p] + k4[p]);
        }
    }
    if recorded.len() < recipe.n_snapshots * len {
        record(&state, &mut recorded, total + 1)?;
    }
    Ok(recorded)
}

// ---- pseudo-spectral Navier-Stokes reference -------------------------------

struct SpectralNs {
    n: usize,
    re: f64,
    drag: f64,
    kx: Vec<f64>,
    ky: Vec<f64>,
    curl_f: Vec<Complex<f64>>,
    dealias: Vec<bool>,
    planner: rustfft::FftPlanner<f64>,
}

impl SpectralNs {
    fn new(n: usize, re: f64, forcing: &ForcingSpec, extent: f64) -> Self {
        let wave = |k: usize| -> f64 {
            let signed = if k <= n / 2 { k as i64 } else { k as i64 - n as i64 };
            std::f64::consts::TAU * signed as f64 / extent
        };
        let kx: Vec<f64> = (0..n).map(wave).collect();
        let ky = kx.clone();
        // curl of the sinusoidal profile: -d/dy [amp * trig(k y)]
        let mut curl_phys = vec![0.0; n * n];
        let mut drag = 0.0;
        if let ForcingSpec::Kolmogorov {
            trig,
            wavenumber,
            amplitude,
            drag: d,
        } = *forcing
        {
            drag = d;
            let kf = wavenumber as f64;
            for i in 0..n {
                let y = extent * i as f64 / n as f64;
                let dval = match trig {
                    Trig::Sin => -amplitude * kf * (kf * y).cos(),
                    Trig::Cos => amplitude * kf * (kf * y).sin(),
                };
                for j in 0..n {
                    curl_phys[i * n + j] = dval;
                }
            }
        }
        let mut planner = rustfft::FftPlanner::new();
        let mut curl_f: Vec<Complex<f64>> =
            curl_phys.iter().map(|&v| Complex::new(v, 0.0)).collect();
        fft2_inplace(&mut planner, &mut curl_f, n, false);
        // 2/3-rule mask on the square of retained modes.
        let cutoff = n as f64 / 3.0;
        let idx_abs = |k: usize| -> f64 {
            let signed = if k <= n / 2 { k as i64 } else { k as i64 - n as i64 };
            signed.unsigned_abs() as f64
        };
        let mut dealias = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                dealias[i * n + j] = idx_abs(i) < cutoff && idx_abs(j) < cutoff;
            }
        }
        SpectralNs {
            n,
            re,
            drag,
            kx,
            ky,
            curl_f,
            dealias,
            planner,
        }
    }

    /// d(omega_hat)/dt.
    fn rhs(&mut self, w_hat: &[Complex<f64>], out: &mut [Complex<f64>]) {
        let n = self.n;
        let mut u = vec![Complex::new(0.0, 0.0); n * n];
        let mut v = vec![Complex::new(0.0, 0.0); n * n];
        let mut wx = vec![Complex::new(0.0, 0.0); n * n];
        let mut wy = vec![Complex::new(0.0, 0.0); n * n];
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                let k2 = self.kx[j] * self.kx[j] + self.ky[i] * self.ky[i];
                let psi = if k2 == 0.0 { Complex::new(0.0, 0.0) } else { w_hat[p] / k2 };
                u[p] = Complex::new(0.0, self.ky[i]) * psi;
                v[p] = -Complex::new(0.0, self.kx[j]) * psi;
                wx[p] = Complex::new(0.0, self.kx[j]) * w_hat[p];
                wy[p] = Complex::new(0.0, self.ky[i]) * w_hat[p];
            }
        }
        for buf in [&mut u, &mut v, &mut wx, &mut wy] {
            fft2_inplace(&mut self.planner, buf, n, true);
        }
        let norm = 1.0 / (n * n) as f64;
        let mut adv = vec![Complex::new(0.0, 0.0); n * n];
        for p in 0..n * n {
            let ur = u[p].re * norm;
            let vr = v[p].re * norm;
            let wxr = wx[p].re * norm;
            let wyr = wy[p].re * norm;
            adv[p] = Complex::new(-(ur * wxr + vr * wyr), 0.0);
        }
        fft2_inplace(&mut self.planner, &mut adv, n, false);
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                let k2 = self.kx[j] * self.kx[j] + self.ky[i] * self.ky[i];
                let nlin = if self.dealias[p] { adv[p] } else { Complex::new(0.0, 0.0) };
                out[p] = nlin + self.curl_f[p] - w_hat[p] * (self.drag + k2 / self.re);
            }
        }
    }

    /// Physical (u, v) from the vorticity spectrum.
    fn velocity(&mut self, w_hat: &[Complex<f64>], out: &mut [f64]) {
        let n = self.n;
        let mut u = vec![Complex::new(0.0, 0.0); n * n];
        let mut v = vec![Complex::new(0.0, 0.0); n * n];
        for i in 0..n {
            for j in 0..n {
                let p = i * n + j;
                let k2 = self.kx[j] * self.kx[j] + self.ky[i] * self.ky[i];
                let psi = if k2 == 0.0 { Complex::new(0.0, 0.0) } else { w_hat[p] / k2 };
                u[p] = Complex::new(0.0, self.ky[i]) * psi;
                v[p] = -Complex::new(0.0, self.kx[j]) * psi;
            }
        }
        fft2_inplace(&mut self.planner, &mut u, n, true);
        fft2_inplace(&mut self.planner, &mut v, n, true);
        let norm = 1.0 / (n * n) as f64;
        for p in 0..n * n {
            out[p] = u[p].re * norm;
            out[n * n + p] = v[p].re * norm;
        }
    }
}

fn fft2_inplace(
    planner: &mut rustfft::FftPlanner<f64>,
    buf: &mut [Complex<f64>],
    n: usize,
    inverse: bool,
) {
    let dir = if inverse {
        rustfft::FftDirection::Inverse
    } else {
        rustfft::FftDirection::Forward
    };
    let fft = planner.plan_fft(n, dir);
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = buf[i * n + j];
        }
        fft.process(&mut col);
        for i in 0..n {
            buf[i * n + j] = col[i];
        }
    }
}

fn ns_simulate(
    re: f64,
    forcing: &ForcingSpec,
    grid: &Grid,
    ic: &Tensor<f64>,
    recipe: &SimRecipe,
) -> Result<Vec<f64>> {
    let n = grid.size;
    let plane = n * n;
    let mut solver = SpectralNs::new(n, re, forcing, grid.extent);

    // Vorticity spectrum from the velocity IC: w = dv/dx - du/dy.
    let mut u: Vec<Complex<f64>> = ic.data()[..plane]
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .collect();
    let mut v: Vec<Complex<f64>> = ic.data()[plane..2 * plane]
        .iter()
        .map(|&x| Complex::new(x, 0.0))
        .collect();
    fft2_inplace(&mut solver.planner, &mut u, n, false);
    fft2_inplace(&mut solver.planner, &mut v, n, false);
    let mut w_hat = vec![Complex::new(0.0, 0.0); plane];
    for i in 0..n {
        for j in 0..n {
            let p = i * n + j;
            w_hat[p] = Complex::new(0.0, solver.kx[j]) * v[p] - Complex::new(0.0, solver.ky[i]) * u[p];
        }
    }

    let dt = recipe.dt_sim;
    let warm_steps = (recipe.warmup / dt).round() as usize;
    let total = warm_steps + (recipe.n_snapshots.saturating_sub(1)) * recipe.record_every;
    let mut recorded = Vec::with_capacity(recipe.n_snapshots * 2 * plane);
    let mut snapshot = vec![0.0; 2 * plane];

    let mut k1 = vec![Complex::new(0.0, 0.0); plane];
    let mut k2 = vec![Complex::new(0.0, 0.0); plane];
    let mut k3 = vec![Complex::new(0.0, 0.0); plane];
    let mut k4 = vec![Complex::new(0.0, 0.0); plane];
    let mut stage = vec![Complex::new(0.0, 0.0); plane];

    for step in 0..=total {
        if step >= warm_steps && (step - warm_steps).is_multiple_of(recipe.record_every) {
            solver.velocity(&w_hat, &mut snapshot);
            if !snapshot.iter().all(|x| x.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    max_abs: f64::NAN,
                    threshold: f64::INFINITY,
                });
            }
            recorded.extend_from_slice(&snapshot);
            if recorded.len() == recipe.n_snapshots * 2 * plane {
                break;
            }
        }
        solver.rhs(&w_hat, &mut k1);
        for p in 0..plane {
            stage[p] = w_hat[p] + k1[p] * (0.5 * dt);
        }
        solver.rhs(&stage, &mut k2);
        for p in 0..plane {
            stage[p] = w_hat[p] + k2[p] * (0.5 * dt);
        }
        solver.rhs(&stage, &mut k3);
        for p in 0..plane {
            stage[p] = w_hat[p] + k3[p] * dt;
        }
        solver.rhs(&stage, &mut k4);
        for p in 0..plane {
            w_hat[p] += (k1[p] + (k2[p] + k3[p]) * 2.0 + k4[p]) * (dt / 6.0);
        }
    }
    Ok(recorded)
}

/// Fixed-stencil reference trajectory with warm-up discard. Records
/// `n_snapshots` states spaced `record_every` simulation steps apart.
pub fn simulate_reference(
    system: &SystemSpec,
    forcing: &ForcingSpec,
    grid: &Grid,
    ic: &Tensor<f64>,
    recipe: &SimRecipe,
    seed: u64,
) -> Result<TrajectorySet> {
    system.validate()?;
    if recipe.dt_sim <= 0.0 {
        return Err(Error::NonPositive {
            name: "dt_sim",
            value: recipe.dt_sim,
        });
    }
    if recipe.record_every == 0 || recipe.n_snapshots == 0 {
        return Err(Error::Config("recipe needs record_every >= 1 and n_snapshots >= 1".into()));
    }
    let (c, h, w) = ic.as_planes()?;
    if c != system.channels() || h != grid.size || w != grid.size {
        return Err(Error::ShapeMismatch {
            left: ic.shape().to_vec(),
            right: vec![system.channels(), grid.size, grid.size],
        });
    }
    check_stability(system, grid, ic, recipe.dt_sim)?;

    let data = match system.kind() {
        SystemKind::NavierStokes => {
            let SystemSpec::NavierStokes { re } = *system else { unreachable!() };
            ns_simulate(re, forcing, grid, ic, recipe)?
        }
        _ => fd_simulate(system, grid, ic, recipe)?,
    };
    let fields = Tensor::from_vec(&[recipe.n_snapshots, 2, grid.size, grid.size], data)?;
    Ok(TrajectorySet {
        fields,
        dt: recipe.dt_sim * recipe.record_every as f64,
        domain: grid.extent,
        system: *system,
        forcing: *forcing,
        seed,
        channel_names: system.channel_names(),
        time_indices: None,
    })
}

/// Strided point sampling in space and time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownsampleSpec {
    pub space_stride: usize,
    pub time_stride: usize,
}

pub fn downsample(traj: &TrajectorySet, spec: &DownsampleSpec) -> Result<TrajectorySet> {
    if traj.time_indices.is_some() {
        return Err(Error::Config("downsample before sparsify, not after".into()));
    }
    let [n_t, c, h, w] = traj.fields.shape() else {
        return Err(Error::RankMismatch {
            expected: "4D trajectory",
            got: traj.fields.shape().to_vec(),
        });
    };
    let (n_t, c, h, w) = (*n_t, *c, *h, *w);
    for (stride, extent, axis) in [
        (spec.space_stride, h, "space"),
        (spec.time_stride, n_t, "time"),
    ] {
        if stride == 0 || extent % stride != 0 {
            return Err(Error::StrideMismatch {
                stride,
                extent,
                axis,
            });
        }
    }
    let (ht, wt) = (h / spec.space_stride, w / spec.space_stride);
    let nt_out = n_t / spec.time_stride;
    let mut out = Tensor::zeros(&[nt_out, c, ht, wt]);
    {
        let src = traj.fields.data();
        let dst = out.data_mut();
        for t in 0..nt_out {
            for ch in 0..c {
                for i in 0..ht {
                    for j in 0..wt {
                        let sp = ((t * spec.time_stride * c + ch) * h + i * spec.space_stride) * w
                            + j * spec.space_stride;
                        dst[((t * c + ch) * ht + i) * wt + j] = src[sp];
                    }
                }
            }
        }
    }
    Ok(TrajectorySet {
        fields: out,
        dt: traj.dt * spec.time_stride as f64,
        domain: traj.domain,
        system: traj.system,
        forcing: traj.forcing,
        seed: traj.seed,
        channel_names: traj.channel_names.clone(),
        time_indices: None,
    })
}

/// Additive Gaussian label noise: `x + scale * std(x_channel) * N(0,1)`.
pub fn add_noise(traj: &TrajectorySet, scale: f64, seed: u64) -> TrajectorySet {
    let mut out = traj.clone();
    if scale == 0.0 {
        return out;
    }
    let [n_t, c, h, w] = traj.fields.shape() else { return out };
    let (n_t, c, plane) = (*n_t, *c, h * w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ch in 0..c {
        // std over the whole channel across time
        let mut mean = 0.0;
        let mut count = 0.0;
        for t in 0..n_t {
            let s = &traj.fields.data()[(t * c + ch) * plane..(t * c + ch + 1) * plane];
            mean += s.iter().sum::<f64>();
            count += plane as f64;
        }
        mean /= count;
        let mut var = 0.0;
        for t in 0..n_t {
            let s = &traj.fields.data()[(t * c + ch) * plane..(t * c + ch + 1) * plane];
            var += s.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>();
        }
        let std = (var / count).sqrt();
        let sigma = scale * std;
        for t in 0..n_t {
            let s = &mut out.fields.data_mut()[(t * c + ch) * plane..(t * c + ch + 1) * plane];
            for x in s.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *x += sigma * z;
            }
        }
    }
    out
}

/// Randomly drops whole rollout-length blocks of snapshots. The surviving
/// blocks stay contiguous and their original time indices are recorded.
pub fn sparsify(
    traj: &TrajectorySet,
    drop_fraction: f64,
    rollout_len: usize,
    seed: u64,
) -> Result<TrajectorySet> {
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::Config(format!(
            "drop_fraction must be in [0, 1), got {drop_fraction}"
        )));
    }
    if rollout_len == 0 {
        return Err(Error::NonPositive {
            name: "rollout_len",
            value: 0.0,
        });
    }
    let n_t = traj.n_snapshots();
    let blocks = n_t / rollout_len;
    let to_drop = (drop_fraction * blocks as f64).round() as usize;
    if to_drop >= blocks {
        return Err(Error::SparsifyTooAggressive {
            requested: to_drop,
            available: blocks,
        });
    }
    if to_drop == 0 {
        return Ok(traj.clone());
    }
    let mut order: Vec<usize> = (0..blocks).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // partial Fisher-Yates: the first `to_drop` entries are the dropped blocks
    for i in 0..to_drop {
        let j = rng.gen_range(i..blocks);
        order.swap(i, j);
    }
    let dropped: std::collections::HashSet<usize> = order[..to_drop].iter().copied().collect();

    let snap_len: usize = traj.fields.shape()[1..].iter().product();
    let kept_blocks: Vec<usize> = (0..blocks).filter(|b| !dropped.contains(b)).collect();
    let mut data = Vec::with_capacity(kept_blocks.len() * rollout_len * snap_len);
    let mut time_indices = Vec::new();
    for &b in &kept_blocks {
        for t in b * rollout_len..(b + 1) * rollout_len {
            data.extend_from_slice(traj.snapshot(t));
            time_indices.push(t as u64);
        }
    }
    let mut shape = traj.fields.shape().to_vec();
    shape[0] = kept_blocks.len() * rollout_len;
    Ok(TrajectorySet {
        fields: Tensor::from_vec(&shape, data)?,
        dt: traj.dt,
        domain: traj.domain,
        system: traj.system,
        forcing: traj.forcing,
        seed: traj.seed,
        channel_names: traj.channel_names.clone(),
        time_indices: Some(time_indices),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn burgers_grid(n: usize) -> Grid {
        Grid::new(n, 1.0)
    }

    #[test]
    fn ic_is_deterministic_and_distinct_across_seeds() {
        let spec = SystemSpec::burgers_default();
        let grid = burgers_grid(48);
        let a = generate_ic(&spec, &grid, 9);
        let b = generate_ic(&spec, &grid, 9);
        assert_eq!(a, b);
        let c = generate_ic(&spec, &grid, 10);
        let dist: f64 = a
            .data()
            .iter()
            .zip(c.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(dist > 0.0);
        assert!(max_abs(a.data()) <= 1.0 + 1e-12);
        assert!((max_abs(a.data()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_ic_stays_zero_for_burgers() {
        let spec = SystemSpec::burgers_default();
        let grid = burgers_grid(32);
        let ic = Tensor::zeros(&[2, 32, 32]);
        let recipe = SimRecipe {
            dt_sim: 1e-3,
            warmup: 0.0,
            n_snapshots: 5,
            record_every: 10,
        };
        let traj = simulate_reference(&spec, &ForcingSpec::None, &grid, &ic, &recipe, 0).unwrap();
        assert!(traj.fields.data().iter().all(|&x| x == 0.0));
        assert_eq!(traj.n_snapshots(), 5);
    }

    #[test]
    fn burgers_kinetic_energy_decays() {
        let spec = SystemSpec::burgers_default();
        let grid = burgers_grid(64);
        // gentle gradients so the 64^2 grid fully resolves the viscous fronts
        let ic = generate_ic_with(&spec, &grid, 3, 4, 0.3);
        let recipe = SimRecipe {
            dt_sim: 1e-3,
            warmup: 0.0,
            n_snapshots: 6,
            record_every: 20,
        };
        let traj = simulate_reference(&spec, &ForcingSpec::None, &grid, &ic, &recipe, 3).unwrap();
        let energy: Vec<f64> = (0..traj.n_snapshots())
            .map(|t| traj.snapshot(t).iter().map(|&x| x * x).sum())
            .collect();
        for w in energy.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "energy grew: {energy:?}");
        }
    }

    #[test]
    fn unstable_time_step_is_rejected_with_limit() {
        let spec = SystemSpec::burgers_default();
        let grid = burgers_grid(64);
        let ic = generate_ic(&spec, &grid, 1);
        let recipe = SimRecipe {
            dt_sim: 0.5,
            warmup: 0.0,
            n_snapshots: 2,
            record_every: 1,
        };
        match simulate_reference(&spec, &ForcingSpec::None, &grid, &ic, &recipe, 1) {
            Err(Error::Unstable { limit, .. }) => assert!(limit < 0.5),
            other => panic!("expected stability error, got {other:?}"),
        }
    }

    #[test]
    fn warmup_discards_initial_snapshots() {
        let spec = SystemSpec::burgers_default();
        let grid = burgers_grid(32);
        let ic = generate_ic(&spec, &grid, 7);
        let with_warm = SimRecipe {
            dt_sim: 1e-3,
            warmup: 0.01,
            n_snapshots: 1,
            record_every: 1,
        };
        let plain = SimRecipe {
            dt_sim: 1e-3,
            warmup: 0.0,
            n_snapshots: 11,
            record_every: 1,
        };
        let a = simulate_reference(&spec, &ForcingSpec::None, &grid, &ic, &with_warm, 7).unwrap();
        let b = simulate_reference(&spec, &ForcingSpec::None, &grid, &ic, &plain, 7).unwrap();
        // snapshot 0 after 10 warm-up steps equals snapshot 10 of the plain run
        for (x, y) in a.snapshot(0).iter().zip(b.snapshot(10)) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn grid_refinement_self_consistency() {
        let spec = SystemSpec::burgers_default();
        let fine_grid = burgers_grid(256);
        let ic_fine = generate_ic_with(&spec, &fine_grid, 5, 8, 0.1);
        let fine_traj = TrajectorySet {
            fields: Tensor::from_vec(
                &[1, 2, 256, 256],
                ic_fine.data().to_vec(),
            )
            .unwrap(),
            dt: 0.0,
            domain: 1.0,
            system: spec,
            forcing: ForcingSpec::None,
            seed: 5,
            channel_names: spec.channel_names(),
            time_indices: None,
        };
        let coarse_ic_traj = downsample(
            &fine_traj,
            &DownsampleSpec {
                space_stride: 2,
                time_stride: 1,
            },
        )
        .unwrap();
        let ic_coarse = coarse_ic_traj.snapshot_tensor(0);

        let recipe = SimRecipe {
            dt_sim: 5e-4,
            warmup: 0.0,
            n_snapshots: 2,
            record_every: 200, // 0.1 s apart
        };
        let fine = simulate_reference(&spec, &ForcingSpec::None, &fine_grid, &ic_fine, &recipe, 5)
            .unwrap();
        let coarse = simulate_reference(
            &spec,
            &ForcingSpec::None,
            &burgers_grid(128),
            &ic_coarse,
            &recipe,
            5,
        )
        .unwrap();
        let restricted = downsample(
            &fine,
            &DownsampleSpec {
                space_stride: 2,
                time_stride: 1,
            },
        )
        .unwrap();
        let mut worst = 0.0f64;
        for (a, b) in restricted.snapshot(1).iter().zip(coarse.snapshot(1)) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst < 1e-4, "worst {worst}");
    }

    #[test]
    fn ns_reference_conserves_reasonable_energy_and_records_velocity() {
        let spec = SystemSpec::NavierStokes { re: 1000.0 };
        let grid = Grid::new(64, std::f64::consts::TAU);
        let ic = generate_ic(&spec, &grid, 11);
        let recipe = SimRecipe {
            dt_sim: 2e-3,
            warmup: 0.0,
            n_snapshots: 4,
            record_every: 25,
        };
        let traj = simulate_reference(
            &spec,
            &ForcingSpec::training_default(),
            &grid,
            &ic,
            &recipe,
            11,
        )
        .unwrap();
        assert_eq!(traj.fields.shape(), &[4, 2, 64, 64]);
        assert!(traj.fields.data().iter().all(|x| x.is_finite()));
        let e0: f64 = traj.snapshot(0).iter().map(|&x| x * x).sum();
        let e3: f64 = traj.snapshot(3).iter().map(|&x| x * x).sum();
        assert!(e3 > 0.0 && e3 < 20.0 * e0.max(1.0));
        // velocity field from the solver is divergence-free to spectral accuracy
        let n = 64;
        let u = &traj.snapshot(1)[..n * n];
        let v = &traj.snapshot(1)[n * n..];
        let mut planner = rustfft::FftPlanner::<f64>::new();
        let mut uc: Vec<Complex<f64>> = u.iter().map(|&x| Complex::new(x, 0.0)).collect();
        let mut vc: Vec<Complex<f64>> = v.iter().map(|&x| Complex::new(x, 0.0)).collect();
        fft2_inplace(&mut planner, &mut uc, n, false);
        fft2_inplace(&mut planner, &mut vc, n, false);
        let wave = |k: usize| -> f64 {
            let s = if k <= n / 2 { k as i64 } else { k as i64 - n as i64 };
            s as f64
        };
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let div = Complex::new(0.0, wave(j)) * uc[i * n + j]
                    + Complex::new(0.0, wave(i)) * vc[i * n + j];
                worst = worst.max(div.norm());
            }
        }
        assert!(worst / (n * n) as f64 * 2.0 < 1e-8, "div {worst}");
    }

    #[test]
    fn downsample_strides_pick_expected_indices() {
        let n_t = 8;
        let n = 100;
        let fields = Tensor::from_fn(&[n_t, 1, n, n], |ix| {
            (ix[0] * 1_000_000 + ix[2] * 1000 + ix[3]) as f64
        });
        let traj = TrajectorySet {
            fields,
            dt: 0.5,
            domain: 1.0,
            system: SystemSpec::burgers_default(),
            forcing: ForcingSpec::None,
            seed: 0,
            channel_names: vec!["u".into()],
            time_indices: None,
        };
        let spec = DownsampleSpec {
            space_stride: 4,
            time_stride: 2,
        };
        let down = downsample(&traj, &spec).unwrap();
        assert_eq!(down.fields.shape(), &[4, 1, 25, 25]);
        assert_eq!(down.dt, 1.0);
        // picks indices {0, 4, ..., 96} in space and {0, 2, 4, 6} in time
        assert_eq!(down.fields.data()[1], 4.0);
        assert_eq!(down.fields.data()[25], 4000.0);
        assert_eq!(down.snapshot(1)[0], 2_000_000.0);

        // identity strides
        let same = downsample(
            &traj,
            &DownsampleSpec {
                space_stride: 1,
                time_stride: 1,
            },
        )
        .unwrap();
        assert_eq!(same.fields, traj.fields);

        // composition equals a single combined stride
        let twice = downsample(
            &downsample(
                &traj,
                &DownsampleSpec {
                    space_stride: 2,
                    time_stride: 2,
                },
            )
            .unwrap(),
            &DownsampleSpec {
                space_stride: 2,
                time_stride: 1,
            },
        )
        .unwrap();
        let once = downsample(
            &traj,
            &DownsampleSpec {
                space_stride: 4,
                time_stride: 2,
            },
        )
        .unwrap();
        assert_eq!(twice.fields, once.fields);

        assert!(downsample(
            &traj,
            &DownsampleSpec {
                space_stride: 3,
                time_stride: 1
            }
        )
        .is_err());
    }

    #[test]
    fn noise_scale_matches_statistics() {
        let n = 64;
        let fields = Tensor::from_fn(&[4, 2, n, n], |ix| {
            ((ix[0] + ix[1] * 3 + ix[2] * 7 + ix[3] * 13) as f64 * 0.37).sin()
        });
        let traj = TrajectorySet {
            fields,
            dt: 1.0,
            domain: 1.0,
            system: SystemSpec::burgers_default(),
            forcing: ForcingSpec::None,
            seed: 0,
            channel_names: vec!["u".into(), "v".into()],
            time_indices: None,
        };
        let clean = traj.clone();
        assert_eq!(add_noise(&traj, 0.0, 1).fields, clean.fields);
        let noisy = add_noise(&traj, 0.01, 1);
        assert_eq!(add_noise(&traj, 0.01, 1).fields, noisy.fields);

        // empirical std of the perturbation relative to the data std
        for ch in 0..2 {
            let mut num = 0.0;
            let mut den = 0.0;
            let mut mean = 0.0;
            let count = (4 * n * n) as f64;
            for t in 0..4 {
                for p in 0..n * n {
                    mean += clean.fields.data()[(t * 2 + ch) * n * n + p];
                }
            }
            mean /= count;
            for t in 0..4 {
                for p in 0..n * n {
                    let i = (t * 2 + ch) * n * n + p;
                    num += (noisy.fields.data()[i] - clean.fields.data()[i]).powi(2);
                    den += (clean.fields.data()[i] - mean).powi(2);
                }
            }
            let ratio = (num / den).sqrt();
            assert!((ratio - 0.01).abs() < 0.001, "ratio {ratio}");
        }
    }

    #[test]
    fn sparsify_counts_and_contiguity() {
        let fields = Tensor::from_fn(&[400, 1, 4, 4], |ix| ix[0] as f64);
        let traj = TrajectorySet {
            fields,
            dt: 1.0,
            domain: 1.0,
            system: SystemSpec::burgers_default(),
            forcing: ForcingSpec::None,
            seed: 0,
            channel_names: vec!["u".into()],
            time_indices: None,
        };
        let sparse = sparsify(&traj, 0.2, 20, 3).unwrap();
        // 20 blocks of 20 snapshots; 4 dropped, 16 remain.
        assert_eq!(sparse.n_snapshots(), 16 * 20);
        let idx = sparse.time_indices.as_ref().unwrap();
        assert_eq!(idx.len(), 320);
        // indices strictly increasing and block-aligned
        for w in idx.windows(2) {
            assert!(w[1] > w[0]);
        }
        for (k, &t) in idx.iter().enumerate() {
            assert_eq!(sparse.snapshot(k)[0], t as f64);
        }
        // determinism and the identity case
        assert_eq!(sparsify(&traj, 0.2, 20, 3).unwrap().fields, sparse.fields);
        assert_eq!(sparsify(&traj, 0.0, 20, 3).unwrap().fields, traj.fields);
        // dropping everything is an error
        assert!(sparsify(&traj, 0.99, 20, 3).is_err());
    }

    #[test]
    fn trajectory_file_round_trip_is_bit_exact() {
        let spec = SystemSpec::gray_scott_default();
        let grid = burgers_grid(16);
        let ic = generate_ic(&spec, &grid, 21);
        let recipe = SimRecipe {
            dt_sim: 0.01,
            warmup: 0.0,
            n_snapshots: 3,
            record_every: 2,
        };
        let traj = simulate_reference(&spec, &ForcingSpec::None, &grid, &ic, &recipe, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.gct");
        traj.save(&path).unwrap();
        let loaded = TrajectorySet::load(&path).unwrap();
        assert_eq!(loaded.fields, traj.fields);
        assert_eq!(loaded.dt.to_bits(), traj.dt.to_bits());
        assert_eq!(loaded.system, traj.system);
        assert_eq!(loaded.channel_names, traj.channel_names);
        assert_eq!(loaded.seed, 21);
    }
}
