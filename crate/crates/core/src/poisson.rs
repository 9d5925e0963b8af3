//! Spectral pressure solve for incompressible flow on the periodic square.
//!
//! `lap p = psi(u, f)` with `psi = -2 (u_y v_x - u_x v_y) + div f`. In
//! frequency space `p* = psi* / (-(eta_x^2 + eta_y^2))` with the zero mode
//! dropped, which pins the pressure to zero mean.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::pde::Grid;
use crate::stencil::StencilOps;
use crate::tensor::{Real, Tensor};

/// Per-mode wavenumbers `eta = 2 pi k / L` for an `n x n` periodic grid.
#[derive(Debug, Clone)]
pub struct Wavenumbers {
    pub eta: Vec<f64>,
}

impl Wavenumbers {
    pub fn new(n: usize, extent: f64) -> Self {
        let eta = (0..n)
            .map(|k| {
                let signed = if k <= n / 2 { k as i64 } else { k as i64 - n as i64 };
                std::f64::consts::TAU * signed as f64 / extent
            })
            .collect();
        Wavenumbers { eta }
    }
}

/// `-1 / (eta_x^2 + eta_y^2)` with the zero mode zeroed out.
pub fn inverse_laplacian_map<T: Real>(grid: &Grid) -> Result<Tensor<T>> {
    let n = grid.size;
    if !n.is_multiple_of(2) {
        return Err(Error::GridShape { h: n, w: n });
    }
    let wn = Wavenumbers::new(n, grid.extent);
    Ok(Tensor::from_fn(&[n, n], |ix| {
        let k2 = wn.eta[ix[0]] * wn.eta[ix[0]] + wn.eta[ix[1]] * wn.eta[ix[1]];
        if k2 == 0.0 {
            T::zero()
        } else {
            T::of_f64(-1.0 / k2)
        }
    }))
}

/// Source term `psi = -2 (u_y v_x - u_x v_y) + div f`, with the derivatives
/// taken by the (learnable) stencil on the corrected state.
pub fn vorticity_source<T: Real>(
    g: &mut Graph<T>,
    velocity: Var,
    forcing: Option<Var>,
    ops: &StencilOps,
) -> Result<Var> {
    let (c, _, _) = g.value(velocity).as_planes()?;
    if c != 2 {
        return Err(Error::ChannelMismatch {
            context: "vorticity_source",
            expected: 2,
            got: c,
        });
    }
    let u = g.channel(velocity, 0)?;
    let v = g.channel(velocity, 1)?;
    let uy = ops.dy(g, u)?;
    let vx = ops.dx(g, v)?;
    let ux = ops.dx(g, u)?;
    let vy = ops.dy(g, v)?;
    let t1 = g.mul(uy, vx)?;
    let t2 = g.mul(ux, vy)?;
    let d = g.sub(t1, t2)?;
    let mut psi = g.scale(d, -2.0);
    if let Some(f) = forcing {
        let fx = g.channel(f, 0)?;
        let fy = g.channel(f, 1)?;
        let dfx = ops.dx(g, fx)?;
        let dfy = ops.dy(g, fy)?;
        let div = g.add(dfx, dfy)?;
        psi = g.add(psi, div)?;
    }
    Ok(psi)
}

/// Spectral solve of `lap p = psi` on the periodic square; mean-free output.
pub fn solve_poisson_spectral<T: Real>(g: &mut Graph<T>, psi: Var, grid: &Grid) -> Result<Var> {
    let shape = g.value(psi).shape().to_vec();
    if shape.len() != 2 || shape[0] != shape[1] || !shape[0].is_multiple_of(2) {
        return Err(Error::GridShape {
            h: shape.first().copied().unwrap_or(0),
            w: shape.get(1).copied().unwrap_or(0),
        });
    }
    if shape[0] != grid.size {
        return Err(Error::ShapeMismatch {
            left: shape,
            right: vec![grid.size, grid.size],
        });
    }
    let map = g.constant(inverse_laplacian_map::<T>(grid)?);
    let spectrum = g.fft2(psi)?;
    let scaled = g.mul_map(spectrum, map)?;
    g.ifft2(scaled)
}

/// Spectral-derivative variant of `psi`, available for oracle comparisons
/// against the filter-bank default.
pub fn vorticity_source_spectral<T: Real>(
    g: &mut Graph<T>,
    velocity: Var,
    forcing: Option<Var>,
    grid: &Grid,
) -> Result<Var> {
    let (c, h, w) = g.value(velocity).as_planes()?;
    if c != 2 {
        return Err(Error::ChannelMismatch {
            context: "vorticity_source_spectral",
            expected: 2,
            got: c,
        });
    }
    if h != w || h % 2 != 0 {
        return Err(Error::GridShape { h, w });
    }
    let wn = Wavenumbers::new(h, grid.extent);
    // i*eta multiplication realised as two real maps on (re, im) pairs is
    // avoided here: build d/dx and d/dy via forward/inverse transforms with
    // the derivative applied through mul_map on the squared-wavenumber-free
    // paths. Spectral first derivatives need the imaginary rotation, so we
    // assemble them from shifted transforms: d/dx f = ifft2(i eta_x fft2 f).
    // The tape has no complex-rotate op; reuse mul_map twice on swapped
    // (re, im) parts is not expressible either, so evaluate the derivative
    // fields as constants from the current values (no gradient flows through
    // this diagnostic path).
    let u = g.value(velocity).clone();
    let dux = spectral_derivative_value(&u, &wn, 0, 0)?;
    let duy = spectral_derivative_value(&u, &wn, 0, 1)?;
    let dvx = spectral_derivative_value(&u, &wn, 1, 0)?;
    let dvy = spectral_derivative_value(&u, &wn, 1, 1)?;
    let uy = g.constant(duy);
    let vx = g.constant(dvx);
    let ux = g.constant(dux);
    let vy = g.constant(dvy);
    let t1 = g.mul(uy, vx)?;
    let t2 = g.mul(ux, vy)?;
    let d = g.sub(t1, t2)?;
    let mut psi = g.scale(d, -2.0);
    if let Some(f) = forcing {
        let fv = g.value(f).clone();
        let dfx = spectral_derivative_value(&fv, &wn, 0, 0)?;
        let dfy = spectral_derivative_value(&fv, &wn, 1, 1)?;
        let sx = g.constant(dfx);
        let sy = g.constant(dfy);
        let div = g.add(sx, sy)?;
        psi = g.add(psi, div)?;
    }
    Ok(psi)
}

/// Exact spectral first derivative of one channel along `axis` (0 = x, 1 = y).
fn spectral_derivative_value<T: Real>(
    field: &Tensor<T>,
    wn: &Wavenumbers,
    channel: usize,
    axis: usize,
) -> Result<Tensor<T>> {
    use rustfft::num_complex::Complex;
    let (c, h, w) = field.as_planes()?;
    if channel >= c {
        return Err(Error::ChannelMismatch {
            context: "spectral derivative",
            expected: c,
            got: channel,
        });
    }
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(w);
    let mut buf: Vec<Complex<f64>> = field.data()[channel * h * w..(channel + 1) * h * w]
        .iter()
        .map(|&v| Complex::new(v.as_f64(), 0.0))
        .collect();
    for row in buf.chunks_exact_mut(w) {
        fwd.process(row);
    }
    let fwd_h = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        fwd_h.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
    for i in 0..h {
        for j in 0..w {
            let eta = if axis == 0 { wn.eta[j] } else { wn.eta[i] };
            buf[i * w + j] *= Complex::new(0.0, eta);
        }
    }
    let inv_w = planner.plan_fft_inverse(w);
    let inv_h = planner.plan_fft_inverse(h);
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        inv_h.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
    for row in buf.chunks_exact_mut(w) {
        inv_w.process(row);
    }
    let norm = 1.0 / (h * w) as f64;
    Ok(Tensor::from_fn(&[h, w], |ix| {
        T::of_f64(buf[ix[0] * w + ix[1]].re * norm)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stencil::{build_kernel, SymmetricFilterParams};

    fn classical_ops(g: &mut Graph<f64>, dx: f64) -> StencilOps {
        let k = build_kernel(&SymmetricFilterParams::<f64>::classical());
        let kv = g.constant(Tensor::from_vec(&[5, 5], k.entries().to_vec()).unwrap());
        StencilOps::new(g, kv, dx, dx).unwrap()
    }

    fn tau_grid(n: usize) -> Grid {
        Grid::new(n, std::f64::consts::TAU)
    }

    fn field2(n: usize, f: impl Fn(f64, f64) -> (f64, f64)) -> Tensor<f64> {
        let h = std::f64::consts::TAU / n as f64;
        Tensor::from_fn(&[2, n, n], |ix| {
            let (u, v) = f(ix[2] as f64 * h, ix[1] as f64 * h);
            if ix[0] == 0 {
                u
            } else {
                v
            }
        })
    }

    #[test]
    fn psi_vanishes_for_uniform_and_shear_states() {
        let n = 32;
        let grid = tau_grid(n);
        let mut g = Graph::new();
        let ops = classical_ops(&mut g, grid.dx());
        let uni = g.constant(field2(n, |_, _| (0.4, -0.2)));
        let p1 = vorticity_source(&mut g, uni, None, &ops).unwrap();
        assert!(g.value(p1).data().iter().all(|&x| x == 0.0));

        // u = sin(y), v = 0: u_x = v_x = v_y = 0 so psi = 0.
        let shear = g.constant(field2(n, |_, y| (y.sin(), 0.0)));
        let p2 = vorticity_source(&mut g, shear, None, &ops).unwrap();
        assert!(g.value(p2).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn psi_of_crossed_sines_matches_symbolic_value() {
        let n = 64;
        let grid = tau_grid(n);
        let mut g = Graph::new();
        let ops = classical_ops(&mut g, grid.dx());
        let s = g.constant(field2(n, |x, y| (y.sin(), x.sin())));
        let psi = vorticity_source(&mut g, s, None, &ops).unwrap();
        let h = grid.dx();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let truth = -2.0 * (j as f64 * h).cos() * (i as f64 * h).cos();
                worst = worst.max((g.value(psi).data()[i * n + j] - truth).abs());
            }
        }
        assert!(worst < 1e-3, "worst {worst}");
    }

    #[test]
    fn manufactured_solutions_recovered_to_spectral_accuracy() {
        let n = 64;
        let grid = tau_grid(n);
        let h = grid.dx();

        // psi = -(cos x + cos y)  =>  p = cos x + cos y
        let mut g = Graph::new();
        let psi = g.constant(Tensor::from_fn(&[n, n], |ix| {
            -((ix[1] as f64 * h).cos() + (ix[0] as f64 * h).cos())
        }));
        let p = solve_poisson_spectral(&mut g, psi, &grid).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            for j in 0..n {
                let truth = (j as f64 * h).cos() + (i as f64 * h).cos();
                let got = g.value(p).data()[i * n + j];
                num += (got - truth) * (got - truth);
                den += truth * truth;
            }
        }
        assert!((num / den).sqrt() < 1e-12);

        // psi = -4 sin 2x  =>  p = sin 2x
        let psi2 = g.constant(Tensor::from_fn(&[n, n], |ix| {
            -4.0 * (2.0 * ix[1] as f64 * h).sin()
        }));
        let p2 = solve_poisson_spectral(&mut g, psi2, &grid).unwrap();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let truth = (2.0 * j as f64 * h).sin();
                worst = worst.max((g.value(p2).data()[i * n + j] - truth).abs());
            }
        }
        assert!(worst < 1e-12, "worst {worst}");

        // zero source -> zero pressure
        let z = g.constant(Tensor::zeros(&[n, n]));
        let pz = solve_poisson_spectral(&mut g, z, &grid).unwrap();
        assert!(g.value(pz).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn output_is_mean_free_and_linear() {
        let n = 32;
        let grid = tau_grid(n);
        let mut g = Graph::new();
        let mk = |seed: usize| {
            Tensor::from_fn(&[n, n], |ix| {
                ((ix[0] * 7 + ix[1] * 13 + seed) as f64 * 0.37).sin()
            })
        };
        let s1 = g.constant(mk(0));
        let s2 = g.constant(mk(5));
        let p1 = solve_poisson_spectral(&mut g, s1, &grid).unwrap();
        let p2 = solve_poisson_spectral(&mut g, s2, &grid).unwrap();
        let mean: f64 = g.value(p1).data().iter().sum::<f64>() / (n * n) as f64;
        assert!(mean.abs() < 1e-12);

        // a*psi1 + b*psi2 solves to a*p1 + b*p2
        let (a, b) = (2.5, -1.25);
        let sa = g.scale(s1, a);
        let sb = g.scale(s2, b);
        let sc = g.add(sa, sb).unwrap();
        let pc = solve_poisson_spectral(&mut g, sc, &grid).unwrap();
        for i in 0..n * n {
            let expect = a * g.value(p1).data()[i] + b * g.value(p2).data()[i];
            assert!((g.value(pc).data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn odd_grids_are_rejected() {
        let grid = Grid::new(15, 1.0);
        let mut g = Graph::<f64>::new();
        let psi = g.constant(Tensor::zeros(&[15, 15]));
        assert!(matches!(
            solve_poisson_spectral(&mut g, psi, &grid),
            Err(Error::GridShape { .. })
        ));
    }

    #[test]
    fn spectral_residual_vanishes_on_nonzero_modes() {
        // fft2(lap p) must equal fft2(psi) away from the zero mode.
        let n = 32;
        let grid = tau_grid(n);
        let wn = Wavenumbers::new(n, grid.extent);
        let mut g = Graph::new();
        let psi_t = Tensor::from_fn(&[n, n], |ix| ((ix[0] * 3 + ix[1] * 5) as f64 * 0.61).cos());
        let psi = g.constant(psi_t);
        let p = solve_poisson_spectral(&mut g, psi, &grid).unwrap();
        let ph = g.fft2(p).unwrap();
        let psih = g.fft2(psi).unwrap();
        let (pd, sd) = (g.value(ph).data(), g.value(psih).data());
        for i in 0..n {
            for j in 0..n {
                let k2 = wn.eta[i] * wn.eta[i] + wn.eta[j] * wn.eta[j];
                if k2 == 0.0 {
                    continue;
                }
                let idx = 2 * (i * n + j);
                // lap p in frequency space is -k^2 p*
                let re = -k2 * pd[idx] - sd[idx];
                let im = -k2 * pd[idx + 1] - sd[idx + 1];
                assert!(re.abs() < 1e-10 && im.abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stencil_and_spectral_psi_agree_on_smooth_fields() {
        let n = 64;
        let grid = tau_grid(n);
        let mut g = Graph::new();
        let ops = classical_ops(&mut g, grid.dx());
        let s = g.constant(field2(n, |x, y| ((x + y).sin(), (2.0 * x).cos() * y.sin())));
        let a = vorticity_source(&mut g, s, None, &ops).unwrap();
        let b = vorticity_source_spectral(&mut g, s, None, &grid).unwrap();
        let mut worst = 0.0f64;
        for i in 0..n * n {
            worst = worst.max((g.value(a).data()[i] - g.value(b).data()[i]).abs());
        }
        assert!(worst < 1e-2, "worst {worst}");
    }
}
