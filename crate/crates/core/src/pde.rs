//! Right-hand sides of the governed systems on coarse grids.
//!
//! Derivative terms are evaluated on the neural-corrected state with the
//! learnable stencil; pointwise (reaction, advection-coefficient, forcing
//! drag) terms use the raw state. Each `rhs_*` returns the per-channel time
//! derivative as a `[2, H, W]` node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::stencil::StencilOps;
use crate::tensor::{Real, Tensor};

/// Uniform periodic grid over a square domain `[0, extent]^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub size: usize,
    pub extent: f64,
}

impl Grid {
    pub fn new(size: usize, extent: f64) -> Self {
        Grid { size, extent }
    }

    pub fn dx(&self) -> f64 {
        self.extent / self.size as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        j as f64 * self.dx()
    }

    pub fn y(&self, i: usize) -> f64 {
        i as f64 * self.dx()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Burgers,
    GrayScott,
    FitzhughNagumo,
    NavierStokes,
}

impl SystemKind {
    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::Burgers => "burgers",
            SystemKind::GrayScott => "gray_scott",
            SystemKind::FitzhughNagumo => "fitzhugh_nagumo",
            SystemKind::NavierStokes => "navier_stokes",
        }
    }
}

/// Which PDE is being solved plus its physical parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SystemSpec {
    Burgers { nu: f64 },
    GrayScott { du: f64, dv: f64, f: f64, kappa: f64 },
    FitzhughNagumo { gamma: f64, alpha: f64, beta: f64 },
    NavierStokes { re: f64 },
}

impl SystemSpec {
    pub fn burgers_default() -> Self {
        SystemSpec::Burgers { nu: 2e-3 }
    }

    pub fn gray_scott_default() -> Self {
        SystemSpec::GrayScott {
            du: 2.0e-5,
            dv: 5.0e-6,
            f: 0.04,
            kappa: 0.06,
        }
    }

    pub fn fitzhugh_nagumo_default() -> Self {
        // gamma is configurable; 1.0 is this artifact's default.
        SystemSpec::FitzhughNagumo {
            gamma: 1.0,
            alpha: 0.01,
            beta: 0.25,
        }
    }

    pub fn navier_stokes_default() -> Self {
        SystemSpec::NavierStokes { re: 1000.0 }
    }

    pub fn kind(&self) -> SystemKind {
        match self {
            SystemSpec::Burgers { .. } => SystemKind::Burgers,
            SystemSpec::GrayScott { .. } => SystemKind::GrayScott,
            SystemSpec::FitzhughNagumo { .. } => SystemKind::FitzhughNagumo,
            SystemSpec::NavierStokes { .. } => SystemKind::NavierStokes,
        }
    }

    /// State channels; pressure is derived on the fly and never stored.
    pub fn channels(&self) -> usize {
        2
    }

    pub fn channel_names(&self) -> Vec<String> {
        vec!["u".into(), "v".into()]
    }

    /// Default spatial extent used by the reference datasets.
    pub fn default_extent(&self) -> f64 {
        match self {
            SystemSpec::Burgers { .. } | SystemSpec::GrayScott { .. } => 1.0,
            SystemSpec::FitzhughNagumo { .. } => 128.0,
            SystemSpec::NavierStokes { .. } => std::f64::consts::TAU,
        }
    }

    /// Largest diffusion coefficient, for stability bounds.
    pub fn max_diffusion(&self) -> f64 {
        match *self {
            SystemSpec::Burgers { nu } => nu,
            SystemSpec::GrayScott { du, dv, .. } => du.max(dv),
            SystemSpec::FitzhughNagumo { gamma, .. } => gamma,
            SystemSpec::NavierStokes { re } => 1.0 / re,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &'static str, v: f64| {
            if v <= 0.0 {
                Err(Error::NonPositive { name, value: v })
            } else {
                Ok(())
            }
        };
        match *self {
            SystemSpec::Burgers { nu } => check("nu", nu),
            SystemSpec::GrayScott { du, dv, .. } => {
                check("du", du)?;
                check("dv", dv)
            }
            SystemSpec::FitzhughNagumo { gamma, .. } => check("gamma", gamma),
            SystemSpec::NavierStokes { re } => check("re", re),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trig {
    Sin,
    Cos,
}

/// External body force `f(x, y, u)`. All the trained and generalisation
/// forces are a sinusoidal profile along one axis pushing in the x
/// direction, plus a linear drag on the velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ForcingSpec {
    /// No forcing (f6).
    None,
    Kolmogorov {
        trig: Trig,
        wavenumber: u32,
        amplitude: f64,
        drag: f64,
    },
}

impl ForcingSpec {
    /// Training force: `sin(4y) n_x - 0.1 u`.
    pub fn training_default() -> Self {
        ForcingSpec::Kolmogorov {
            trig: Trig::Sin,
            wavenumber: 4,
            amplitude: 1.0,
            drag: 0.1,
        }
    }

    /// The six generalisation-test families.
    pub fn family(index: u32) -> Result<Self> {
        Ok(match index {
            1 => ForcingSpec::Kolmogorov { trig: Trig::Cos, wavenumber: 4, amplitude: 1.0, drag: 0.1 },
            2 => ForcingSpec::Kolmogorov { trig: Trig::Sin, wavenumber: 4, amplitude: 1.0, drag: 0.4 },
            3 => ForcingSpec::Kolmogorov { trig: Trig::Cos, wavenumber: 2, amplitude: 1.0, drag: 0.1 },
            4 => ForcingSpec::Kolmogorov { trig: Trig::Sin, wavenumber: 2, amplitude: 1.0, drag: 0.1 },
            5 => ForcingSpec::Kolmogorov { trig: Trig::Cos, wavenumber: 4, amplitude: 1.0, drag: 0.4 },
            6 => ForcingSpec::None,
            other => {
                return Err(Error::Config(format!(
                    "unknown forcing family f{other}; expected f1..f6"
                )))
            }
        })
    }

    pub fn drag(&self) -> f64 {
        match self {
            ForcingSpec::None => 0.0,
            ForcingSpec::Kolmogorov { drag, .. } => *drag,
        }
    }

    /// The state-independent part of the force as a `[2, H, W]` tensor
    /// (profile in the x channel, zero y channel).
    pub fn profile<T: Real>(&self, grid: &Grid) -> Tensor<T> {
        let n = grid.size;
        match *self {
            ForcingSpec::None => Tensor::zeros(&[2, n, n]),
            ForcingSpec::Kolmogorov {
                trig,
                wavenumber,
                amplitude,
                ..
            } => Tensor::from_fn(&[2, n, n], |ix| {
                if ix[0] != 0 {
                    return T::zero();
                }
                let y = grid.y(ix[1]);
                let arg = wavenumber as f64 * y;
                let v = match trig {
                    Trig::Sin => arg.sin(),
                    Trig::Cos => arg.cos(),
                };
                T::of_f64(amplitude * v)
            }),
        }
    }

    /// Plain-value evaluation of `f(x, y, u)` given a `[2, H, W]` state.
    pub fn evaluate_value(&self, grid: &Grid, u: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (c, h, w) = u.as_planes()?;
        if c != 2 || h != grid.size || w != grid.size {
            return Err(Error::ChannelMismatch {
                context: "forcing",
                expected: 2,
                got: c,
            });
        }
        let mut out = self.profile::<f64>(grid);
        let drag = self.drag();
        for (o, &s) in out.data_mut().iter_mut().zip(u.data()) {
            *o -= drag * s;
        }
        Ok(out)
    }

    /// Tape evaluation: `profile - drag * u`.
    pub fn evaluate<T: Real>(&self, g: &mut Graph<T>, grid: &Grid, u: Var) -> Result<Var> {
        let (c, h, w) = g.value(u).as_planes()?;
        if c != 2 || h != grid.size || w != grid.size {
            return Err(Error::ChannelMismatch {
                context: "forcing",
                expected: 2,
                got: c,
            });
        }
        let prof = g.constant(self.profile::<T>(grid));
        if self.drag() == 0.0 {
            return Ok(prof);
        }
        let dragged = g.scale(u, self.drag());
        g.sub(prof, dragged)
    }
}

/// Reynolds-number embedding: `(1/Re) * outer(vec_a, vec_b)`, added to the
/// diffusion coefficient of the NS right-hand side cell by cell.
pub fn re_embedding_map<T: Real>(g: &mut Graph<T>, vec_a: Var, vec_b: Var, re: f64) -> Result<Var> {
    if re <= 0.0 {
        return Err(Error::NonPositive {
            name: "re",
            value: re,
        });
    }
    let o = g.outer(vec_a, vec_b)?;
    Ok(g.scale(o, 1.0 / re))
}

fn expect_two_channels<T: Real>(g: &Graph<T>, v: Var, context: &'static str) -> Result<()> {
    let (c, _, _) = g.value(v).as_planes()?;
    if c != 2 {
        return Err(Error::ChannelMismatch {
            context,
            expected: 2,
            got: c,
        });
    }
    Ok(())
}

/// Burgers: `du/dt = nu lap(u) - (u du/dx + v du/dy)` per channel.
pub fn rhs_burgers<T: Real>(
    g: &mut Graph<T>,
    raw: Var,
    corrected: Var,
    ops: &StencilOps,
    spec: &SystemSpec,
) -> Result<Var> {
    let SystemSpec::Burgers { nu } = *spec else {
        return Err(Error::Config("rhs_burgers called with non-Burgers spec".into()));
    };
    expect_two_channels(g, raw, "rhs_burgers")?;
    expect_two_channels(g, corrected, "rhs_burgers")?;
    let u = g.channel(raw, 0)?;
    let v = g.channel(raw, 1)?;
    let mut out = Vec::with_capacity(2);
    for ch in 0..2 {
        let hatc = g.channel(corrected, ch)?;
        let cx = ops.dx(g, hatc)?;
        let cy = ops.dy(g, hatc)?;
        let lap = ops.laplacian(g, hatc)?;
        let diff = g.scale(lap, nu);
        let advx = g.mul(u, cx)?;
        let advy = g.mul(v, cy)?;
        let adv = g.add(advx, advy)?;
        out.push(g.sub(diff, adv)?);
    }
    g.stack_channels(&out)
}

/// Gray-Scott: `du/dt = Du lap(u) - u v^2 + F (1 - u)`,
/// `dv/dt = Dv lap(v) + u v^2 - (F + kappa) v`.
pub fn rhs_gray_scott<T: Real>(
    g: &mut Graph<T>,
    raw: Var,
    corrected: Var,
    ops: &StencilOps,
    spec: &SystemSpec,
) -> Result<Var> {
    let SystemSpec::GrayScott { du, dv, f, kappa } = *spec else {
        return Err(Error::Config("rhs_gray_scott called with non-GS spec".into()));
    };
    expect_two_channels(g, raw, "rhs_gray_scott")?;
    expect_two_channels(g, corrected, "rhs_gray_scott")?;
    let u = g.channel(raw, 0)?;
    let v = g.channel(raw, 1)?;
    let hu = g.channel(corrected, 0)?;
    let hv = g.channel(corrected, 1)?;

    let vv = g.mul(v, v)?;
    let uvv = g.mul(u, vv)?;

    let lap_u = ops.laplacian(g, hu)?;
    let diff_u = g.scale(lap_u, du);
    let t1 = g.sub(diff_u, uvv)?;
    let fu = g.scale(u, -f);
    let growth = g.add_scalar(fu, f); // F (1 - u)
    let rhs_u = g.add(t1, growth)?;

    let lap_v = ops.laplacian(g, hv)?;
    let diff_v = g.scale(lap_v, dv);
    let t2 = g.add(diff_v, uvv)?;
    let death = g.scale(v, f + kappa);
    let rhs_v = g.sub(t2, death)?;

    g.stack_channels(&[rhs_u, rhs_v])
}

/// FitzHugh-Nagumo: both channels diffuse with the same gamma;
/// reactions `u - u^3 - v + alpha` and `beta (u - v)`.
pub fn rhs_fitzhugh_nagumo<T: Real>(
    g: &mut Graph<T>,
    raw: Var,
    corrected: Var,
    ops: &StencilOps,
    spec: &SystemSpec,
) -> Result<Var> {
    let SystemSpec::FitzhughNagumo { gamma, alpha, beta } = *spec else {
        return Err(Error::Config("rhs_fitzhugh_nagumo called with non-FN spec".into()));
    };
    expect_two_channels(g, raw, "rhs_fitzhugh_nagumo")?;
    expect_two_channels(g, corrected, "rhs_fitzhugh_nagumo")?;
    let u = g.channel(raw, 0)?;
    let v = g.channel(raw, 1)?;
    let hu = g.channel(corrected, 0)?;
    let hv = g.channel(corrected, 1)?;

    let uu = g.mul(u, u)?;
    let u3 = g.mul(uu, u)?;
    let lin = g.sub(u, u3)?;
    let lin = g.sub(lin, v)?;
    let mu = g.add_scalar(lin, alpha);
    let lap_u = ops.laplacian(g, hu)?;
    let diff_u = g.scale(lap_u, gamma);
    let rhs_u = g.add(diff_u, mu)?;

    let uv = g.sub(u, v)?;
    let mv = g.scale(uv, beta);
    let lap_v = ops.laplacian(g, hv)?;
    let diff_v = g.scale(lap_v, gamma);
    let rhs_v = g.add(diff_v, mv)?;

    g.stack_channels(&[rhs_u, rhs_v])
}

/// Incompressible NS (velocity-pressure form):
/// `du/dt = -(u du/dx + v du/dy) + (1/Re + Re_embb) lap(u) - dp/dx + f_x`
/// and the v analogue. `pressure` must come from the Poisson solve;
/// `re_map` is the optional embedding added to the 1/Re coefficient.
#[allow(clippy::too_many_arguments)]
pub fn rhs_navier_stokes<T: Real>(
    g: &mut Graph<T>,
    raw: Var,
    corrected: Var,
    pressure: Option<Var>,
    ops: &StencilOps,
    spec: &SystemSpec,
    forcing: Var,
    re_map: Option<Var>,
) -> Result<Var> {
    let SystemSpec::NavierStokes { re } = *spec else {
        return Err(Error::Config("rhs_navier_stokes called with non-NS spec".into()));
    };
    let Some(pressure) = pressure else {
        return Err(Error::Config(
            "rhs_navier_stokes requires a pressure field from the poisson solver".into(),
        ));
    };
    expect_two_channels(g, raw, "rhs_navier_stokes")?;
    expect_two_channels(g, corrected, "rhs_navier_stokes")?;
    expect_two_channels(g, forcing, "rhs_navier_stokes forcing")?;

    let u = g.channel(raw, 0)?;
    let v = g.channel(raw, 1)?;
    let px = ops.dx(g, pressure)?;
    let py = ops.dy(g, pressure)?;

    let mut out = Vec::with_capacity(2);
    for ch in 0..2 {
        let hatc = g.channel(corrected, ch)?;
        let cx = ops.dx(g, hatc)?;
        let cy = ops.dy(g, hatc)?;
        let lap = ops.laplacian(g, hatc)?;
        let mut diff = g.scale(lap, 1.0 / re);
        if let Some(map) = re_map {
            let extra = g.mul_map(lap, map)?;
            diff = g.add(diff, extra)?;
        }
        let advx = g.mul(u, cx)?;
        let advy = g.mul(v, cy)?;
        let adv = g.add(advx, advy)?;
        let mut acc = g.sub(diff, adv)?;
        let grad_p = if ch == 0 { px } else { py };
        acc = g.sub(acc, grad_p)?;
        let f_ch = g.channel(forcing, ch)?;
        out.push(g.add(acc, f_ch)?);
    }
    g.stack_channels(&out)
}

/// Dispatches on the system kind. For NS, `pressure`, `forcing` and
/// `re_map` must be supplied by the caller.
#[allow(clippy::too_many_arguments)]
pub fn rhs<T: Real>(
    g: &mut Graph<T>,
    spec: &SystemSpec,
    raw: Var,
    corrected: Var,
    ops: &StencilOps,
    pressure: Option<Var>,
    forcing: Option<Var>,
    re_map: Option<Var>,
) -> Result<Var> {
    match spec.kind() {
        SystemKind::Burgers => rhs_burgers(g, raw, corrected, ops, spec),
        SystemKind::GrayScott => rhs_gray_scott(g, raw, corrected, ops, spec),
        SystemKind::FitzhughNagumo => rhs_fitzhugh_nagumo(g, raw, corrected, ops, spec),
        SystemKind::NavierStokes => {
            let forcing = forcing.ok_or_else(|| {
                Error::Config("rhs_navier_stokes requires a forcing field".into())
            })?;
            rhs_navier_stokes(g, raw, corrected, pressure, ops, spec, forcing, re_map)
        }
    }
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

    fn uniform_state(g: &mut Graph<f64>, n: usize, u: f64, v: f64) -> Var {
        g.constant(Tensor::from_fn(&[2, n, n], |ix| if ix[0] == 0 { u } else { v }))
    }

    fn tau_field(n: usize, f: impl Fn(f64, f64) -> f64, ch0: bool) -> Tensor<f64> {
        let h = std::f64::consts::TAU / n as f64;
        Tensor::from_fn(&[2, n, n], |ix| {
            if (ix[0] == 0) == ch0 {
                f(ix[2] as f64 * h, ix[1] as f64 * h)
            } else {
                0.0
            }
        })
    }

    #[test]
    fn burgers_uniform_state_has_zero_rhs() {
        let mut g = Graph::new();
        let ops = classical_ops(&mut g, 0.25);
        let s = uniform_state(&mut g, 16, 0.7, 0.7);
        let spec = SystemSpec::burgers_default();
        let r = rhs_burgers(&mut g, s, s, &ops, &spec).unwrap();
        assert!(g.value(r).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn burgers_sine_profile_matches_symbolic_rhs() {
        let n = 64;
        let dx = std::f64::consts::TAU / n as f64;
        let mut g = Graph::new();
        let ops = classical_ops(&mut g, dx);
        let s = g.constant(tau_field(n, |x, _| x.sin(), true));
        let spec = SystemSpec::Burgers { nu: 0.002 };
        let r = rhs_burgers(&mut g, s, s, &ops, &spec).unwrap();
        // du/dt = nu * (-sin x) - sin x cos x ; dv/dt = 0
        let h = std::f64::consts::TAU / n as f64;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let x = j as f64 * h;
                let truth = -0.002 * x.sin() - x.sin() * x.cos();
                worst = worst.max((g.value(r).data()[i * n + j] - truth).abs());
            }
        }
        assert!(worst < 1e-3, "worst {worst}");
        assert!(g.value(r).data()[n * n..].iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn burgers_diffusion_is_linear_in_nu() {
        let n = 32;
        let dx = 1.0 / n as f64;
        let mut g = Graph::new();
        let ops = classical_ops(&mut g, dx);
        let state = Tensor::from_fn(&[2, n, n], |ix| {
            (std::f64::consts::TAU * ix[1] as f64 / n as f64).cos() * 0.3
        });
        let s = g.constant(state);
        let r1 = rhs_burgers(&mut g, s, s, &ops, &SystemSpec::Burgers { nu: 0.002 }).unwrap();
        let r2 = rhs_burgers(&mut g, s, s, &ops, &SystemSpec::Burgers { nu: 0.004 }).unwrap();
        let r0 = rhs_burgers(&mut g, s, s, &ops, &SystemSpec::Burgers { nu: 0.0 }).unwrap();
        for i in 0..g.value(r1).numel() {
            let d1 = g.value(r1).data()[i] - g.value(r0).data()[i];
            let d2 = g.value(r2).data()[i] - g.value(r0).data()[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-14);
        }
    }

    #[test]
    fn gray_scott_steady_and_pointwise_values() {
        let spec = SystemSpec::gray_scott_default();
        let mut g = Graph::new();
        let ops = classical_ops(&mut g, 1.0 / 32.0);

        // (u, v) = (1, 0) is a steady state.
        let s10 = uniform_state(&mut g, 16, 1.0, 0.0);
        let r = rhs_gray_scott(&mut g, s10, s10, &ops, &spec).unwrap();
        assert!(g.value(r).data().iter().all(|&x| x == 0.0));

        // (0, 0): growth only, (F, 0).
        let s00 = uniform_state(&mut g, 16, 0.0, 0.0);
        let r0 = rhs_gray_scott(&mut g, s00, s00, &ops, &spec).unwrap();
        assert!(g.value(r0).data()[..256].iter().all(|&x| (x - 0.04).abs() < 1e-15));
        assert!(g.value(r0).data()[256..].iter().all(|&x| x == 0.0));

        // u = 0.5, v = 0.25: du/dt = -0.5*0.0625 + 0.04*0.5 = -0.01125.
        let s = uniform_state(&mut g, 16, 0.5, 0.25);
        let r2 = rhs_gray_scott(&mut g, s, s, &ops, &spec).unwrap();
        assert!(g.value(r2).data()[..256]
            .iter()
            .all(|&x| (x - (-0.01125)).abs() < 1e-12));
    }

    #[test]
    fn fitzhugh_nagumo_root_and_decoupling() {
        let spec = SystemSpec::fitzhugh_nagumo_default();
        let mut g = Graph::new();
        let ops = classical_ops(&mut g, 1.0);

        // u = v = alpha^(1/3): reaction root, diffusion vanishes on uniforms.
        let root = 0.01f64.cbrt();
        let s = uniform_state(&mut g, 16, root, root);
        let r = rhs_fitzhugh_nagumo(&mut g, s, s, &ops, &spec).unwrap();
        assert!(g.value(r).data().iter().all(|&x| x.abs() < 1e-8));

        let s0 = uniform_state(&mut g, 16, 0.0, 0.0);
        let r0 = rhs_fitzhugh_nagumo(&mut g, s0, s0, &ops, &spec).unwrap();
        assert!(g.value(r0).data()[..256].iter().all(|&x| (x - 0.01).abs() < 1e-15));
        assert!(g.value(r0).data()[256..].iter().all(|&x| x == 0.0));

        // beta = 0 decouples v: dv/dt = gamma lap(v) only.
        let spec_b0 = SystemSpec::FitzhughNagumo {
            gamma: 1.0,
            alpha: 0.01,
            beta: 0.0,
        };
        let n = 32;
        let field = tau_field(n, |x, _| x.sin(), false);
        let mut g2 = Graph::new();
        let ops2 = classical_ops(&mut g2, std::f64::consts::TAU / n as f64);
        let sv = g2.constant(field);
        let rv = rhs_fitzhugh_nagumo(&mut g2, sv, sv, &ops2, &spec_b0).unwrap();
        let hv = g2.channel(sv, 1).unwrap();
        let lap = ops2.laplacian(&mut g2, hv).unwrap();
        for i in 0..n * n {
            let expect = g2.value(lap).data()[i];
            assert!((g2.value(rv).data()[n * n + i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn navier_stokes_uniform_state_is_steady_without_forcing() {
        let n = 16;
        let mut g = Graph::new();
        let ops = classical_ops(&mut g, std::f64::consts::TAU / n as f64);
        let s = uniform_state(&mut g, n, 0.9, -0.4);
        let p = g.constant(Tensor::zeros(&[n, n]));
        let f = g.constant(Tensor::zeros(&[2, n, n]));
        let spec = SystemSpec::navier_stokes_default();
        let r = rhs_navier_stokes(&mut g, s, s, Some(p), &ops, &spec, f, None).unwrap();
        assert!(g.value(r).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn navier_stokes_requires_pressure() {
        let mut g = Graph::new();
        let ops = classical_ops(&mut g, 0.1);
        let s = uniform_state(&mut g, 16, 0.0, 0.0);
        let f = g.constant(Tensor::zeros(&[2, 16, 16]));
        let spec = SystemSpec::navier_stokes_default();
        assert!(rhs_navier_stokes(&mut g, s, s, None, &ops, &spec, f, None).is_err());
    }

    #[test]
    fn taylor_green_rhs_matches_symbolic_form() {
        // u = sin x cos y, v = -cos x sin y, p = (cos 2x + cos 2y)/4, f = 0.
        // At Re -> infinity the convective and pressure terms cancel exactly,
        // so the symbolic RHS is zero; check the stencil evaluation agrees.
        let n = 64;
        let h = std::f64::consts::TAU / n as f64;
        let mut g = Graph::new();
        let ops = classical_ops(&mut g, h);
        let state = Tensor::from_fn(&[2, n, n], |ix| {
            let (x, y) = (ix[2] as f64 * h, ix[1] as f64 * h);
            if ix[0] == 0 {
                x.sin() * y.cos()
            } else {
                -x.cos() * y.sin()
            }
        });
        let pfield = Tensor::from_fn(&[n, n], |ix| {
            let (x, y) = (ix[1] as f64 * h, ix[0] as f64 * h);
            ((2.0 * x).cos() + (2.0 * y).cos()) / 4.0
        });
        let s = g.constant(state);
        let p = g.constant(pfield);
        let f = g.constant(Tensor::zeros(&[2, n, n]));
        let spec = SystemSpec::NavierStokes { re: 1e12 };
        let r = rhs_navier_stokes(&mut g, s, s, Some(p), &ops, &spec, f, None).unwrap();
        let worst = g.value(r).data().iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(worst < 1e-3, "worst {worst}");
    }

    #[test]
    fn burgers_rhs_converges_to_symbolic_form() {
        // manufactured u = sin(x) cos(y), v = cos(2x) sin(y)
        let mut errs = Vec::new();
        for n in [32usize, 64, 128] {
            let h = std::f64::consts::TAU / n as f64;
            let mut g = Graph::new();
            let ops = classical_ops(&mut g, h);
            let state = Tensor::from_fn(&[2, n, n], |ix| {
                let (x, y) = (ix[2] as f64 * h, ix[1] as f64 * h);
                if ix[0] == 0 {
                    x.sin() * y.cos()
                } else {
                    (2.0 * x).cos() * y.sin()
                }
            });
            let s = g.constant(state);
            let spec = SystemSpec::Burgers { nu: 0.002 };
            let r = rhs_burgers(&mut g, s, s, &ops, &spec).unwrap();
            let mut worst = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    let (x, y) = (j as f64 * h, i as f64 * h);
                    let (u, v) = (x.sin() * y.cos(), (2.0 * x).cos() * y.sin());
                    let ux = x.cos() * y.cos();
                    let uy = -x.sin() * y.sin();
                    let lap_u = -2.0 * u;
                    let truth = 0.002 * lap_u - (u * ux + v * uy);
                    worst = worst.max((g.value(r).data()[i * n + j] - truth).abs());
                }
            }
            errs.push(worst);
        }
        let order1 = (errs[0] / errs[1]).log2();
        let order2 = (errs[1] / errs[2]).log2();
        assert!(order1 >= 3.5, "order {order1} (errors {errs:?})");
        assert!(order2 >= 3.5, "order {order2} (errors {errs:?})");
    }

    #[test]
    fn zero_diffusion_reduces_to_pointwise_reactions() {
        let n = 16;
        let field = Tensor::from_fn(&[2, n, n], |ix| {
            ((ix[0] * 37 + ix[1] * 7 + ix[2] * 3) as f64 * 0.61).sin() * 0.5 + 0.4
        });
        let mut g = Graph::new();
        let ops = classical_ops(&mut g, 0.1);
        let s = g.constant(field.clone());

        let gs = SystemSpec::GrayScott { du: 0.0, dv: 0.0, f: 0.04, kappa: 0.06 };
        let r = rhs_gray_scott(&mut g, s, s, &ops, &gs).unwrap();
        for p in 0..n * n {
            let (u, v) = (field.data()[p], field.data()[n * n + p]);
            let du = -u * v * v + 0.04 * (1.0 - u);
            let dv = u * v * v - 0.1 * v;
            assert!((g.value(r).data()[p] - du).abs() < 1e-12);
            assert!((g.value(r).data()[n * n + p] - dv).abs() < 1e-12);
        }

        let fnag = SystemSpec::FitzhughNagumo { gamma: 0.0, alpha: 0.01, beta: 0.25 };
        let rf = rhs_fitzhugh_nagumo(&mut g, s, s, &ops, &fnag).unwrap();
        for p in 0..n * n {
            let (u, v) = (field.data()[p], field.data()[n * n + p]);
            let du = u - u.powi(3) - v + 0.01;
            let dv = 0.25 * (u - v);
            assert!((g.value(rf).data()[p] - du).abs() < 1e-12);
            assert!((g.value(rf).data()[n * n + p] - dv).abs() < 1e-12);
        }
    }

    #[test]
    fn rhs_is_translation_equivariant() {
        let n = 16;
        let (sy, sx) = (5usize, 9usize);
        let base = Tensor::from_fn(&[2, n, n], |ix| {
            ((ix[0] * 11 + ix[1] * 3 + ix[2] * 7) as f64 * 0.37).sin() * 0.4
        });
        let shifted = Tensor::from_fn(&[2, n, n], |ix| {
            base.data()[(ix[0] * n + (ix[1] + sy) % n) * n + (ix[2] + sx) % n]
        });

        // Burgers: stencil + pointwise terms commute with shifts bit-exactly.
        let mut g = Graph::new();
        let ops = classical_ops(&mut g, 1.0 / n as f64);
        let s0 = g.constant(base.clone());
        let s1 = g.constant(shifted.clone());
        let spec = SystemSpec::Burgers { nu: 0.002 };
        let r0 = rhs_burgers(&mut g, s0, s0, &ops, &spec).unwrap();
        let r1 = rhs_burgers(&mut g, s1, s1, &ops, &spec).unwrap();
        for c in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    let a = g.value(r0).data()[(c * n + (i + sy) % n) * n + (j + sx) % n];
                    let b = g.value(r1).data()[(c * n + i) * n + j];
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }

        // NS routes through the spectral Poisson solve, whose FFT butterflies
        // reorder sums under a shift; equivariant to rounding, not bitwise.
        let grid = Grid::new(n, std::f64::consts::TAU);
        let mut g2 = Graph::new();
        let ops2 = classical_ops(&mut g2, grid.dx());
        let ns = SystemSpec::NavierStokes { re: 1000.0 };
        let f = ForcingSpec::None;
        let mut eval = |state: &Tensor<f64>| -> Tensor<f64> {
            let s = g2.constant(state.clone());
            let fv = f.evaluate(&mut g2, &grid, s).unwrap();
            let psi = crate::poisson::vorticity_source(&mut g2, s, Some(fv), &ops2).unwrap();
            let pr = crate::poisson::solve_poisson_spectral(&mut g2, psi, &grid).unwrap();
            let r = rhs_navier_stokes(&mut g2, s, s, Some(pr), &ops2, &ns, fv, None).unwrap();
            g2.value(r).clone()
        };
        let n0 = eval(&base);
        let n1 = eval(&shifted);
        for c in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    let a = n0.data()[(c * n + (i + sy) % n) * n + (j + sx) % n];
                    let b = n1.data()[(c * n + i) * n + j];
                    assert!((a - b).abs() < 1e-13, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn forcing_families_match_direct_substitution() {
        let grid = Grid::new(64, std::f64::consts::TAU);
        // f6 vanishes.
        let f6 = ForcingSpec::family(6).unwrap();
        let z = Tensor::zeros(&[2, 64, 64]);
        let v6 = f6.evaluate_value(&grid, &z).unwrap();
        assert!(v6.data().iter().all(|&x| x == 0.0));

        // training default at y = pi/8, u = 0: f_x = sin(pi/2) = 1.
        let fd = ForcingSpec::training_default();
        let vd = fd.evaluate_value(&grid, &z).unwrap();
        let row = (std::f64::consts::PI / 8.0 / grid.dx()).round() as usize;
        assert!((vd.data()[row * 64] - 1.0).abs() < 1e-12);
        assert!(vd.data()[64 * 64..].iter().all(|&x| x == 0.0));

        // f2 at u = (1, 0), y = 0: f = (-0.4, 0).
        let f2 = ForcingSpec::family(2).unwrap();
        let ones_u = Tensor::from_fn(&[2, 64, 64], |ix| if ix[0] == 0 { 1.0 } else { 0.0 });
        let v2 = f2.evaluate_value(&grid, &ones_u).unwrap();
        assert!((v2.data()[0] - (-0.4)).abs() < 1e-12);
        assert_eq!(v2.data()[64 * 64], 0.0);
    }

    #[test]
    fn re_embedding_scales_as_inverse_reynolds() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_vec(&[4], vec![1.0; 4]).unwrap());
        let b = g.constant(Tensor::from_vec(&[4], vec![1.0; 4]).unwrap());
        let m = re_embedding_map(&mut g, a, b, 1000.0).unwrap();
        assert!(g.value(m).data().iter().all(|&x| (x - 0.001).abs() < 1e-15));
        let m2 = re_embedding_map(&mut g, a, b, 2000.0).unwrap();
        for i in 0..16 {
            assert!((g.value(m2).data()[i] - 0.5 * g.value(m).data()[i]).abs() < 1e-18);
        }
        let za = g.constant(Tensor::zeros(&[4]));
        let mz = re_embedding_map(&mut g, za, b, 1000.0).unwrap();
        assert!(g.value(mz).data().iter().all(|&x| x == 0.0));
        assert!(re_embedding_map(&mut g, a, b, 0.0).is_err());
    }
}
