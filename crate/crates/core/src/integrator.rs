//! Time marching of the learnable right-hand side: RK4 (default), first-order
//! Euler (ablation), and the autoregressive rollout chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Real;

/// A right-hand-side (or one-step) evaluator recorded on the tape.
pub type StepFn<'a, T> = dyn FnMut(&mut Graph<T>, Var, f64) -> Result<Var> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Rk4,
    Euler,
}

/// Integrator choice plus the coarse time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepScheme {
    pub kind: SchemeKind,
    pub dt: f64,
}

impl StepScheme {
    pub fn new(kind: SchemeKind, dt: f64) -> Result<Self> {
        if dt <= 0.0 {
            return Err(Error::NonPositive {
                name: "dt",
                value: dt,
            });
        }
        Ok(StepScheme { kind, dt })
    }

    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        rhs: &mut StepFn<'_, T>,
        u: Var,
        t: f64,
    ) -> Result<Var> {
        match self.kind {
            SchemeKind::Rk4 => rk4_step(g, rhs, u, t, self.dt),
            SchemeKind::Euler => euler_step(g, rhs, u, t, self.dt),
        }
    }
}

fn check_stage<T: Real>(g: &Graph<T>, v: Var, stage: usize) -> Result<()> {
    if !g.value(v).all_finite() {
        return Err(Error::NonFiniteStage { stage });
    }
    Ok(())
}

/// Classical fourth-order Runge-Kutta update: four slopes s1..s4, then
/// `u + dt/6 (s1 + 2 s2 + 2 s3 + s4)`. Differentiable through all four
/// evaluations of the right-hand side.
pub fn rk4_step<T: Real>(
    g: &mut Graph<T>,
    rhs: &mut StepFn<'_, T>,
    u: Var,
    t: f64,
    dt: f64,
) -> Result<Var> {
    let s1 = rhs(g, u, t)?;
    check_stage(g, s1, 1)?;
    let half1 = g.scale(s1, dt / 2.0);
    let u2 = g.add(u, half1)?;
    let s2 = rhs(g, u2, t + dt / 2.0)?;
    check_stage(g, s2, 2)?;
    let half2 = g.scale(s2, dt / 2.0);
    let u3 = g.add(u, half2)?;
    let s3 = rhs(g, u3, t + dt / 2.0)?;
    check_stage(g, s3, 3)?;
    let full = g.scale(s3, dt);
    let u4 = g.add(u, full)?;
    let s4 = rhs(g, u4, t + dt)?;
    check_stage(g, s4, 4)?;

    let s2x2 = g.scale(s2, 2.0);
    let s3x2 = g.scale(s3, 2.0);
    let sum = g.add(s1, s2x2)?;
    let sum = g.add(sum, s3x2)?;
    let sum = g.add(sum, s4)?;
    let incr = g.scale(sum, dt / 6.0);
    g.add(u, incr)
}

/// First-order explicit Euler: `u + dt * H(u, t)`.
pub fn euler_step<T: Real>(
    g: &mut Graph<T>,
    rhs: &mut StepFn<'_, T>,
    u: Var,
    t: f64,
    dt: f64,
) -> Result<Var> {
    let s = rhs(g, u, t)?;
    check_stage(g, s, 1)?;
    let incr = g.scale(s, dt);
    g.add(u, incr)
}

/// Autoregressive chain of `steps` one-step updates. Returns the sequence
/// `[u_0, u_1, ..., u_steps]`; gradients flow through the whole chain.
/// Any state whose magnitude exceeds `divergence_threshold` aborts with the
/// offending step index.
pub fn rollout<T: Real>(
    g: &mut Graph<T>,
    step: &mut StepFn<'_, T>,
    u0: Var,
    steps: usize,
    dt: f64,
    divergence_threshold: f64,
) -> Result<Vec<Var>> {
    let mut states = Vec::with_capacity(steps + 1);
    states.push(u0);
    let mut u = u0;
    for k in 0..steps {
        u = step(g, u, k as f64 * dt)?;
        let max_abs = g.value(u).max_abs().as_f64();
        if !max_abs.is_finite() || max_abs > divergence_threshold {
            return Err(Error::Diverged {
                step: k + 1,
                max_abs,
                threshold: divergence_threshold,
            });
        }
        states.push(u);
    }
    Ok(states)
}
