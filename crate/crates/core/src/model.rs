//! The full coarse solver: learnable stencil + corrected-state PDE right-hand
//! side marched by the integrator, plus the additive NN-block correction.
//!
//! The upper path computes RK4(H) where every H evaluation corrects the
//! stage state, estimates derivatives with the shared symmetric filter, and
//! (for NS) closes the pressure with the spectral Poisson solve. The lower
//! path assembles the state/pressure/derivative/forcing stack at the step's
//! base state and adds the NN block's output to the marched result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correction::{
    correction_block_forward, nn_block_forward, CorrectionBlockConfig, SpectralBlockParams,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::integrator::{rollout, SchemeKind, StepScheme};
use crate::pde::{re_embedding_map, rhs, ForcingSpec, Grid, SystemKind, SystemSpec};
use crate::poisson::{solve_poisson_spectral, vorticity_source};
use crate::stencil::{build_kernel, StencilOps, SymmetricFilterParams};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// The seven-parameter symmetric template (default).
    Symmetric,
    /// A free 5x5 kernel with 25 independent weights (ablation Model 1).
    Free,
    /// Frozen classical fourth-order stencil (ablation Model 2).
    FixedFd,
}

/// Everything needed to rebuild the model: system, discretisation, blocks,
/// and ablation switches. Serialised into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub system: SystemSpec,
    pub forcing: ForcingSpec,
    pub grid: Grid,
    pub scheme: StepScheme,
    pub filter_mode: FilterMode,
    pub correction: Option<CorrectionBlockConfig>,
    pub nn_block: Option<CorrectionBlockConfig>,
    pub re_embedding: bool,
    pub divergence_threshold: f64,
    pub init_seed: u64,
}

/// Channel count of the NN-block input stack: state (2), derivatives (4) and
/// forcing (2), plus pressure (1), pressure gradient (2) and Re map (1) for
/// Navier-Stokes.
pub fn nn_input_channels(kind: SystemKind, re_embedding: bool) -> usize {
    match kind {
        SystemKind::NavierStokes => 11 + usize::from(re_embedding),
        _ => 8,
    }
}

impl ModelConfig {
    /// Full-recipe defaults per system on the given coarse grid.
    pub fn default_for(system: SystemSpec, grid: Grid, dt: f64) -> Result<ModelConfig> {
        let scheme = StepScheme::new(SchemeKind::Rk4, dt)?;
        let ch = system.channels();
        let (correction, nn_block, forcing, re_embedding) = match system.kind() {
            SystemKind::Burgers => (
                Some(CorrectionBlockConfig::correction_preset(12, 12, 50, ch)),
                None,
                ForcingSpec::None,
                false,
            ),
            SystemKind::GrayScott | SystemKind::FitzhughNagumo => (
                Some(CorrectionBlockConfig::correction_preset(20, 12, 50, ch)),
                Some(CorrectionBlockConfig::nn_preset(
                    grid.size,
                    nn_input_channels(system.kind(), false),
                    ch,
                )),
                ForcingSpec::None,
                false,
            ),
            SystemKind::NavierStokes => (
                Some(CorrectionBlockConfig::correction_preset(20, 25, 128, ch)),
                Some(CorrectionBlockConfig::nn_preset(
                    grid.size,
                    nn_input_channels(system.kind(), true),
                    ch,
                )),
                ForcingSpec::training_default(),
                true,
            ),
        };
        Ok(ModelConfig {
            system,
            forcing,
            grid,
            scheme,
            filter_mode: FilterMode::Symmetric,
            correction,
            nn_block,
            re_embedding,
            divergence_threshold: 1e6,
            init_seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if let Some(c) = &self.correction {
            c.validate(self.grid.size)?;
            if c.in_channels != self.system.channels() || c.out_channels != self.system.channels()
            {
                return Err(Error::ChannelMismatch {
                    context: "correction block config",
                    expected: self.system.channels(),
                    got: c.in_channels,
                });
            }
        }
        if let Some(n) = &self.nn_block {
            n.validate(self.grid.size)?;
            let want = nn_input_channels(self.system.kind(), self.re_embedding);
            if n.in_channels != want {
                return Err(Error::ChannelMismatch {
                    context: "nn block config",
                    expected: want,
                    got: n.in_channels,
                });
            }
        }
        if self.re_embedding && self.system.kind() != SystemKind::NavierStokes {
            return Err(Error::Config(
                "re_embedding only applies to navier_stokes".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum FilterHandles {
    Symmetric([ParamId; 7]),
    Free(ParamId),
    Fixed,
}

/// A constructed model: parameter handles bound to one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct CoarseModel {
    pub cfg: ModelConfig,
    filter: FilterHandles,
    pub correction: Option<SpectralBlockParams>,
    pub nn: Option<SpectralBlockParams>,
    pub re_vecs: Option<(ParamId, ParamId)>,
}

impl CoarseModel {
    /// Registers all parameters (deterministically from `cfg.init_seed`) and
    /// returns the assembled model.
    pub fn init<T: Real>(cfg: ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);

        let filter = match cfg.filter_mode {
            FilterMode::Symmetric => {
                let p = SymmetricFilterParams::<T>::init_perturbed(&mut rng);
                let mut ids = [ParamId::default(); 7];
                for (i, v) in p.a.iter().enumerate() {
                    ids[i] = store.register(&format!("filter.a{}", i + 1), Tensor::scalar(*v));
                }
                FilterHandles::Symmetric(ids)
            }
            FilterMode::Free => {
                // A regular convolution with the standard fan-in uniform
                // init; no derivative structure is assumed.
                let bound = 1.0 / 25f64.sqrt();
                let data: Vec<T> = (0..25)
                    .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
                    .collect();
                let id = store.register(
                    "filter.free",
                    Tensor::from_vec(&[5, 5], data).expect("5x5"),
                );
                FilterHandles::Free(id)
            }
            FilterMode::FixedFd => {
                // Registered (so diagnostics can inspect them) but frozen and
                // never bound to the tape: their gradients stay exactly zero.
                let p = SymmetricFilterParams::<T>::classical();
                for (i, v) in p.a.iter().enumerate() {
                    let id = store.register(&format!("filter.a{}", i + 1), Tensor::scalar(*v));
                    store.set_trainable(id, false);
                }
                FilterHandles::Fixed
            }
        };

        let correction = cfg
            .correction
            .map(|c| SpectralBlockParams::register(store, "correction", c, &mut rng));
        let nn = cfg
            .nn_block
            .map(|c| SpectralBlockParams::register(store, "nn", c, &mut rng));

        let re_vecs = if cfg.re_embedding {
            let n = cfg.grid.size;
            let mk = |rng: &mut ChaCha8Rng| {
                let data: Vec<T> = (0..n).map(|_| T::of_f64(rng.gen_range(-0.1..0.1))).collect();
                Tensor::from_vec(&[n], data).expect("vector")
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            Some((
                store.register("re.vec_a", a),
                store.register("re.vec_b", b),
            ))
        } else {
            None
        };

        Ok(CoarseModel {
            cfg,
            filter,
            correction,
            nn,
            re_vecs,
        })
    }

    /// The 5x5 derivative kernel node for this forward pass.
    pub fn kernel<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Var> {
        match &self.filter {
            FilterHandles::Symmetric(ids) => {
                let mut a = [Var::default(); 7];
                for (slot, id) in a.iter_mut().zip(ids) {
                    *slot = g.param(store, *id);
                }
                g.symmetric_kernel(a)
            }
            FilterHandles::Free(id) => Ok(g.param(store, *id)),
            FilterHandles::Fixed => {
                let k = build_kernel(&SymmetricFilterParams::<T>::classical());
                Ok(g.constant(Tensor::from_vec(&[5, 5], k.entries().to_vec())?))
            }
        }
    }

    /// Current symmetric filter parameter values (None in free mode).
    pub fn filter_values<T: Real>(&self, store: &ParamStore<T>) -> Option<SymmetricFilterParams<T>> {
        match &self.filter {
            FilterHandles::Symmetric(ids) => {
                let mut a = [T::zero(); 7];
                for (slot, id) in a.iter_mut().zip(ids) {
                    *slot = store.value(*id).data()[0];
                }
                Some(SymmetricFilterParams { a })
            }
            FilterHandles::Fixed => Some(SymmetricFilterParams::classical()),
            FilterHandles::Free(_) => None,
        }
    }

    fn stencil_ops<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<StencilOps> {
        let k = self.kernel(g, store)?;
        let dx = self.cfg.grid.dx();
        StencilOps::new(g, k, dx, dx)
    }

    /// Corrected state for derivative estimation (identity when ablated).
    pub fn corrected<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        u: Var,
    ) -> Result<Var> {
        match &self.correction {
            Some(block) => correction_block_forward(g, store, block, u),
            None => Ok(u),
        }
    }

    fn re_map<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Option<Var>> {
        let Some((a, b)) = self.re_vecs else {
            return Ok(None);
        };
        let SystemSpec::NavierStokes { re } = self.cfg.system else {
            return Ok(None);
        };
        let av = g.param(store, a);
        let bv = g.param(store, b);
        Ok(Some(re_embedding_map(g, av, bv, re)?))
    }

    /// One evaluation of the learnable right-hand side at state `u`.
    pub fn rhs<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        u: Var,
        _t: f64,
    ) -> Result<Var> {
        let ops = self.stencil_ops(g, store)?;
        let hat = self.corrected(g, store, u)?;
        match self.cfg.system.kind() {
            SystemKind::NavierStokes => {
                let f = self.cfg.forcing.evaluate(g, &self.cfg.grid, u)?;
                let psi = vorticity_source(g, hat, Some(f), &ops)?;
                let p = solve_poisson_spectral(g, psi, &self.cfg.grid)?;
                let re_map = self.re_map(g, store)?;
                rhs(
                    g,
                    &self.cfg.system,
                    u,
                    hat,
                    &ops,
                    Some(p),
                    Some(f),
                    re_map,
                )
            }
            _ => rhs(g, &self.cfg.system, u, hat, &ops, None, None, None),
        }
    }

    /// Pressure decoupled from the (corrected) state, for diagnostics and
    /// the NN input stack.
    pub fn pressure<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        u: Var,
    ) -> Result<Var> {
        let ops = self.stencil_ops(g, store)?;
        let hat = self.corrected(g, store, u)?;
        let f = self.cfg.forcing.evaluate(g, &self.cfg.grid, u)?;
        let psi = vorticity_source(g, hat, Some(f), &ops)?;
        solve_poisson_spectral(g, psi, &self.cfg.grid)
    }

    /// Input stack for the NN block at the step's base state: corrected
    /// state, (pressure,) first derivatives, (pressure gradient,) forcing,
    /// (Re map).
    pub fn nn_stack<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        u: Var,
    ) -> Result<Var> {
        let ops = self.stencil_ops(g, store)?;
        let hat = self.corrected(g, store, u)?;
        let f = self.cfg.forcing.evaluate(g, &self.cfg.grid, u)?;
        let hu = g.channel(hat, 0)?;
        let hv = g.channel(hat, 1)?;
        let mut parts = vec![hu, hv];
        let is_ns = self.cfg.system.kind() == SystemKind::NavierStokes;
        let mut pressure = None;
        if is_ns {
            let psi = vorticity_source(g, hat, Some(f), &ops)?;
            let p = solve_poisson_spectral(g, psi, &self.cfg.grid)?;
            parts.push(p);
            pressure = Some(p);
        }
        for ch in [hu, hv] {
            let cx = ops.dx(g, ch)?;
            let cy = ops.dy(g, ch)?;
            parts.push(cx);
            parts.push(cy);
        }
        if let Some(p) = pressure {
            let px = ops.dx(g, p)?;
            let py = ops.dy(g, p)?;
            parts.push(px);
            parts.push(py);
        }
        let f0 = g.channel(f, 0)?;
        let f1 = g.channel(f, 1)?;
        parts.push(f0);
        parts.push(f1);
        if is_ns {
            if let Some(map) = self.re_map(g, store)? {
                parts.push(map);
            }
        }
        g.stack_channels(&parts)
    }

    /// One coarse step: integrator output plus the NN-block correction.
    pub fn one_step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        u: Var,
        t: f64,
    ) -> Result<Var> {
        let mut rhs_fn = |g: &mut Graph<T>, u: Var, t: f64| self.rhs(g, store, u, t);
        let stepped = self.cfg.scheme.step(g, &mut rhs_fn, u, t)?;
        match &self.nn {
            Some(block) => {
                let stack = self.nn_stack(g, store, u)?;
                let corr = nn_block_forward(g, store, block, stack)?;
                g.add(stepped, corr)
            }
            None => Ok(stepped),
        }
    }

    /// Autoregressive rollout recorded on one tape (gradients flow through
    /// the whole chain).
    pub fn rollout_tape<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        u0: Var,
        steps: usize,
    ) -> Result<Vec<Var>> {
        rollout(
            g,
            &mut |g, u, t| self.one_step(g, store, u, t),
            u0,
            steps,
            self.cfg.scheme.dt,
            self.cfg.divergence_threshold,
        )
    }

    /// Inference rollout with one short-lived tape per step, so memory stays
    /// flat over long horizons.
    pub fn rollout_values<T: Real>(
        &self,
        store: &ParamStore<T>,
        u0: &Tensor<T>,
        steps: usize,
    ) -> Result<Vec<Tensor<T>>> {
        let mut states = Vec::with_capacity(steps + 1);
        states.push(u0.clone());
        let mut current = u0.clone();
        for k in 0..steps {
            let mut g = Graph::new();
            let uv = g.constant(current);
            let next = self.one_step(&mut g, store, uv, k as f64 * self.cfg.scheme.dt)?;
            let max_abs = g.value(next).max_abs().as_f64();
            if !max_abs.is_finite() || max_abs > self.cfg.divergence_threshold {
                return Err(Error::Diverged {
                    step: k + 1,
                    max_abs,
                    threshold: self.cfg.divergence_threshold,
                });
            }
            current = g.value(next).clone();
            states.push(current.clone());
        }
        Ok(states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_cfg(kind: SystemKind, n: usize) -> ModelConfig {
        let system = match kind {
            SystemKind::Burgers => SystemSpec::burgers_default(),
            SystemKind::GrayScott => SystemSpec::gray_scott_default(),
            SystemKind::FitzhughNagumo => SystemSpec::fitzhugh_nagumo_default(),
            SystemKind::NavierStokes => SystemSpec::navier_stokes_default(),
        };
        let grid = Grid::new(n, system.default_extent());
        let mut cfg = ModelConfig::default_for(system, grid, 1e-3).unwrap();
        // shrink the blocks for fast tests
        if let Some(c) = cfg.correction.as_mut() {
            c.modes = 4;
            c.width = 6;
            c.projection = 8;
        }
        if let Some(nb) = cfg.nn_block.as_mut() {
            nb.modes = 4;
            nb.width = 6;
            nb.projection = 8;
        }
        cfg
    }

    fn smooth_ic(n: usize) -> Tensor<f64> {
        let h = std::f64::consts::TAU / n as f64;
        Tensor::from_fn(&[2, n, n], |ix| {
            let (x, y) = (ix[2] as f64 * h, ix[1] as f64 * h);
            if ix[0] == 0 {
                (x).sin() * (y).cos() * 0.8
            } else {
                -(x).cos() * (y).sin() * 0.8
            }
        })
    }

    #[test]
    fn zero_initialised_model_equals_pure_pde_block_bitwise() {
        for kind in [SystemKind::Burgers, SystemKind::NavierStokes] {
            let n = 16;
            let cfg_full = smoke_cfg(kind, n);
            let mut cfg_bare = cfg_full.clone();
            cfg_bare.correction = None;
            cfg_bare.nn_block = None;

            let mut store_full: ParamStore<f64> = ParamStore::new();
            let full = CoarseModel::init(cfg_full, &mut store_full).unwrap();
            let mut store_bare: ParamStore<f64> = ParamStore::new();
            let bare = CoarseModel::init(cfg_bare, &mut store_bare).unwrap();
            // Align shared parameters (init draws differ in sequence).
            let mut names: Vec<String> = (1..=7).map(|i| format!("filter.a{i}")).collect();
            names.push("re.vec_a".into());
            names.push("re.vec_b".into());
            for name in names {
                if let (Some(a), Some(b)) = (store_full.lookup(&name), store_bare.lookup(&name)) {
                    let v = store_full.value(a).clone();
                    *store_bare.value_mut(b) = v;
                }
            }

            let ic = smooth_ic(n);
            let a = full.rollout_values(&store_full, &ic, 3).unwrap();
            let b = bare.rollout_values(&store_bare, &ic, 3).unwrap();
            for (ta, tb) in a.iter().zip(&b) {
                for (x, y) in ta.data().iter().zip(tb.data()) {
                    assert_eq!(x.to_bits(), y.to_bits(), "system {kind:?}");
                }
            }
        }
    }

    #[test]
    fn ns_stack_has_twelve_channels() {
        let n = 16;
        let cfg = smoke_cfg(SystemKind::NavierStokes, n);
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = CoarseModel::init(cfg, &mut store).unwrap();
        let mut g = Graph::new();
        let u = g.constant(smooth_ic(n));
        let stack = model.nn_stack(&mut g, &store, u).unwrap();
        assert_eq!(g.value(stack).shape(), &[12, n, n]);

        let cfg2 = smoke_cfg(SystemKind::GrayScott, n);
        let mut store2: ParamStore<f64> = ParamStore::new();
        let model2 = CoarseModel::init(cfg2, &mut store2).unwrap();
        let mut g2 = Graph::new();
        let u2 = g2.constant(smooth_ic(n));
        let stack2 = model2.nn_stack(&mut g2, &store2, u2).unwrap();
        assert_eq!(g2.value(stack2).shape(), &[8, n, n]);
    }

    #[test]
    fn rollout_values_matches_rollout_tape() {
        let n = 16;
        let cfg = smoke_cfg(SystemKind::Burgers, n);
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = CoarseModel::init(cfg, &mut store).unwrap();
        let ic = smooth_ic(n);

        let vals = model.rollout_values(&store, &ic, 4).unwrap();
        let mut g = Graph::new();
        let u0 = g.constant(ic);
        let tape = model.rollout_tape(&mut g, &store, u0, 4).unwrap();
        assert_eq!(vals.len(), 5);
        assert_eq!(tape.len(), 5);
        for (t, v) in tape.iter().zip(&vals) {
            for (a, b) in g.value(*t).data().iter().zip(v.data()) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn fixed_fd_mode_keeps_filter_params_frozen() {
        let n = 16;
        let mut cfg = smoke_cfg(SystemKind::Burgers, n);
        cfg.filter_mode = FilterMode::FixedFd;
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = CoarseModel::init(cfg, &mut store).unwrap();

        let mut g = Graph::new();
        let u0 = g.constant(smooth_ic(n));
        let states = model.rollout_tape(&mut g, &store, u0, 2).unwrap();
        let last = *states.last().unwrap();
        let sq = g.mul(last, last).unwrap();
        let loss = g.mean_all(sq);
        store.zero_grads();
        g.backward(loss, &mut store).unwrap();
        for i in 1..=7 {
            let id = store.lookup(&format!("filter.a{i}")).unwrap();
            assert!(store.grad(id).data().iter().all(|&x| x == 0.0));
            assert!(!store.get(id).trainable);
        }
    }

    #[test]
    fn free_filter_mode_trains_a_full_kernel() {
        let n = 16;
        let mut cfg = smoke_cfg(SystemKind::Burgers, n);
        cfg.filter_mode = FilterMode::Free;
        let mut store: ParamStore<f64> = ParamStore::new();
        let model = CoarseModel::init(cfg, &mut store).unwrap();
        let id = store.lookup("filter.free").unwrap();
        assert_eq!(store.value(id).shape(), &[5, 5]);

        let mut g = Graph::new();
        let u0 = g.constant(smooth_ic(n));
        let states = model.rollout_tape(&mut g, &store, u0, 1).unwrap();
        let last = *states.last().unwrap();
        let sq = g.mul(last, last).unwrap();
        let loss = g.mean_all(sq);
        store.zero_grads();
        g.backward(loss, &mut store).unwrap();
        assert!(store.grad(id).data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let n = 16;
        let mut cfg = smoke_cfg(SystemKind::Burgers, n);
        cfg.re_embedding = true;
        assert!(cfg.validate().is_err());

        let mut cfg2 = smoke_cfg(SystemKind::NavierStokes, n);
        if let Some(c) = cfg2.nn_block.as_mut() {
            c.in_channels = 5;
        }
        assert!(cfg2.validate().is_err());
    }
}
