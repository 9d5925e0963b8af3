//! The two learned correction operators: the correction block producing the
//! corrected state used for derivative estimation, and the NN block
//! producing the additive trajectory correction.
//!
//! Both share the same spectral backbone: a per-pixel lift, L Fourier layers
//! `v <- gelu(W v + ifft2(R (.) truncate(fft2 v)))`, and a two-stage
//! per-pixel projection whose final map is zero-initialised so the untrained
//! operator is exactly the identity (correction block, residual form) or
//! exactly zero (NN block).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{Real, Tensor};

/// Architecture of one spectral block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionBlockConfig {
    pub layers: usize,
    pub modes: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Hidden width of the two-stage projection.
    pub projection: usize,
}

impl CorrectionBlockConfig {
    /// Correction-block preset for a given system family (L = 2 throughout).
    pub fn correction_preset(width: usize, modes: usize, projection: usize, channels: usize) -> Self {
        CorrectionBlockConfig {
            layers: 2,
            modes,
            width,
            in_channels: channels,
            out_channels: channels,
            projection,
        }
    }

    /// NN-block preset: L = 5, modes = grid/2 - 2, width = modes.
    pub fn nn_preset(grid: usize, in_channels: usize, out_channels: usize) -> Self {
        let modes = (grid / 2).saturating_sub(2).max(1);
        CorrectionBlockConfig {
            layers: 5,
            modes,
            width: modes,
            in_channels,
            out_channels,
            projection: 128,
        }
    }

    pub fn validate(&self, grid: usize) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("spectral block needs at least one layer".into()));
        }
        if 2 * self.modes > grid {
            return Err(Error::ModesTooLarge {
                modes: self.modes,
                h: grid,
                w: grid,
            });
        }
        Ok(())
    }

    /// Total number of real scalars a block with this config owns.
    pub fn param_count(&self) -> usize {
        let lift = self.width * self.in_channels + self.width;
        let per_layer = 2 * self.width * self.width * self.modes * self.modes
            + self.width * self.width
            + self.width;
        let proj = self.projection * self.width
            + self.projection
            + self.out_channels * self.projection
            + self.out_channels;
        lift + self.layers * per_layer + proj
    }
}

/// Parameter handles for one Fourier layer.
#[derive(Debug, Clone, Copy)]
pub struct SpectralLayerParams {
    pub r: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

/// Parameter handles for a full spectral block.
#[derive(Debug, Clone)]
pub struct SpectralBlockParams {
    pub cfg: CorrectionBlockConfig,
    pub lift_w: ParamId,
    pub lift_b: ParamId,
    pub layers: Vec<SpectralLayerParams>,
    pub proj1_w: ParamId,
    pub proj1_b: ParamId,
    pub proj2_w: ParamId,
    pub proj2_b: ParamId,
}

fn uniform_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

fn uniform_complex_tensor<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product::<usize>() * 2;
    let data = (0..n)
        .map(|_| T::of_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec_complex(shape, data).expect("shape/data agree")
}

impl SpectralBlockParams {
    /// Registers all block parameters under `prefix.`. Spectral weights start
    /// at uniform(-1/width^2, 1/width^2); the final projection starts at zero.
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: CorrectionBlockConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let w = cfg.width;
        let lift_bound = 1.0 / (cfg.in_channels as f64).sqrt();
        let lift_w = store.register(
            &format!("{prefix}.lift.w"),
            uniform_tensor(rng, &[w, cfg.in_channels], lift_bound),
        );
        let lift_b = store.register(&format!("{prefix}.lift.b"), Tensor::zeros(&[w]));

        let spectral_bound = 1.0 / (w * w) as f64;
        let mix_bound = 1.0 / (w as f64).sqrt();
        let layers = (0..cfg.layers)
            .map(|l| SpectralLayerParams {
                r: store.register(
                    &format!("{prefix}.layer{l}.r"),
                    uniform_complex_tensor(rng, &[w, w, cfg.modes, cfg.modes], spectral_bound),
                ),
                w: store.register(
                    &format!("{prefix}.layer{l}.w"),
                    uniform_tensor(rng, &[w, w], mix_bound),
                ),
                b: store.register(&format!("{prefix}.layer{l}.b"), Tensor::zeros(&[w])),
            })
            .collect();

        let proj1_w = store.register(
            &format!("{prefix}.proj1.w"),
            uniform_tensor(rng, &[cfg.projection, w], mix_bound),
        );
        let proj1_b = store.register(&format!("{prefix}.proj1.b"), Tensor::zeros(&[cfg.projection]));
        let proj2_w = store.register(
            &format!("{prefix}.proj2.w"),
            Tensor::zeros(&[cfg.out_channels, cfg.projection]),
        );
        let proj2_b = store.register(&format!("{prefix}.proj2.b"), Tensor::zeros(&[cfg.out_channels]));

        SpectralBlockParams {
            cfg,
            lift_w,
            lift_b,
            layers,
            proj1_w,
            proj1_b,
            proj2_w,
            proj2_b,
        }
    }

    /// The raw block map Q(layers(P(x))): `[in_channels, H, W]` to
    /// `[out_channels, H, W]`. No residual.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: Var,
    ) -> Result<Var> {
        let (c, h, w) = g.value(input).as_planes()?;
        if c != self.cfg.in_channels {
            return Err(Error::ChannelMismatch {
                context: "spectral block input",
                expected: self.cfg.in_channels,
                got: c,
            });
        }
        if h < 2 * self.cfg.modes || w < 2 * self.cfg.modes {
            return Err(Error::ModesTooLarge {
                modes: self.cfg.modes,
                h,
                w,
            });
        }
        let lw = g.param(store, self.lift_w);
        let lb = g.param(store, self.lift_b);
        let mut v = g.channel_mix(input, lw, lb)?;
        for layer in &self.layers {
            v = spectral_layer_forward(g, store, layer, v, self.cfg.modes)?;
        }
        let p1w = g.param(store, self.proj1_w);
        let p1b = g.param(store, self.proj1_b);
        let hid = g.channel_mix(v, p1w, p1b)?;
        let hid = g.gelu(hid);
        let p2w = g.param(store, self.proj2_w);
        let p2b = g.param(store, self.proj2_b);
        g.channel_mix(hid, p2w, p2b)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.lift_w, self.lift_b];
        for l in &self.layers {
            ids.extend([l.r, l.w, l.b]);
        }
        ids.extend([self.proj1_w, self.proj1_b, self.proj2_w, self.proj2_b]);
        ids
    }
}

/// One Fourier layer: `gelu(channel_mix(v, W) + ifft2(R (.) truncate(fft2 v)))`.
pub fn spectral_layer_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    layer: &SpectralLayerParams,
    v: Var,
    modes: usize,
) -> Result<Var> {
    let spectrum = g.fft2(v)?;
    let r = g.param(store, layer.r);
    let mixed = g.spectral_mix(spectrum, r, modes)?;
    let spatial = g.ifft2(mixed)?;
    let w = g.param(store, layer.w);
    let b = g.param(store, layer.b);
    let local = g.channel_mix(v, w, b)?;
    let sum = g.add(local, spatial)?;
    Ok(g.gelu(sum))
}

/// Residual corrected state for derivative estimation: `u + block(u)`.
/// With the zero-initialised final projection this is exactly `u`.
pub fn correction_block_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: &SpectralBlockParams,
    u: Var,
) -> Result<Var> {
    let delta = block.forward(g, store, u)?;
    g.add(u, delta)
}

/// Additive trajectory correction from the assembled input stack.
pub fn nn_block_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    block: &SpectralBlockParams,
    stack: Var,
) -> Result<Var> {
    block.forward(g, store, stack)
}
