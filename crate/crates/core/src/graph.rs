//! Reverse-mode autodiff on a linear tape.
//!
//! Each operation appends a node holding its forward value; `backward`
//! replays the tape in reverse, accumulating gradients additively across
//! fan-out and depositing leaf gradients into the [`ParamStore`]. The op set
//! is exactly what the solver pipeline needs: pointwise arithmetic, the 5x5
//! circular cross-correlation, per-pixel channel mixing, FFT pairs, the
//! spectral mode mixer, and a few structural ops (channel stack/select,
//! outer product, the symmetric kernel template).
//!
//! Complex tensors carry interleaved (re, im) pairs; their gradient tensors
//! use the same layout with independent d/d(re) and d/d(im) entries.

use std::collections::HashMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{pad_periodic, Real, Tensor};

/// Handle to a node on the tape. Only valid for the graph that produced it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a named parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Dense registration index (also the position in aligned side tables
    /// such as optimizer moments).
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Flat registry of model parameters. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let grad = if value.is_complex() {
            Tensor::zeros_complex(value.shape())
        } else {
            Tensor::zeros(value.shape())
        };
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
            trainable: true,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].grad
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }
}

const KERNEL_SIZE: usize = 5;
const PAD: usize = 2;

/// (row, col, param index 0..6, coefficient) triples of the symmetric
/// 5x5 derivative template. The centre cell stays zero.
const SYM_TEMPLATE: [(usize, usize, usize, f64); 24] = [
    (0, 0, 0, 1.0),
    (0, 1, 3, 1.0),
    (0, 2, 6, 1.0),
    (0, 3, 3, -1.0),
    (0, 4, 0, -1.0),
    (1, 0, 1, 1.0),
    (1, 1, 4, 1.0),
    (1, 2, 6, -2.0),
    (1, 3, 4, -1.0),
    (1, 4, 1, -1.0),
    (2, 0, 2, 1.0),
    (2, 1, 5, 1.0),
    (2, 3, 5, -1.0),
    (2, 4, 2, -1.0),
    (3, 0, 1, -1.0),
    (3, 1, 4, -1.0),
    (3, 2, 6, 2.0),
    (3, 3, 4, 1.0),
    (3, 4, 1, 1.0),
    (4, 0, 0, -1.0),
    (4, 1, 3, -1.0),
    (4, 2, 6, -1.0),
    (4, 3, 3, 1.0),
    (4, 4, 0, 1.0),
];

/// Fills a 5x5 kernel from the seven template parameters. Mirror cells are
/// exact IEEE negations of each other, which the moment diagnostics rely on.
pub fn fill_symmetric_kernel<T: Real>(a: &[T; 7]) -> [T; 25] {
    let mut k = [T::zero(); 25];
    for &(r, c, p, coef) in SYM_TEMPLATE.iter() {
        k[r * 5 + c] = T::of_f64(coef) * a[p];
    }
    k
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, #[allow(dead_code)] f64),
    Gelu(Var),
    CrossCorr2d { field: Var, kernel: Var },
    ChannelMix { x: Var, w: Var, b: Var },
    Fft2(Var),
    Ifft2(Var),
    SpectralMix { z: Var, r: Var, modes: usize },
    MulMap { x: Var, map: Var },
    Channel { x: Var, idx: usize },
    StackChannels(Vec<Var>),
    SumAll(Var),
    Outer { a: Var, b: Var },
    SymKernel([Var; 7]),
    Transpose2d(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// Forward tape. One graph per forward pass; not shareable across threads.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    param_cache: HashMap<ParamId, Var>,
    planner: FftPlanner<T>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
            planner: FftPlanner::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Const)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf bound to a stored parameter. Memoised so repeated binds of the
    /// same parameter share one node (and one gradient path).
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_cache.insert(id, v);
        v
    }

    fn binary_shape_check(&self, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.is_complex() != tb.is_complex() {
            return Err(Error::ShapeMismatch {
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b)?;
        let mut out = self.value(a).clone();
        for (o, &r) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += r;
        }
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b)?;
        let mut out = self.value(a).clone();
        for (o, &r) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o -= r;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Pointwise product of real tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_shape_check(a, b)?;
        debug_assert!(!self.value(a).is_complex(), "mul is real-only");
        let mut out = self.value(a).clone();
        for (o, &r) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= r;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::of_f64(factor);
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= f;
        }
        self.push(out, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, addend: f64) -> Var {
        debug_assert!(!self.value(x).is_complex());
        let a = T::of_f64(addend);
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o += a;
        }
        self.push(out, Op::AddScalar(x, addend))
    }

    /// Exact (erf-based) GELU applied pointwise.
    pub fn gelu(&mut self, x: Var) -> Var {
        debug_assert!(!self.value(x).is_complex());
        let half = T::of_f64(0.5);
        let inv_sqrt2 = T::one() / T::SQRT_2();
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            let v = *o;
            *o = half * v * (T::one() + (v * inv_sqrt2).erf());
        }
        self.push(out, Op::Gelu(x))
    }

    /// Circularly padded 5x5 cross-correlation applied per channel:
    /// `out[i,j] = sum_{k1,k2 in [-2,2]} kernel[k2+2,k1+2] * field[(i+k2)%H,(j+k1)%W]`.
    pub fn cross_correlate2d(&mut self, field: Var, kernel: Var) -> Result<Var> {
        let kshape = self.value(kernel).shape();
        if kshape != [KERNEL_SIZE, KERNEL_SIZE] {
            return Err(Error::KernelSize {
                rows: kshape.first().copied().unwrap_or(0),
                cols: kshape.get(1).copied().unwrap_or(0),
            });
        }
        let (c, h, w) = self.value(field).as_planes()?;
        if h < KERNEL_SIZE || w < KERNEL_SIZE {
            return Err(Error::GridShape { h, w });
        }
        let padded = pad_periodic(self.value(field), PAD)?;
        let mut out = Tensor::zeros(self.value(field).shape());
        cross_corr_forward(
            padded.data(),
            self.value(kernel).data(),
            out.data_mut(),
            c,
            h,
            w,
        );
        Ok(self.push(out, Op::CrossCorr2d { field, kernel }))
    }

    /// Per-pixel affine map across channels: `out[o,p] = b[o] + sum_i w[o,i] x[i,p]`.
    pub fn channel_mix(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).as_planes()?;
        let wshape = self.value(w).shape().to_vec();
        if wshape.len() != 2 || wshape[1] != c_in {
            return Err(Error::ShapeMismatch {
                left: wshape,
                right: vec![c_in],
            });
        }
        let c_out = wshape[0];
        if self.value(b).shape() != [c_out] {
            return Err(Error::ShapeMismatch {
                left: self.value(b).shape().to_vec(),
                right: vec![c_out],
            });
        }
        let plane = h * wd;
        let mut out = Tensor::zeros(&[c_out, h, wd]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let ov = out.data_mut();
            for co in 0..c_out {
                let dst = &mut ov[co * plane..(co + 1) * plane];
                dst.iter_mut().for_each(|d| *d = bv[co]);
                for ci in 0..c_in {
                    let coef = wv[co * c_in + ci];
                    let src = &xv[ci * plane..(ci + 1) * plane];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += coef * s;
                    }
                }
            }
        }
        Ok(self.push(out, Op::ChannelMix { x, w, b }))
    }

    /// Unnormalised forward 2D FFT of each channel; real input, complex output.
    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).as_planes()?;
        if self.value(x).is_complex() {
            return Err(Error::RankMismatch {
                expected: "real 2D/3D",
                got: self.value(x).shape().to_vec(),
            });
        }
        let plans = plan_pair(&mut self.planner, h, w, false);
        let mut out = Tensor::zeros_complex(self.value(x).shape());
        {
            let xv = self.value(x).data();
            let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
            for ch in 0..c {
                for (bi, &v) in buf.iter_mut().zip(&xv[ch * h * w..(ch + 1) * h * w]) {
                    *bi = Complex::new(v, T::zero());
                }
                fft2_plane(&plans, &mut buf, h, w);
                let dst = &mut out.data_mut()[ch * h * w * 2..(ch + 1) * h * w * 2];
                for (i, z) in buf.iter().enumerate() {
                    dst[2 * i] = z.re;
                    dst[2 * i + 1] = z.im;
                }
            }
        }
        Ok(self.push(out, Op::Fft2(x)))
    }

    /// Normalised inverse 2D FFT; returns the real part. `ifft2(fft2(x)) == x`.
    pub fn ifft2(&mut self, z: Var) -> Result<Var> {
        let (c, h, w) = self.value(z).as_planes()?;
        if !self.value(z).is_complex() {
            return Err(Error::RankMismatch {
                expected: "complex 2D/3D",
                got: self.value(z).shape().to_vec(),
            });
        }
        let norm = T::one() / T::of_f64((h * w) as f64);
        let plans = plan_pair(&mut self.planner, h, w, true);
        let mut out = Tensor::zeros(self.value(z).shape());
        {
            let zv = self.value(z).data();
            let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
            for ch in 0..c {
                let src = &zv[ch * h * w * 2..(ch + 1) * h * w * 2];
                for (i, bi) in buf.iter_mut().enumerate() {
                    *bi = Complex::new(src[2 * i], src[2 * i + 1]);
                }
                fft2_plane(&plans, &mut buf, h, w);
                let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
                for (d, z) in dst.iter_mut().zip(&buf) {
                    *d = z.re * norm;
                }
            }
        }
        Ok(self.push(out, Op::Ifft2(z)))
    }

    /// Frequency-domain channel mixer. Mixes the `modes x modes` lowest
    /// frequencies (the positive corner of the FFT layout plus its Hermitian
    /// mirror with conjugated weights, so a real signal stays real); every
    /// other mode contributes zero.
    pub fn spectral_mix(&mut self, z: Var, r: Var, modes: usize) -> Result<Var> {
        let (c_in, h, w) = self.value(z).as_planes()?;
        if !self.value(z).is_complex() || !self.value(r).is_complex() {
            return Err(Error::RankMismatch {
                expected: "complex",
                got: self.value(z).shape().to_vec(),
            });
        }
        let rshape = self.value(r).shape().to_vec();
        if rshape.len() != 4 || rshape[1] != c_in || rshape[2] != modes || rshape[3] != modes {
            return Err(Error::ShapeMismatch {
                left: rshape,
                right: vec![0, c_in, modes, modes],
            });
        }
        if 2 * modes > h || 2 * modes > w {
            return Err(Error::ModesTooLarge { modes, h, w });
        }
        let c_out = rshape[0];
        let mut out = Tensor::zeros_complex(&[c_out, h, w]);
        spectral_mix_forward(
            self.value(z).data(),
            self.value(r).data(),
            out.data_mut(),
            c_in,
            c_out,
            h,
            w,
            modes,
        );
        Ok(self.push(out, Op::SpectralMix { z, r, modes }))
    }

    /// Broadcast multiply of every channel by a real `[H, W]` map.
    pub fn mul_map(&mut self, x: Var, map: Var) -> Result<Var> {
        let (_, h, w) = self.value(x).as_planes()?;
        if self.value(map).shape() != [h, w] || self.value(map).is_complex() {
            return Err(Error::ShapeMismatch {
                left: self.value(map).shape().to_vec(),
                right: vec![h, w],
            });
        }
        let stride = if self.value(x).is_complex() { 2 } else { 1 };
        let mut out = self.value(x).clone();
        {
            let mv = self.value(map).data();
            let plane = h * w;
            for (i, o) in out.data_mut().iter_mut().enumerate() {
                *o *= mv[(i / stride) % plane];
            }
        }
        Ok(self.push(out, Op::MulMap { x, map }))
    }

    pub fn channel(&mut self, x: Var, idx: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).as_planes()?;
        if idx >= c {
            return Err(Error::ChannelMismatch {
                context: "channel select",
                expected: c,
                got: idx,
            });
        }
        let plane = h * w;
        let data = self.value(x).data()[idx * plane..(idx + 1) * plane].to_vec();
        let out = Tensor::from_vec(&[h, w], data)?;
        Ok(self.push(out, Op::Channel { x, idx }))
    }

    pub fn stack_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::RankMismatch {
                expected: "non-empty channel list",
                got: vec![],
            });
        }
        let (h, w) = {
            let s = self.value(parts[0]).shape();
            if s.len() != 2 {
                return Err(Error::RankMismatch {
                    expected: "2D",
                    got: s.to_vec(),
                });
            }
            (s[0], s[1])
        };
        let mut data = Vec::with_capacity(parts.len() * h * w);
        for &p in parts {
            if self.value(p).shape() != [h, w] {
                return Err(Error::ShapeMismatch {
                    left: self.value(p).shape().to_vec(),
                    right: vec![h, w],
                });
            }
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(&[parts.len(), h, w], data)?;
        Ok(self.push(out, Op::StackChannels(parts.to_vec())))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        debug_assert!(!self.value(x).is_complex());
        let mut acc = T::zero();
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Error::RankMismatch {
                expected: "1D",
                got: if sa.len() != 1 { sa.to_vec() } else { sb.to_vec() },
            });
        }
        let (n, m) = (sa[0], sb[0]);
        let mut out = Tensor::zeros(&[n, m]);
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let ov = out.data_mut();
            for i in 0..n {
                for j in 0..m {
                    ov[i * m + j] = av[i] * bv[j];
                }
            }
        }
        Ok(self.push(out, Op::Outer { a, b }))
    }

    /// Builds the symmetric 5x5 derivative kernel from seven scalar nodes.
    pub fn symmetric_kernel(&mut self, a: [Var; 7]) -> Result<Var> {
        let mut vals = [T::zero(); 7];
        for (slot, &v) in vals.iter_mut().zip(a.iter()) {
            let t = self.value(v);
            if t.numel() != 1 || t.is_complex() {
                return Err(Error::NotScalar {
                    shape: t.shape().to_vec(),
                });
            }
            *slot = t.data()[0];
        }
        let k = fill_symmetric_kernel(&vals);
        let out = Tensor::from_vec(&[KERNEL_SIZE, KERNEL_SIZE], k.to_vec())?;
        Ok(self.push(out, Op::SymKernel(a)))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || self.value(x).is_complex() {
            return Err(Error::RankMismatch {
                expected: "real 2D",
                got: s,
            });
        }
        let (n, m) = (s[0], s[1]);
        let mut out = Tensor::zeros(&[m, n]);
        {
            let xv = self.value(x).data();
            let ov = out.data_mut();
            for i in 0..n {
                for j in 0..m {
                    ov[j * n + i] = xv[i * m + j];
                }
            }
        }
        Ok(self.push(out, Op::Transpose2d(x)))
    }

    /// Reverse pass from a real scalar `loss`. Gradients of every reachable
    /// parameter are accumulated (added) into the store; call
    /// [`ParamStore::zero_grads`] first for a fresh gradient.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 || lt.is_complex() {
            return Err(Error::NotScalar {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            // Split borrows: the node being visited vs. the gradient arena.
            let op = self.nodes[id].op.clone();
            match op {
                Op::Const => {}
                Op::Param(pid) => {
                    let dst = &mut store.entries[pid.0].grad;
                    for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, &self.nodes[a.0].value, g.data());
                    accumulate(&mut grads, b, &self.nodes[b.0].value, g.data());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a, &self.nodes[a.0].value, g.data());
                    accumulate_scaled(&mut grads, b, &self.nodes[b.0].value, g.data(), -T::one());
                }
                Op::Mul(a, b) => {
                    let ga: Vec<T> = g
                        .data()
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(&gi, &bi)| gi * bi)
                        .collect();
                    let gb: Vec<T> = g
                        .data()
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(&gi, &ai)| gi * ai)
                        .collect();
                    accumulate(&mut grads, a, &self.nodes[a.0].value, &ga);
                    accumulate(&mut grads, b, &self.nodes[b.0].value, &gb);
                }
                Op::Scale(x, factor) => {
                    accumulate_scaled(
                        &mut grads,
                        x,
                        &self.nodes[x.0].value,
                        g.data(),
                        T::of_f64(factor),
                    );
                }
                Op::AddScalar(x, _) => {
                    accumulate(&mut grads, x, &self.nodes[x.0].value, g.data());
                }
                Op::Gelu(x) => {
                    let half = T::of_f64(0.5);
                    let inv_sqrt2 = T::one() / T::SQRT_2();
                    let inv_sqrt_2pi = T::of_f64(0.398_942_280_401_432_7);
                    let gx: Vec<T> = g
                        .data()
                        .iter()
                        .zip(self.nodes[x.0].value.data())
                        .map(|(&gi, &xi)| {
                            let cdf = half * (T::one() + (xi * inv_sqrt2).erf());
                            let pdf = (-half * xi * xi).exp() * inv_sqrt_2pi;
                            gi * (cdf + xi * pdf)
                        })
                        .collect();
                    accumulate(&mut grads, x, &self.nodes[x.0].value, &gx);
                }
                Op::CrossCorr2d { field, kernel } => {
                    let (c, h, w) = self.nodes[field.0].value.as_planes()?;
                    let padded = pad_periodic(&self.nodes[field.0].value, PAD)?;
                    let kv = self.nodes[kernel.0].value.data();
                    let mut gfield = vec![T::zero(); c * h * w];
                    let mut gkernel = vec![T::zero(); 25];
                    cross_corr_backward(
                        padded.data(),
                        kv,
                        g.data(),
                        &mut gfield,
                        &mut gkernel,
                        c,
                        h,
                        w,
                    );
                    accumulate(&mut grads, field, &self.nodes[field.0].value, &gfield);
                    accumulate(&mut grads, kernel, &self.nodes[kernel.0].value, &gkernel);
                }
                Op::ChannelMix { x, w, b } => {
                    let (c_in, h, wd) = self.nodes[x.0].value.as_planes()?;
                    let c_out = self.nodes[w.0].value.shape()[0];
                    let plane = h * wd;
                    let xv = self.nodes[x.0].value.data();
                    let wv = self.nodes[w.0].value.data();
                    let gv = g.data();
                    let mut gx = vec![T::zero(); c_in * plane];
                    let mut gw = vec![T::zero(); c_out * c_in];
                    let mut gb = vec![T::zero(); c_out];
                    for co in 0..c_out {
                        let go = &gv[co * plane..(co + 1) * plane];
                        let mut bsum = T::zero();
                        for &gi in go {
                            bsum += gi;
                        }
                        gb[co] = bsum;
                        for ci in 0..c_in {
                            let coef = wv[co * c_in + ci];
                            let xs = &xv[ci * plane..(ci + 1) * plane];
                            let dst = &mut gx[ci * plane..(ci + 1) * plane];
                            let mut wsum = T::zero();
                            for ((d, &gi), &xi) in dst.iter_mut().zip(go).zip(xs) {
                                *d += coef * gi;
                                wsum += gi * xi;
                            }
                            gw[co * c_in + ci] = wsum;
                        }
                    }
                    accumulate(&mut grads, x, &self.nodes[x.0].value, &gx);
                    accumulate(&mut grads, w, &self.nodes[w.0].value, &gw);
                    accumulate(&mut grads, b, &self.nodes[b.0].value, &gb);
                }
                Op::Fft2(x) => {
                    // Adjoint of the unnormalised forward DFT is the
                    // unnormalised inverse applied to the gradient pairs.
                    let (c, h, w) = self.nodes[x.0].value.as_planes()?;
                    let plans = plan_pair(&mut self.planner, h, w, true);
                    let mut gx = vec![T::zero(); c * h * w];
                    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
                    for ch in 0..c {
                        let src = &g.data()[ch * h * w * 2..(ch + 1) * h * w * 2];
                        for (i, bi) in buf.iter_mut().enumerate() {
                            *bi = Complex::new(src[2 * i], src[2 * i + 1]);
                        }
                        fft2_plane(&plans, &mut buf, h, w);
                        for (d, z) in gx[ch * h * w..(ch + 1) * h * w].iter_mut().zip(&buf) {
                            *d = z.re;
                        }
                    }
                    accumulate(&mut grads, x, &self.nodes[x.0].value, &gx);
                }
                Op::Ifft2(z) => {
                    // out = Re(inverse)/HW, so the gradient maps through the
                    // forward DFT scaled by 1/HW.
                    let (c, h, w) = self.nodes[z.0].value.as_planes()?;
                    let norm = T::one() / T::of_f64((h * w) as f64);
                    let plans = plan_pair(&mut self.planner, h, w, false);
                    let mut gz = vec![T::zero(); c * h * w * 2];
                    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
                    for ch in 0..c {
                        let src = &g.data()[ch * h * w..(ch + 1) * h * w];
                        for (bi, &v) in buf.iter_mut().zip(src) {
                            *bi = Complex::new(v, T::zero());
                        }
                        fft2_plane(&plans, &mut buf, h, w);
                        let dst = &mut gz[ch * h * w * 2..(ch + 1) * h * w * 2];
                        for (i, zv) in buf.iter().enumerate() {
                            dst[2 * i] = zv.re * norm;
                            dst[2 * i + 1] = zv.im * norm;
                        }
                    }
                    accumulate(&mut grads, z, &self.nodes[z.0].value, &gz);
                }
                Op::SpectralMix { z, r, modes } => {
                    let (c_in, h, w) = self.nodes[z.0].value.as_planes()?;
                    let c_out = self.nodes[r.0].value.shape()[0];
                    let mut gz = vec![T::zero(); c_in * h * w * 2];
                    let mut gr = vec![T::zero(); self.nodes[r.0].value.data().len()];
                    spectral_mix_backward(
                        self.nodes[z.0].value.data(),
                        self.nodes[r.0].value.data(),
                        g.data(),
                        &mut gz,
                        &mut gr,
                        c_in,
                        c_out,
                        h,
                        w,
                        modes,
                    );
                    accumulate(&mut grads, z, &self.nodes[z.0].value, &gz);
                    accumulate(&mut grads, r, &self.nodes[r.0].value, &gr);
                }
                Op::MulMap { x, map } => {
                    let (c, h, w) = self.nodes[x.0].value.as_planes()?;
                    let plane = h * w;
                    let stride = if self.nodes[x.0].value.is_complex() { 2 } else { 1 };
                    let mv = self.nodes[map.0].value.data();
                    let xv = self.nodes[x.0].value.data();
                    let gv = g.data();
                    let mut gx = vec![T::zero(); xv.len()];
                    let mut gmap = vec![T::zero(); plane];
                    for c_idx in 0..c {
                        for p in 0..plane {
                            for s in 0..stride {
                                let i = (c_idx * plane + p) * stride + s;
                                gx[i] = gv[i] * mv[p];
                                gmap[p] += gv[i] * xv[i];
                            }
                        }
                    }
                    accumulate(&mut grads, x, &self.nodes[x.0].value, &gx);
                    accumulate(&mut grads, map, &self.nodes[map.0].value, &gmap);
                }
                Op::Channel { x, idx } => {
                    let (_, h, w) = self.nodes[x.0].value.as_planes()?;
                    let plane = h * w;
                    let mut gx = vec![T::zero(); self.nodes[x.0].value.numel()];
                    gx[idx * plane..(idx + 1) * plane].copy_from_slice(g.data());
                    accumulate(&mut grads, x, &self.nodes[x.0].value, &gx);
                }
                Op::StackChannels(parts) => {
                    let plane = self.nodes[parts[0].0].value.numel();
                    for (i, &p) in parts.iter().enumerate() {
                        accumulate(
                            &mut grads,
                            p,
                            &self.nodes[p.0].value,
                            &g.data()[i * plane..(i + 1) * plane],
                        );
                    }
                }
                Op::SumAll(x) => {
                    let gi = g.data()[0];
                    let gx = vec![gi; self.nodes[x.0].value.numel()];
                    accumulate(&mut grads, x, &self.nodes[x.0].value, &gx);
                }
                Op::Outer { a, b } => {
                    let n = self.nodes[a.0].value.numel();
                    let m = self.nodes[b.0].value.numel();
                    let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    let gv = g.data();
                    let mut ga = vec![T::zero(); n];
                    let mut gb = vec![T::zero(); m];
                    for i in 0..n {
                        for j in 0..m {
                            ga[i] += gv[i * m + j] * bv[j];
                            gb[j] += gv[i * m + j] * av[i];
                        }
                    }
                    accumulate(&mut grads, a, &self.nodes[a.0].value, &ga);
                    accumulate(&mut grads, b, &self.nodes[b.0].value, &gb);
                }
                Op::SymKernel(a) => {
                    for &(r, c, p, coef) in SYM_TEMPLATE.iter() {
                        let gp = [T::of_f64(coef) * g.data()[r * 5 + c]];
                        accumulate(&mut grads, a[p], &self.nodes[a[p].0].value, &gp);
                    }
                }
                Op::Transpose2d(x) => {
                    let s = self.nodes[x.0].value.shape();
                    let (n, m) = (s[0], s[1]);
                    let gv = g.data();
                    let mut gx = vec![T::zero(); n * m];
                    for i in 0..n {
                        for j in 0..m {
                            gx[i * m + j] = gv[j * n + i];
                        }
                    }
                    accumulate(&mut grads, x, &self.nodes[x.0].value, &gx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    target: Var,
    like: &Tensor<T>,
    add: &[T],
) {
    accumulate_scaled(grads, target, like, add, T::one());
}

fn accumulate_scaled<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    target: Var,
    like: &Tensor<T>,
    add: &[T],
    factor: T,
) {
    let slot = &mut grads[target.0];
    if slot.is_none() {
        *slot = Some(if like.is_complex() {
            Tensor::zeros_complex(like.shape())
        } else {
            Tensor::zeros(like.shape())
        });
    }
    let dst = slot.as_mut().unwrap().data_mut();
    for (d, &s) in dst.iter_mut().zip(add) {
        *d += factor * s;
    }
}

fn cross_corr_forward<T: Real>(
    padded: &[T],
    kernel: &[T],
    out: &mut [T],
    c: usize,
    h: usize,
    w: usize,
) {
    let wp = w + 2 * PAD;
    let hp = h + 2 * PAD;
    let plane_p = hp * wp;
    for ch in 0..c {
        let src = &padded[ch * plane_p..(ch + 1) * plane_p];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                // Mirror taps are summed pairwise so that the symmetric
                // template's exact-negation cells cancel without rounding
                // residue (constant in -> exactly zero out).
                let mut acc = T::zero();
                for r in 0..KERNEL_SIZE {
                    let row = (i + r) * wp + j;
                    acc += kernel[r * KERNEL_SIZE + 3] * src[row + 3]
                        + kernel[r * KERNEL_SIZE + 1] * src[row + 1];
                    acc += kernel[r * KERNEL_SIZE + 4] * src[row + 4]
                        + kernel[r * KERNEL_SIZE] * src[row];
                }
                let col = j + PAD;
                acc += kernel[3 * KERNEL_SIZE + 2] * src[(i + 3) * wp + col]
                    + kernel[KERNEL_SIZE + 2] * src[(i + 1) * wp + col];
                acc += kernel[4 * KERNEL_SIZE + 2] * src[(i + 4) * wp + col]
                    + kernel[2] * src[i * wp + col];
                acc += kernel[2 * KERNEL_SIZE + 2] * src[(i + 2) * wp + col];
                dst[i * w + j] = acc;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cross_corr_backward<T: Real>(
    padded: &[T],
    kernel: &[T],
    gout: &[T],
    gfield: &mut [T],
    gkernel: &mut [T],
    c: usize,
    h: usize,
    w: usize,
) {
    let wp = w + 2 * PAD;
    let hp = h + 2 * PAD;
    let plane_p = hp * wp;
    let mut gpad = vec![T::zero(); plane_p];
    for ch in 0..c {
        let src = &padded[ch * plane_p..(ch + 1) * plane_p];
        let go = &gout[ch * h * w..(ch + 1) * h * w];
        gpad.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..h {
            for j in 0..w {
                let gi = go[i * w + j];
                for r in 0..KERNEL_SIZE {
                    for cc in 0..KERNEL_SIZE {
                        let pi = (i + r) * wp + j + cc;
                        gpad[pi] += kernel[r * KERNEL_SIZE + cc] * gi;
                        gkernel[r * KERNEL_SIZE + cc] += src[pi] * gi;
                    }
                }
            }
        }
        // Fold the padded gradient back onto the torus.
        let gf = &mut gfield[ch * h * w..(ch + 1) * h * w];
        for i in 0..hp {
            let si = (i + h - PAD) % h;
            for j in 0..wp {
                let sj = (j + w - PAD) % w;
                gf[si * w + sj] += gpad[i * wp + j];
            }
        }
    }
}

type PlanPair<T> = (std::sync::Arc<dyn rustfft::Fft<T>>, std::sync::Arc<dyn rustfft::Fft<T>>);

fn plan_pair<T: Real>(planner: &mut FftPlanner<T>, h: usize, w: usize, inverse: bool) -> PlanPair<T> {
    let dir = if inverse {
        rustfft::FftDirection::Inverse
    } else {
        rustfft::FftDirection::Forward
    };
    (planner.plan_fft(h, dir), planner.plan_fft(w, dir))
}

fn fft2_plane<T: Real>(plans: &PlanPair<T>, buf: &mut [Complex<T>], h: usize, w: usize) {
    let (col_fft, row_fft) = plans;
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
}

#[inline]
fn cplx<T: Real>(data: &[T], idx: usize) -> Complex<T> {
    Complex::new(data[2 * idx], data[2 * idx + 1])
}

#[allow(clippy::too_many_arguments)]
fn spectral_mix_forward<T: Real>(
    z: &[T],
    r: &[T],
    out: &mut [T],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    modes: usize,
) {
    let plane = h * w;
    for a in 0..modes {
        for b in 0..modes {
            let k = a * w + b;
            let km = ((h - a) % h) * w + (w - b) % w;
            let mirror = km != k;
            for co in 0..c_out {
                let mut acc = Complex::new(T::zero(), T::zero());
                let mut accm = Complex::new(T::zero(), T::zero());
                for ci in 0..c_in {
                    let rw = cplx(r, ((co * c_in + ci) * modes + a) * modes + b);
                    acc += rw * cplx(z, ci * plane + k);
                    if mirror {
                        accm += rw.conj() * cplx(z, ci * plane + km);
                    }
                }
                let o = (co * plane + k) * 2;
                out[o] = acc.re;
                out[o + 1] = acc.im;
                if mirror {
                    let om = (co * plane + km) * 2;
                    out[om] = accm.re;
                    out[om + 1] = accm.im;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn spectral_mix_backward<T: Real>(
    z: &[T],
    r: &[T],
    gout: &[T],
    gz: &mut [T],
    gr: &mut [T],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    modes: usize,
) {
    let plane = h * w;
    for a in 0..modes {
        for b in 0..modes {
            let k = a * w + b;
            let km = ((h - a) % h) * w + (w - b) % w;
            let mirror = km != k;
            for co in 0..c_out {
                let g = cplx(gout, co * plane + k);
                let gm = cplx(gout, co * plane + km);
                for ci in 0..c_in {
                    let ridx = ((co * c_in + ci) * modes + a) * modes + b;
                    let rw = cplx(r, ridx);
                    // Direct block: out = R z        => gz += conj(R) g, gR += conj(z) g
                    let dz = rw.conj() * g;
                    let dr = cplx(z, ci * plane + k).conj() * g;
                    gz[(ci * plane + k) * 2] += dz.re;
                    gz[(ci * plane + k) * 2 + 1] += dz.im;
                    let mut dr_total = dr;
                    if mirror {
                        // Mirror block: out_m = conj(R) z_m
                        //   => gz_m += R g_m, gR += z_m conj(g_m)
                        let dzm = rw * gm;
                        gz[(ci * plane + km) * 2] += dzm.re;
                        gz[(ci * plane + km) * 2 + 1] += dzm.im;
                        dr_total += cplx(z, ci * plane + km) * gm.conj();
                    }
                    gr[ridx * 2] += dr_total.re;
                    gr[ridx * 2 + 1] += dr_total.im;
                }
            }
        }
    }
}

/// Zeroes every mode outside the mixed set of [`Graph::spectral_mix`].
/// Applying it twice equals applying it once.
pub fn truncate_modes<T: Real>(z: &Tensor<T>, modes: usize) -> Result<Tensor<T>> {
    let (c, h, w) = z.as_planes()?;
    if !z.is_complex() {
        return Err(Error::RankMismatch {
            expected: "complex",
            got: z.shape().to_vec(),
        });
    }
    let plane = h * w;
    let mut kept = vec![false; plane];
    for a in 0..modes {
        for b in 0..modes {
            kept[a * w + b] = true;
            kept[((h - a) % h) * w + (w - b) % w] = true;
        }
    }
    let mut out = z.clone();
    for ch in 0..c {
        for (p, &keep) in kept.iter().enumerate() {
            if !keep {
                let i = (ch * plane + p) * 2;
                out.data_mut()[i] = T::zero();
                out.data_mut()[i + 1] = T::zero();
            }
        }
    }
    Ok(out)
}
