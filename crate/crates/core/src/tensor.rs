//! Dense row-major tensors and the scalar types they are built from.
//!
//! The buffer holds plain scalars for real tensors and interleaved
//! (re, im) pairs for complex ones. Everything downstream (tape, stencils,
//! spectral blocks) is generic over [`Real`], with f64 as the default
//! training precision and f32 behind a config switch.

use crate::error::{Error, Result};

/// Element type codes used by the GCT1 container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    Complex128,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::Complex128 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::Complex128),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Scalar abstraction over f32/f64.
pub trait Real:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::NumAssign
    + rustfft::FftNum
    + Default
    + std::fmt::Display
{
    const DTYPE: Dtype;
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;
    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;
    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

/// Dense row-major tensor. Complex tensors store interleaved (re, im) pairs,
/// so `data.len() == numel() * 2` when `complex` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    complex: bool,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            complex: false,
            data: vec![T::zero(); n],
        }
    }

    pub fn zeros_complex(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            complex: true,
            data: vec![T::zero(); n * 2],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            complex: false,
            data,
        })
    }

    pub fn from_vec_complex(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n * 2 {
            return Err(Error::ShapeMismatch {
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            complex: true,
            data,
        })
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            complex: false,
            data: vec![value],
        }
    }

    /// Builds a real tensor by evaluating `f` at each row-major index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..n {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Tensor {
            shape: shape.to_vec(),
            complex: false,
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_complex(&self) -> bool {
        self.complex
    }

    pub fn dtype(&self) -> Dtype {
        if self.complex {
            Dtype::Complex128
        } else {
            T::DTYPE
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// Largest absolute entry (over re/im parts for complex tensors).
    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Interprets a `[C, H, W]` or `[H, W]` tensor as channels of H*W planes.
    pub fn as_planes(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [h, w] => Ok((1, *h, *w)),
            [c, h, w] => Ok((*c, *h, *w)),
            other => Err(Error::RankMismatch {
                expected: "2D or 3D",
                got: other.to_vec(),
            }),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            complex: self.complex,
            data: self.data.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn from_f64_tensor(src: &Tensor<f64>) -> Self {
        Tensor {
            shape: src.shape.clone(),
            complex: src.complex,
            data: src.data.iter().map(|&x| T::of_f64(x)).collect(),
        }
    }
}

/// Periodic (wrap-around) padding of each H x W plane by `width` cells.
pub fn pad_periodic<T: Real>(field: &Tensor<T>, width: usize) -> Result<Tensor<T>> {
    let (c, h, w) = field.as_planes()?;
    if width > h.min(w) {
        return Err(Error::PadWidth {
            width,
            extent: h.min(w),
        });
    }
    let (hp, wp) = (h + 2 * width, w + 2 * width);
    let shape: Vec<usize> = if field.shape().len() == 2 {
        vec![hp, wp]
    } else {
        vec![c, hp, wp]
    };
    let mut out = Tensor::zeros(&shape);
    for ch in 0..c {
        let src = &field.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out.data_mut()[ch * hp * wp..(ch + 1) * hp * wp];
        for i in 0..hp {
            let si = (i + h - width) % h;
            for j in 0..wp {
                let sj = (j + w - width) % w;
                dst[i * wp + j] = src[si * w + sj];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pad_periodic`]: drops `width` cells from each side.
pub fn crop<T: Real>(field: &Tensor<T>, width: usize) -> Result<Tensor<T>> {
    let (c, hp, wp) = field.as_planes()?;
    if 2 * width >= hp || 2 * width >= wp {
        return Err(Error::PadWidth {
            width,
            extent: hp.min(wp),
        });
    }
    let (h, w) = (hp - 2 * width, wp - 2 * width);
    let shape: Vec<usize> = if field.shape().len() == 2 {
        vec![h, w]
    } else {
        vec![c, h, w]
    };
    let mut out = Tensor::zeros(&shape);
    for ch in 0..c {
        let src = &field.data()[ch * hp * wp..(ch + 1) * hp * wp];
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = src[(i + width) * wp + (j + width)];
            }
        }
    }
    Ok(out)
}
