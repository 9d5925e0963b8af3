//! The constrained symmetric 5x5 derivative filter, its moment diagnostics,
//! and stencil-based spatial derivatives on periodic grids.
//!
//! Conventions used throughout: `k1` is the horizontal (column) offset in
//! -2..=2, `k2` the vertical (row) offset, top row = k2 = -2. The filter's
//! centre row `(a3, a6, 0, -a6, -a3)` therefore acts along x, and its
//! transpose along y. `moment(a1, a2) = sum k1^a1 k2^a2 g[k1, k2]`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{fill_symmetric_kernel, Graph, Var};
use crate::tensor::Real;

pub use crate::tensor::{crop, pad_periodic};

/// The seven scalars behind the 5x5 symmetric derivative template.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetricFilterParams<T> {
    pub a: [T; 7],
}

impl<T: Real> SymmetricFilterParams<T> {
    pub fn zeros() -> Self {
        SymmetricFilterParams { a: [T::zero(); 7] }
    }

    /// The classical fourth-order central-difference instantiation:
    /// a3 = 1/12, a6 = -2/3, everything else zero. Gain is exactly 1.
    pub fn classical() -> Self {
        let mut a = [T::zero(); 7];
        a[2] = T::of_f64(1.0 / 12.0);
        a[5] = T::of_f64(-2.0 / 3.0);
        SymmetricFilterParams { a }
    }

    /// Training initialisation: the classical stencil with a small uniform
    /// perturbation on every parameter, so the untrained solver is already
    /// a consistent fourth-order scheme.
    pub fn init_perturbed(rng: &mut impl Rng) -> Self {
        let mut p = Self::classical();
        for v in p.a.iter_mut() {
            *v += T::of_f64(rng.gen_range(-1e-3..1e-3));
        }
        p
    }

    pub fn a1(&self) -> T {
        self.a[0]
    }
    pub fn a3(&self) -> T {
        self.a[2]
    }
    pub fn a6(&self) -> T {
        self.a[5]
    }
    pub fn a7(&self) -> T {
        self.a[6]
    }

    /// First-derivative gain `C = moment(1, 0) = -4 a3 - 2 a6`.
    pub fn gain(&self) -> T {
        build_kernel(self).moment(1, 0)
    }

    /// Rescales all parameters so the gain becomes 1.
    pub fn normalized(&self) -> Result<Self> {
        let c = self.gain();
        if c == T::zero() {
            return Err(Error::NonPositive {
                name: "filter gain",
                value: 0.0,
            });
        }
        let mut a = self.a;
        for v in a.iter_mut() {
            *v /= c;
        }
        Ok(SymmetricFilterParams { a })
    }
}

/// A concrete 5x5 filter matrix (row-major) built from template parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterKernel<T> {
    g: [T; 25],
}

/// Instantiates the symmetric template. Mirror cells are exact IEEE
/// negations, which makes the structural moments below vanish exactly.
pub fn build_kernel<T: Real>(params: &SymmetricFilterParams<T>) -> FilterKernel<T> {
    FilterKernel {
        g: fill_symmetric_kernel(&params.a),
    }
}

impl<T: Real> FilterKernel<T> {
    pub fn from_matrix(g: [T; 25]) -> Self {
        FilterKernel { g }
    }

    pub fn entries(&self) -> &[T; 25] {
        &self.g
    }

    /// Entry at offsets `(k1, k2)` in -2..=2.
    pub fn at(&self, k1: i32, k2: i32) -> T {
        self.g[((k2 + 2) as usize) * 5 + (k1 + 2) as usize]
    }

    pub fn transpose(&self) -> Self {
        let mut g = [T::zero(); 25];
        for r in 0..5 {
            for c in 0..5 {
                g[c * 5 + r] = self.g[r * 5 + c];
            }
        }
        FilterKernel { g }
    }

    /// `sum k1^a1 k2^a2 g[k1, k2]`, summed over mirror orbits so that the
    /// template's exact-negation pairs cancel without rounding residue.
    pub fn moment(&self, alpha1: u32, alpha2: u32) -> T {
        let coef = |k1: i32, k2: i32| {
            T::of_f64((k1 as f64).powi(alpha1 as i32) * (k2 as f64).powi(alpha2 as i32))
        };
        let mut total = coef(0, 0) * self.at(0, 0);
        // x axis: (+-k1, 0)
        for k1 in 1..=2 {
            total += coef(k1, 0) * self.at(k1, 0) + coef(-k1, 0) * self.at(-k1, 0);
        }
        // y axis: (0, +-k2)
        for k2 in 1..=2 {
            total += coef(0, k2) * self.at(0, k2) + coef(0, -k2) * self.at(0, -k2);
        }
        // quadrants: (+-k1, +-k2), paired so same-magnitude terms meet first
        for k1 in 1..=2 {
            for k2 in 1..=2 {
                let p1 = coef(k1, k2) * self.at(k1, k2) + coef(-k1, k2) * self.at(-k1, k2);
                let p2 = coef(k1, -k2) * self.at(k1, -k2) + coef(-k1, -k2) * self.at(-k1, -k2);
                total += p1 + p2;
            }
        }
        total
    }
}

/// Pre-transposed kernel pair plus grid spacings, for repeated use inside a
/// single forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StencilOps {
    kernel: Var,
    kernel_t: Var,
    inv_dx: f64,
    inv_dy: f64,
}

impl StencilOps {
    pub fn new<T: Real>(g: &mut Graph<T>, kernel: Var, dx: f64, dy: f64) -> Result<Self> {
        if dx <= 0.0 {
            return Err(Error::NonPositive {
                name: "dx",
                value: dx,
            });
        }
        if dy <= 0.0 {
            return Err(Error::NonPositive {
                name: "dy",
                value: dy,
            });
        }
        let kernel_t = g.transpose2d(kernel)?;
        Ok(StencilOps {
            kernel,
            kernel_t,
            inv_dx: 1.0 / dx,
            inv_dy: 1.0 / dy,
        })
    }

    pub fn dx<T: Real>(&self, g: &mut Graph<T>, field: Var) -> Result<Var> {
        let c = g.cross_correlate2d(field, self.kernel)?;
        Ok(g.scale(c, self.inv_dx))
    }

    pub fn dy<T: Real>(&self, g: &mut Graph<T>, field: Var) -> Result<Var> {
        let c = g.cross_correlate2d(field, self.kernel_t)?;
        Ok(g.scale(c, self.inv_dy))
    }

    /// Second derivatives as composed first-derivative passes with the same
    /// kernel: `dxx + dyy`.
    pub fn laplacian<T: Real>(&self, g: &mut Graph<T>, field: Var) -> Result<Var> {
        let fx = self.dx(g, field)?;
        let fxx = self.dx(g, fx)?;
        let fy = self.dy(g, field)?;
        let fyy = self.dy(g, fy)?;
        g.add(fxx, fyy)
    }
}

/// `cross_correlate2d(field, g) / dx`: approximates `gain * d/dx`.
pub fn derivative_x<T: Real>(g: &mut Graph<T>, field: Var, kernel: Var, dx: f64) -> Result<Var> {
    if dx <= 0.0 {
        return Err(Error::NonPositive {
            name: "dx",
            value: dx,
        });
    }
    let c = g.cross_correlate2d(field, kernel)?;
    Ok(g.scale(c, 1.0 / dx))
}

/// Same with the transposed kernel: approximates `gain * d/dy`.
pub fn derivative_y<T: Real>(g: &mut Graph<T>, field: Var, kernel: Var, dy: f64) -> Result<Var> {
    if dy <= 0.0 {
        return Err(Error::NonPositive {
            name: "dy",
            value: dy,
        });
    }
    let kt = g.transpose2d(kernel)?;
    let c = g.cross_correlate2d(field, kt)?;
    Ok(g.scale(c, 1.0 / dy))
}

pub fn laplacian<T: Real>(
    g: &mut Graph<T>,
    field: Var,
    kernel: Var,
    dx: f64,
    dy: f64,
) -> Result<Var> {
    let ops = StencilOps::new(g, kernel, dx, dy)?;
    ops.laplacian(g, field)
}

/// One row of the sum-rule report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentRow {
    pub alpha1: u32,
    pub alpha2: u32,
    pub value: f64,
}

/// Moment table for |alpha| <= 4 plus the two constraint residuals whose
/// vanishing yields fourth-order accuracy (a7 -> 0 and a6 + 8 a3 -> 0).
#[derive(Debug, Clone)]
pub struct SumRuleReport {
    pub moments: Vec<MomentRow>,
    pub constraint_a7: f64,
    pub constraint_a6_8a3: f64,
    pub gain: f64,
}

pub fn verify_sum_rules<T: Real>(params: &SymmetricFilterParams<T>) -> SumRuleReport {
    let k = build_kernel(params);
    let mut moments = Vec::new();
    for total in 0..=4u32 {
        for alpha1 in (0..=total).rev() {
            let alpha2 = total - alpha1;
            moments.push(MomentRow {
                alpha1,
                alpha2,
                value: k.moment(alpha1, alpha2).as_f64(),
            });
        }
    }
    let a3 = params.a3().as_f64();
    let a6 = params.a6().as_f64();
    SumRuleReport {
        moments,
        constraint_a7: params.a7().as_f64(),
        constraint_a6_8a3: a6 + 8.0 * a3,
        gain: k.moment(1, 0).as_f64(),
    }
}

impl SumRuleReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha1,alpha2,moment_value\n");
        for row in &self.moments {
            out.push_str(&format!("{},{},{}\n", row.alpha1, row.alpha2, row.value));
        }
        out.push_str(&format!("constraint_a7,,{}\n", self.constraint_a7));
        out.push_str(&format!("constraint_a6_8a3,,{}\n", self.constraint_a6_8a3));
        out
    }
}
