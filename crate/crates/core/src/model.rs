//! Nonlinearities, the radial grid, field containers and the pairing.
//!
//! Fields are sampled at `r_j = j h`, `j = 1..M-1`; the value at `r = R` is a Dirichlet
//! zero and the origin is handled by the symmetrized stencil. Internally the radial
//! Laplacian acts on `v = r^{(d-1)/2} u`, where it is a symmetric tridiagonal matrix.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result, C64};

/// The smooth function `beta` in `i u_t + Δu + beta(|u|^2) u = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Nonlinearity {
    /// `beta(s) = s^{(p-1)/2}`; only odd integer `p` are smooth at `s = 0`.
    PurePower { p: f64 },
    /// `beta(s) = a s - b s^2`.
    CubicQuintic { a: f64, b: f64 },
    /// `beta(s) = s / (1 + kappa s)`.
    Saturable { kappa: f64 },
    /// `beta = 0`, the free equation.
    Linear,
}

impl Nonlinearity {
    /// Checks smoothness and, for pure powers, the subcritical range `1 < p < (d+2)/(d-2)`.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match *self {
            Nonlinearity::PurePower { p } => {
                let q = (p - 1.0) / 2.0;
                if !(q >= 1.0 && q == math::floor(q)) {
                    return Err(Error::InvalidParameter(format!(
                        "pure_power p = {p} is not an odd integer >= 3, beta is not smooth at 0"
                    )));
                }
                let crit = (dim as f64 + 2.0) / (dim as f64 - 2.0);
                if p >= crit {
                    return Err(Error::InvalidParameter(format!(
                        "pure_power p = {p} is not below the critical exponent {crit} in d = {dim}"
                    )));
                }
            }
            Nonlinearity::CubicQuintic { a, b } => {
                if !(a.is_finite() && b.is_finite()) {
                    return Err(Error::InvalidParameter("cubic_quintic coefficients must be finite".into()));
                }
            }
            Nonlinearity::Saturable { kappa } => {
                if !(kappa >= 0.0 && kappa.is_finite()) {
                    return Err(Error::InvalidParameter("saturable kappa must be >= 0".into()));
                }
            }
            Nonlinearity::Linear => {}
        }
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Nonlinearity::Linear)
    }

    /// Growth exponent: `p` for pure powers, the leading power otherwise.
    pub fn growth_exponent(&self) -> f64 {
        match *self {
            Nonlinearity::PurePower { p } => p,
            Nonlinearity::CubicQuintic { b, .. } if b != 0.0 => 5.0,
            Nonlinearity::Linear => 1.0,
            _ => 3.0,
        }
    }

    #[inline]
    pub fn beta(&self, s: f64) -> f64 {
        self.derivative(s, 0)
    }

    /// `k`-th derivative of `beta` at `s >= 0`, any order.
    pub fn derivative(&self, s: f64, k: usize) -> f64 {
        match *self {
            Nonlinearity::PurePower { p } => {
                let q = ((p - 1.0) / 2.0) as usize;
                if k > q {
                    return 0.0;
                }
                let mut c = 1.0;
                for i in 0..k {
                    c *= (q - i) as f64;
                }
                c * math::powi(s, (q - k) as i32)
            }
            Nonlinearity::CubicQuintic { a, b } => match k {
                0 => a * s - b * s * s,
                1 => a - 2.0 * b * s,
                2 => -2.0 * b,
                _ => 0.0,
            },
            Nonlinearity::Saturable { kappa } => {
                let d = 1.0 + kappa * s;
                if k == 0 {
                    return s / d;
                }
                let mut fact = 1.0;
                for i in 2..=k {
                    fact *= i as f64;
                }
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * fact * math::powi(kappa, k as i32 - 1) / math::powi(d, k as i32 + 1)
            }
            Nonlinearity::Linear => 0.0,
        }
    }

    /// `G(s) = ∫_0^s beta`, the potential in the energy `∫ |∇u|^2 - G(|u|^2)`.
    pub fn primitive(&self, s: f64) -> f64 {
        match *self {
            Nonlinearity::PurePower { p } => {
                let q = (p - 1.0) / 2.0;
                math::powi(s, q as i32 + 1) / (q + 1.0)
            }
            Nonlinearity::CubicQuintic { a, b } => 0.5 * a * s * s - b * s * s * s / 3.0,
            Nonlinearity::Saturable { kappa } => {
                let x = kappa * s;
                if x < 1e-4 {
                    // series avoids cancellation in s/k - ln(1+ks)/k^2
                    s * s * (0.5 - x / 3.0 + x * x / 4.0 - x * x * x / 5.0)
                } else {
                    s / kappa - math::ln1p(x) / (kappa * kappa)
                }
            }
            Nonlinearity::Linear => 0.0,
        }
    }

    /// Secant slope `(G(s1) - G(s0)) / (s1 - s0)`, falling back to `beta` at the midpoint
    /// when the two arguments nearly coincide.
    pub fn secant(&self, s0: f64, s1: f64) -> f64 {
        let ds = s1 - s0;
        let scale = s0.abs().max(s1.abs()).max(1e-300);
        if ds.abs() <= 1e-6 * scale {
            let m = 0.5 * (s0 + s1);
            self.beta(m) + self.derivative(m, 2) * ds * ds / 24.0
        } else {
            (self.primitive(s1) - self.primitive(s0)) / ds
        }
    }
}

/// `beta(s)`, `beta'(s)` or `beta''(s)` with argument checking.
pub fn eval_beta(spec: &Nonlinearity, s: f64, order: usize) -> Result<f64> {
    if s < 0.0 || s.is_nan() {
        return Err(Error::NegativeArgument(s));
    }
    if order > 2 {
        return Err(Error::OrderTooHigh { order, max: 2 });
    }
    Ok(spec.derivative(s, order))
}

/// Surface area of the unit sphere `S^{d-1}`.
pub fn sphere_area(dim: usize) -> f64 {
    let half = dim as f64 / 2.0;
    2.0 * math::powf(math::PI, half) / math::tgamma(half)
}

/// Uniform radial grid on `(0, R)` with `M` intervals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialGrid {
    dim: usize,
    radius: f64,
    intervals: usize,
}

impl RadialGrid {
    pub fn new(dim: usize, radius: f64, intervals: usize) -> Result<Self> {
        if dim < 3 {
            return Err(Error::InvalidParameter(format!("dimension {dim} < 3")));
        }
        if !(radius > 0.0 && radius.is_finite()) || intervals < 4 {
            return Err(Error::InvalidParameter(format!(
                "grid needs R > 0 and M >= 4, got R = {radius}, M = {intervals}"
            )));
        }
        Ok(RadialGrid { dim, radius, intervals })
    }

    /// Same spacing, different outer radius (rounded to a whole number of intervals).
    pub fn with_radius(&self, radius: f64) -> Result<Self> {
        let m = math::round(radius / self.h()) as usize;
        RadialGrid::new(self.dim, m as f64 * self.h(), m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn intervals(&self) -> usize {
        self.intervals
    }
    #[inline]
    pub fn h(&self) -> f64 {
        self.radius / self.intervals as f64
    }
    /// Number of unknowns, `M - 1`.
    #[inline]
    pub fn len(&self) -> usize {
        self.intervals - 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    /// Radius of node `j` (zero based), `(j+1) h`.
    #[inline]
    pub fn r(&self, j: usize) -> f64 {
        (j + 1) as f64 * self.h()
    }
    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.r(j)).collect()
    }
    pub fn sphere(&self) -> f64 {
        sphere_area(self.dim)
    }
    #[inline]
    pub fn sym_exponent(&self) -> f64 {
        (self.dim as f64 - 1.0) / 2.0
    }
    /// `r_j^{(d-1)/2}`, mapping `u` to `v`.
    #[inline]
    pub fn scale(&self, j: usize) -> f64 {
        let r = self.r(j);
        match self.dim {
            3 => r,
            5 => r * r,
            _ => math::powf(r, self.sym_exponent()),
        }
    }
    pub fn scales(&self) -> Vec<f64> {
        (0..self.len()).map(|j| self.scale(j)).collect()
    }
    pub fn weight(&self, j: usize) -> f64 {
        let s = self.scale(j);
        self.sphere() * s * s * self.h()
    }
    pub fn weights(&self) -> Vec<f64> {
        let area = self.sphere();
        let h = self.h();
        (0..self.len())
            .map(|j| {
                let s = self.scale(j);
                area * s * s * h
            })
            .collect()
    }
    pub fn integrate(&self, f: &[f64]) -> f64 {
        let area = self.sphere();
        let h = self.h();
        f.iter()
            .enumerate()
            .map(|(j, x)| {
                let s = self.scale(j);
                x * s * s
            })
            .sum::<f64>()
            * area
            * h
    }

    /// `-Δ` in the variables `v = r^s u` as a symmetric tridiagonal matrix.
    ///
    /// Odd `d`: `-v'' + c v / r^2` with `c = s(s-1)` and, at the first node, the value
    /// `(2^s - 2)/h^2` that keeps constants exact (for `d = 3` this is plain `-v''`).
    /// Even `d`: `r^{1-d}` flux differences with face weights `r_{j±1/2}^{d-1}`, which
    /// stay consistent at the origin where `r^s` is not smooth.
    pub fn kinetic(&self) -> Kinetic {
        let n = self.len();
        let h = self.h();
        let h2 = h * h;
        let s = self.sym_exponent();
        if self.dim % 2 == 1 {
            let diag = (0..n)
                .map(|j| {
                    let c = if j == 0 {
                        (math::powf(2.0, s) - 2.0) / h2
                    } else {
                        let r = self.r(j);
                        s * (s - 1.0) / (r * r)
                    };
                    2.0 / h2 + c
                })
                .collect();
            Kinetic { diag, off: vec![-1.0 / h2; n - 1], boundary: -1.0 / h2 }
        } else {
            let dm1 = self.dim as i32 - 1;
            let face = |j: usize| math::powi((j as f64 + 0.5) * h, dm1);
            let sc = |j: usize| math::powf((j + 1) as f64 * h, s);
            // no flux through r = h/2: the origin is not a node
            let lower = |j: usize| if j == 0 { 0.0 } else { face(j) };
            let diag = (0..n).map(|j| (face(j + 1) + lower(j)) / (h2 * sc(j) * sc(j))).collect();
            let off = (0..n - 1).map(|j| -face(j + 1) / (h2 * sc(j) * sc(j + 1))).collect();
            Kinetic { diag, off, boundary: -face(n) / (h2 * sc(n - 1) * sc(n)) }
        }
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::GridMismatch(format!("field has {n} samples, grid has {}", self.len())));
        }
        Ok(())
    }

    /// `Δu` for real samples (Dirichlet at `R`, regular at the origin).
    pub fn laplacian(&self, u: &[f64]) -> Vec<f64> {
        let k = self.kinetic();
        let v: Vec<f64> = u.iter().enumerate().map(|(j, x)| x * self.scale(j)).collect();
        k.apply(&v).iter().enumerate().map(|(j, t)| -t / self.scale(j)).collect()
    }

    /// `Δu` for complex samples.
    pub fn laplacian_c(&self, u: &[C64]) -> Vec<C64> {
        let k = self.kinetic();
        let v: Vec<C64> = u.iter().enumerate().map(|(j, x)| x * self.scale(j)).collect();
        k.apply_c(&v).iter().enumerate().map(|(j, t)| -t / self.scale(j)).collect()
    }

    /// `u(0)` from the first three nodes by an even quadratic in `r`.
    pub fn origin_value(&self, u: &[f64]) -> f64 {
        1.5 * u[0] - 0.6 * u[1] + 0.1 * u[2]
    }

    pub fn l2_norm(&self, u: &[f64]) -> f64 {
        let sq: Vec<f64> = u.iter().map(|x| x * x).collect();
        math::sqrt(self.integrate(&sq))
    }

    pub fn l2_norm_c(&self, u: &[C64]) -> f64 {
        let sq: Vec<f64> = u.iter().map(|x| x.norm_sqr()).collect();
        math::sqrt(self.integrate(&sq))
    }

    /// `∫ |∇u|^2 + |u|^2`, with the gradient taken in the `v` variables.
    pub fn h1_norm_c(&self, u: &[C64]) -> f64 {
        math::sqrt(self.kinetic_form(u) + math::powi(self.l2_norm_c(u), 2))
    }

    /// `⟨-Δu, u⟩`.
    pub fn kinetic_form(&self, u: &[C64]) -> f64 {
        let lap = self.laplacian_c(u);
        let w = self.weights();
        -(0..self.len()).map(|j| (lap[j] * u[j].conj()).re * w[j]).sum::<f64>()
    }
}

/// Symmetric tridiagonal `-Δ` in `v` variables; `boundary` couples the last node to the
/// (Dirichlet) node at `r = R`, used when that value is replaced by a radiation condition.
#[derive(Clone, Debug)]
pub struct Kinetic {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
    pub boundary: f64,
}

impl Kinetic {
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = v.len();
        (0..n)
            .map(|j| {
                let mut t = self.diag[j] * v[j];
                if j > 0 {
                    t += self.off[j - 1] * v[j - 1];
                }
                if j + 1 < n {
                    t += self.off[j] * v[j + 1];
                }
                t
            })
            .collect()
    }

    pub fn apply_c(&self, v: &[C64]) -> Vec<C64> {
        let n = v.len();
        (0..n)
            .map(|j| {
                let mut t = v[j] * self.diag[j];
                if j > 0 {
                    t += v[j - 1] * self.off[j - 1];
                }
                if j + 1 < n {
                    t += v[j + 1] * self.off[j];
                }
                t
            })
            .collect()
    }
}

/// Two-component field `(F_1, F_2)`; physical perturbations have `F_2 = conj(F_1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinorField {
    pub a: Vec<C64>,
    pub b: Vec<C64>,
}

impl SpinorField {
    pub fn zeros(n: usize) -> Self {
        SpinorField { a: vec![C64::new(0.0, 0.0); n], b: vec![C64::new(0.0, 0.0); n] }
    }

    pub fn from_real(a: &[f64], b: &[f64]) -> Self {
        SpinorField {
            a: a.iter().map(|x| C64::new(*x, 0.0)).collect(),
            b: b.iter().map(|x| C64::new(*x, 0.0)).collect(),
        }
    }

    /// Lifts a scalar perturbation `r` to `(r, conj r)`.
    pub fn lift(r: &[C64]) -> Self {
        SpinorField { a: r.to_vec(), b: r.iter().map(|x| x.conj()).collect() }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }
    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn sigma1(&self) -> Self {
        SpinorField { a: self.b.clone(), b: self.a.clone() }
    }
    pub fn sigma3(&self) -> Self {
        SpinorField { a: self.a.clone(), b: self.b.iter().map(|x| -x).collect() }
    }
    pub fn conj(&self) -> Self {
        SpinorField {
            a: self.a.iter().map(|x| x.conj()).collect(),
            b: self.b.iter().map(|x| x.conj()).collect(),
        }
    }
    pub fn scale(&self, c: C64) -> Self {
        SpinorField { a: self.a.iter().map(|x| x * c).collect(), b: self.b.iter().map(|x| x * c).collect() }
    }
    pub fn scale_re(&self, c: f64) -> Self {
        self.scale(C64::new(c, 0.0))
    }
    /// `self += c * other`.
    pub fn axpy(&mut self, c: C64, other: &SpinorField) {
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += c * y;
        }
        for (x, y) in self.b.iter_mut().zip(&other.b) {
            *x += c * y;
        }
    }
    pub fn add(&self, other: &SpinorField) -> Self {
        let mut out = self.clone();
        out.axpy(C64::new(1.0, 0.0), other);
        out
    }
    pub fn sub(&self, other: &SpinorField) -> Self {
        let mut out = self.clone();
        out.axpy(C64::new(-1.0, 0.0), other);
        out
    }
    pub fn re(&self) -> Self {
        SpinorField {
            a: self.a.iter().map(|x| C64::new(x.re, 0.0)).collect(),
            b: self.b.iter().map(|x| C64::new(x.re, 0.0)).collect(),
        }
    }
    pub fn im(&self) -> Self {
        SpinorField {
            a: self.a.iter().map(|x| C64::new(x.im, 0.0)).collect(),
            b: self.b.iter().map(|x| C64::new(x.im, 0.0)).collect(),
        }
    }
    pub fn max_abs(&self) -> f64 {
        self.a.iter().chain(&self.b).map(|x| x.norm()).fold(0.0, f64::max)
    }
    pub fn max_imag(&self) -> f64 {
        self.a.iter().chain(&self.b).map(|x| x.im.abs()).fold(0.0, f64::max)
    }
    /// Largest nodal defect of `σ_1 F = conj(F)`.
    pub fn conjugation_defect(&self) -> f64 {
        self.a.iter().zip(&self.b).map(|(x, y)| (x.conj() - y).norm()).fold(0.0, f64::max)
    }
    /// Zero-pads or truncates to `n` nodes.
    pub fn resized(&self, n: usize) -> Self {
        let mut out = SpinorField::zeros(n);
        let m = n.min(self.len());
        out.a[..m].copy_from_slice(&self.a[..m]);
        out.b[..m].copy_from_slice(&self.b[..m]);
        out
    }
}

/// `Σ_j w_j (F_1 conj G_1 + F_2 conj G_2)`.
pub fn inner(grid: &RadialGrid, f: &SpinorField, g: &SpinorField) -> Result<C64> {
    grid.check_len(f.len())?;
    grid.check_len(g.len())?;
    Ok(pair(grid, f, g))
}

/// Unchecked [`inner`].
pub fn pair(grid: &RadialGrid, f: &SpinorField, g: &SpinorField) -> C64 {
    let area = grid.sphere();
    let h = grid.h();
    let mut acc = C64::new(0.0, 0.0);
    for j in 0..f.len() {
        let s = grid.scale(j);
        acc += (f.a[j] * g.a[j].conj() + f.b[j] * g.b[j].conj()) * (s * s);
    }
    acc * (area * h)
}

/// Bilinear pairing `Σ_j w_j (F_1 G_1 + F_2 G_2)`, the transpose duality.
pub fn bilinear(grid: &RadialGrid, f: &SpinorField, g: &SpinorField) -> C64 {
    let area = grid.sphere();
    let h = grid.h();
    let mut acc = C64::new(0.0, 0.0);
    for j in 0..f.len() {
        let s = grid.scale(j);
        acc += (f.a[j] * g.a[j] + f.b[j] * g.b[j]) * (s * s);
    }
    acc * (area * h)
}

pub fn norm(grid: &RadialGrid, f: &SpinorField) -> f64 {
    math::sqrt(pair(grid, f, f).re)
}

/// `Φ = (φ, φ)` for a real profile.
pub fn spinor_of_profile(phi: &[f64]) -> SpinorField {
    SpinorField::from_real(phi, phi)
}

/// Pointwise real 2x2 matrix field `[[a11, a12], [a21, a22]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixField {
    pub a11: Vec<f64>,
    pub a12: Vec<f64>,
    pub a21: Vec<f64>,
    pub a22: Vec<f64>,
}

impl MatrixField {
    pub fn zeros(n: usize) -> Self {
        MatrixField { a11: vec![0.0; n], a12: vec![0.0; n], a21: vec![0.0; n], a22: vec![0.0; n] }
    }
    pub fn apply(&self, f: &SpinorField) -> SpinorField {
        let n = f.len();
        let mut out = SpinorField::zeros(n);
        for j in 0..n {
            out.a[j] = f.a[j] * self.a11[j] + f.b[j] * self.a12[j];
            out.b[j] = f.a[j] * self.a21[j] + f.b[j] * self.a22[j];
        }
        out
    }
    /// `A^T g`, for moving `A` across the bilinear pairing.
    pub fn apply_transpose(&self, g: &SpinorField) -> SpinorField {
        let n = g.len();
        let mut out = SpinorField::zeros(n);
        for j in 0..n {
            out.a[j] = g.a[j] * self.a11[j] + g.b[j] * self.a21[j];
            out.b[j] = g.a[j] * self.a12[j] + g.b[j] * self.a22[j];
        }
        out
    }
    pub fn max_abs(&self) -> f64 {
        self.a11.iter().chain(&self.a12).chain(&self.a21).chain(&self.a22).map(|x| x.abs()).fold(0.0, f64::max)
    }
}

/// Largest total degree supported by the Taylor engine.
pub const MAX_TAYLOR_ORDER: usize = 7;

/// Taylor coefficients of `𝒩(R)` with `R = z ξ + z̄ σ_1 ξ + f`.
///
/// `lambda[(m, n)]` multiplies `z^m z̄^n` (with `2 <= m+n <= order`) and
/// `a[(m, n)]` is the matrix acting on `f` in the `z^m z̄^n f` term (`1 <= m+n <= order-1`).
#[derive(Clone, Debug)]
pub struct TaylorCoefficients {
    pub order: usize,
    pub lambda: Vec<((u32, u32), SpinorField)>,
    pub a: Vec<((u32, u32), MatrixField)>,
}

impl TaylorCoefficients {
    pub fn lambda(&self, m: u32, n: u32) -> Option<&SpinorField> {
        self.lambda.iter().find(|(k, _)| *k == (m, n)).map(|(_, v)| v)
    }
    pub fn a(&self, m: u32, n: u32) -> Option<&MatrixField> {
        self.a.iter().find(|(k, _)| *k == (m, n)).map(|(_, v)| v)
    }
    pub fn max_abs(&self) -> f64 {
        let l = self.lambda.iter().map(|(_, f)| f.max_abs()).fold(0.0, f64::max);
        let a = self.a.iter().map(|(_, f)| f.max_abs()).fold(0.0, f64::max);
        l.max(a)
    }
}

/// Truncated polynomial in `(z, z̄)` with an optional linear slot in `f_1` or `f_2`.
/// Slot 0 keeps degrees up to `deg`, slots 1 and 2 up to `deg - 1`.
#[derive(Clone)]
struct NodePoly {
    deg: usize,
    c: [Vec<f64>; 3],
}

fn mono_index(m: usize, n: usize) -> usize {
    let k = m + n;
    k * (k + 1) / 2 + n
}

impl NodePoly {
    fn zero(deg: usize) -> Self {
        let len = (deg + 1) * (deg + 2) / 2;
        NodePoly { deg, c: [vec![0.0; len], vec![0.0; len], vec![0.0; len]] }
    }
    fn limit(&self, slot: usize) -> usize {
        if slot == 0 {
            self.deg
        } else {
            self.deg.saturating_sub(1)
        }
    }
    fn mul(&self, o: &NodePoly) -> NodePoly {
        let mut out = NodePoly::zero(self.deg);
        for (sa, sb, so) in [(0, 0, 0), (0, 1, 1), (1, 0, 1), (0, 2, 2), (2, 0, 2)] {
            let lim = out.limit(so);
            for ka in 0..=self.limit(sa) {
                for na in 0..=ka {
                    let x = self.c[sa][mono_index(ka - na, na)];
                    if x == 0.0 {
                        continue;
                    }
                    for kb in 0..=(lim.saturating_sub(ka)).min(o.limit(sb)) {
                        if ka + kb > lim {
                            break;
                        }
                        for nb in 0..=kb {
                            let y = o.c[sb][mono_index(kb - nb, nb)];
                            if y != 0.0 {
                                out.c[so][mono_index(ka - na + kb - nb, na + nb)] += x * y;
                            }
                        }
                    }
                }
            }
        }
        out
    }
    fn add_scaled(&mut self, o: &NodePoly, s: f64) {
        for slot in 0..3 {
            for (x, y) in self.c[slot].iter_mut().zip(&o.c[slot]) {
                *x += s * y;
            }
        }
    }
}

/// Analytic Taylor coefficients of the nonlinear remainder around `φ` along the
/// internal-mode directions `ξ` (real).
pub fn taylor_nonlinearity(
    spec: &Nonlinearity,
    phi: &[f64],
    xi: &SpinorField,
    order: usize,
) -> Result<TaylorCoefficients> {
    taylor_nonlinearity_with(spec, phi, xi, &[], order)
}

/// Same expansion with `R = z ξ + z̄ σ_1 ξ + Σ P_{m,n} z^m z̄^n + f` for real profiles
/// `P_{m,n}` of degree `m+n >= 2` satisfying `σ_1 P_{m,n} = P_{n,m}`.
pub fn taylor_nonlinearity_with(
    spec: &Nonlinearity,
    phi: &[f64],
    xi: &SpinorField,
    extra: &[((u32, u32), SpinorField)],
    order: usize,
) -> Result<TaylorCoefficients> {
    if order > MAX_TAYLOR_ORDER {
        return Err(Error::OrderTooHigh { order, max: MAX_TAYLOR_ORDER });
    }
    if order < 2 {
        return Err(Error::InvalidParameter("Taylor order must be at least 2".into()));
    }
    if xi.len() != phi.len() || extra.iter().any(|(_, p)| p.len() != phi.len()) {
        return Err(Error::GridMismatch("profiles differ in length".into()));
    }
    let n = phi.len();
    let mut lam: Vec<((u32, u32), SpinorField)> = Vec::new();
    let mut amat: Vec<((u32, u32), MatrixField)> = Vec::new();
    for k in 2..=order {
        for nn in 0..=k {
            lam.push((((k - nn) as u32, nn as u32), SpinorField::zeros(n)));
        }
    }
    for k in 1..order {
        for nn in 0..=k {
            amat.push((((k - nn) as u32, nn as u32), MatrixField::zeros(n)));
        }
    }
    if spec.is_linear() {
        return Ok(TaylorCoefficients { order, lambda: lam, a: amat });
    }
    let mut fact = vec![1.0; order + 1];
    for i in 1..=order {
        fact[i] = fact[i - 1] * i as f64;
    }
    for j in 0..n {
        let p = phi[j];
        let s = p * p;
        let x1 = xi.a[j].re;
        let x2 = xi.b[j].re;
        // r = z x1 + z̄ x2 + f1, r̄ = z̄ x1 + z x2 + f2
        let mut r = NodePoly::zero(order);
        r.c[0][mono_index(1, 0)] = x1;
        r.c[0][mono_index(0, 1)] = x2;
        r.c[1][0] = 1.0;
        let mut rb = NodePoly::zero(order);
        rb.c[0][mono_index(1, 0)] = x2;
        rb.c[0][mono_index(0, 1)] = x1;
        rb.c[2][0] = 1.0;
        for ((m, nn), prof) in extra {
            let k = (*m + *nn) as usize;
            if (2..=order).contains(&k) {
                r.c[0][mono_index(*m as usize, *nn as usize)] += prof.a[j].re;
                rb.c[0][mono_index(*m as usize, *nn as usize)] += prof.b[j].re;
            }
        }
        // delta = φ (r + r̄) + r r̄
        let mut delta = r.mul(&rb);
        delta.add_scaled(&r, p);
        delta.add_scaled(&rb, p);
        // beta(s + delta) as a power series in delta
        let mut bexp = NodePoly::zero(order);
        bexp.c[0][0] = spec.beta(s);
        let mut pw = delta.clone();
        for kk in 1..=order {
            bexp.add_scaled(&pw, spec.derivative(s, kk) / fact[kk]);
            if kk < order {
                pw = pw.mul(&delta);
            }
        }
        let mut phir = r.clone();
        phir.c[0][0] += p;
        let g = bexp.mul(&phir);
        // N_1 = -[g - g(φ) - g'(φ) R]: only degree >= 2 monomials survive
        for ((m, nn), f) in lam.iter_mut() {
            let v = -g.c[0][mono_index(*m as usize, *nn as usize)];
            f.a[j] = C64::new(v, 0.0);
        }
        // the extra profiles enter R linearly, and that part is not in 𝒩
        let b0 = spec.beta(s);
        let b1 = spec.derivative(s, 1) * s;
        for ((m, nn), prof) in extra {
            if let Some((_, f)) = lam.iter_mut().find(|(k, _)| k == &(*m, *nn)) {
                f.a[j] += C64::new((b0 + b1) * prof.a[j].re + b1 * prof.b[j].re, 0.0);
            }
        }
        for ((m, nn), mf) in amat.iter_mut() {
            mf.a11[j] = -g.c[1][mono_index(*m as usize, *nn as usize)];
            mf.a12[j] = -g.c[2][mono_index(*m as usize, *nn as usize)];
        }
    }
    // second component from N_2 = -conj(N_1)
    let lam_a: Vec<((u32, u32), Vec<C64>)> = lam.iter().map(|(k, f)| (*k, f.a.clone())).collect();
    for ((m, nn), f) in lam.iter_mut() {
        let src = &lam_a.iter().find(|(k, _)| *k == (*nn, *m)).unwrap().1;
        for j in 0..n {
            f.b[j] = -src[j];
        }
    }
    let rows: Vec<((u32, u32), (Vec<f64>, Vec<f64>))> =
        amat.iter().map(|(k, mf)| (*k, (mf.a11.clone(), mf.a12.clone()))).collect();
    for ((m, nn), mf) in amat.iter_mut() {
        let (p11, p12) = &rows.iter().find(|(k, _)| *k == (*nn, *m)).unwrap().1;
        for j in 0..n {
            mf.a21[j] = -p12[j];
            mf.a22[j] = -p11[j];
        }
    }
    Ok(TaylorCoefficients { order, lambda: lam, a: amat })
}

/// Direct evaluation of `𝒩(R)` for a physical perturbation `R = (r, conj r)`.
pub fn nonlinear_remainder(spec: &Nonlinearity, phi: &[f64], r: &[C64]) -> SpinorField {
    let n = phi.len();
    let mut out = SpinorField::zeros(n);
    for j in 0..n {
        let p = phi[j];
        let s = p * p;
        let u = C64::new(p, 0.0) + r[j];
        let g = u * spec.beta(u.norm_sqr());
        let b0 = spec.beta(s);
        let b1 = spec.derivative(s, 1) * s;
        let lin = r[j] * (b0 + b1) + r[j].conj() * b1;
        let n1 = -(g - C64::new(b0 * p, 0.0) - lin);
        out.a[j] = n1;
        out.b[j] = -n1.conj();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> RadialGrid {
        RadialGrid::new(3, 40.0, 4000).unwrap()
    }

    #[test]
    fn beta_closed_forms() {
        let p = Nonlinearity::PurePower { p: 3.0 };
        assert_eq!(eval_beta(&p, 4.0, 0).unwrap(), 4.0);
        let s = Nonlinearity::Saturable { kappa: 1.0 };
        assert_eq!(eval_beta(&s, 1.0, 0).unwrap(), 0.5);
        let cq = Nonlinearity::CubicQuintic { a: 1.0, b: 0.1 };
        assert!((eval_beta(&cq, 2.0, 1).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(eval_beta(&cq, -1.0, 0), Err(Error::NegativeArgument(_))));
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let kinds = [
            Nonlinearity::PurePower { p: 5.0 },
            Nonlinearity::CubicQuintic { a: 1.0, b: 0.3 },
            Nonlinearity::Saturable { kappa: 0.7 },
        ];
        for k in kinds {
            for s in [0.3, 1.2, 2.5] {
                for ord in 0..4 {
                    let d = 1e-4;
                    let fd = (k.derivative(s + d, ord) - k.derivative(s - d, ord)) / (2.0 * d);
                    let an = k.derivative(s, ord + 1);
                    assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{k:?} s={s} ord={ord}");
                }
                let d = 1e-5;
                let fd = (k.primitive(s + d) - k.primitive(s - d)) / (2.0 * d);
                assert!((fd - k.beta(s)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn pure_power_range_checked() {
        assert!(Nonlinearity::PurePower { p: 3.0 }.validate(3).is_ok());
        assert!(Nonlinearity::PurePower { p: 5.0 }.validate(3).is_err());
        assert!(Nonlinearity::PurePower { p: 2.0 }.validate(3).is_err());
        assert!(Nonlinearity::PurePower { p: 3.0 }.validate(4).is_err());
    }

    #[test]
    fn gaussian_mass_quadrature() {
        let g = grid();
        let f: Vec<f64> = g.nodes().iter().map(|r| math::exp(-r * r)).collect();
        let exact = math::powf(math::PI, 1.5);
        assert!((g.integrate(&f) - exact).abs() / exact < 1e-6);
        for d in [4usize, 5] {
            let g = RadialGrid::new(d, 40.0, 4000).unwrap();
            let f: Vec<f64> = g.nodes().iter().map(|r| math::exp(-r * r)).collect();
            let exact = math::powf(math::PI, d as f64 / 2.0);
            assert!((g.integrate(&f) - exact).abs() / exact < 1e-6, "d = {d}");
        }
    }

    #[test]
    fn laplacian_of_gaussian_second_order() {
        // Δ e^{-r^2} = (4 r^2 - 2d) e^{-r^2}
        for d in [3usize, 4, 5] {
            let mut errs = Vec::new();
            for m in [400usize, 800] {
                let g = RadialGrid::new(d, 10.0, m).unwrap();
                let u: Vec<f64> = g.nodes().iter().map(|r| math::exp(-r * r)).collect();
                let lap = g.laplacian(&u);
                let e: Vec<f64> = g
                    .nodes()
                    .iter()
                    .zip(&lap)
                    .map(|(r, l)| l - (4.0 * r * r - 2.0 * d as f64) * math::exp(-r * r))
                    .collect();
                errs.push(g.l2_norm(&e));
            }
            let slope = math::ln(errs[0] / errs[1]) / math::ln(2.0);
            assert!(slope > 1.7, "d = {d}, errors {errs:?}");
        }
    }

    #[test]
    fn pairing_normalization_and_sesquilinearity() {
        let g = RadialGrid::new(3, 10.0, 200).unwrap();
        let mut rng = math::XorShift::new(3);
        let mk = |rng: &mut math::XorShift| {
            let mut f = SpinorField::zeros(g.len());
            for j in 0..g.len() {
                f.a[j] = C64::new(rng.uniform(), rng.uniform());
                f.b[j] = C64::new(rng.uniform(), rng.uniform());
            }
            f
        };
        let f = mk(&mut rng);
        let h = mk(&mut rng);
        let nf = norm(&g, &f);
        let f1 = f.scale_re(1.0 / nf);
        assert!((inner(&g, &f1, &f1).unwrap().re - 1.0).abs() < 1e-13);
        let a = inner(&g, &f, &h).unwrap();
        let b = inner(&g, &h, &f).unwrap().conj();
        assert!((a - b).norm() < 1e-12 * a.norm());
        let short = SpinorField::zeros(5);
        assert!(inner(&g, &f, &short).is_err());
    }

    fn test_profile(g: &RadialGrid) -> (Vec<f64>, SpinorField) {
        let phi: Vec<f64> = g.nodes().iter().map(|r| 1.3 * math::exp(-0.5 * r * r)).collect();
        let xa: Vec<f64> = g.nodes().iter().map(|r| (1.0 - r * r / 3.0) * math::exp(-0.4 * r * r)).collect();
        let xb: Vec<f64> = g.nodes().iter().map(|r| 0.4 * math::exp(-0.6 * r * r)).collect();
        (phi, SpinorField::from_real(&xa, &xb))
    }

    #[test]
    fn taylor_symmetries_and_linear_case() {
        let g = RadialGrid::new(3, 8.0, 80).unwrap();
        let (phi, xi) = test_profile(&g);
        let t = taylor_nonlinearity(&Nonlinearity::Linear, &phi, &xi, 3).unwrap();
        assert_eq!(t.max_abs(), 0.0);
        for spec in [
            Nonlinearity::PurePower { p: 3.0 },
            Nonlinearity::CubicQuintic { a: 1.0, b: 0.4 },
            Nonlinearity::Saturable { kappa: 1.0 },
        ] {
            let t = taylor_nonlinearity(&spec, &phi, &xi, 4).unwrap();
            for ((m, n), l) in &t.lambda {
                let mirror = t.lambda(*n, *m).unwrap();
                assert!(l.sigma1().add(mirror).max_abs() < 1e-13);
            }
            for ((m, n), a) in &t.a {
                let b = t.a(*n, *m).unwrap();
                for j in 0..g.len() {
                    assert!((a.a11[j] + b.a22[j]).abs() < 1e-13);
                    assert!((a.a12[j] + b.a21[j]).abs() < 1e-13);
                }
            }
        }
        assert!(matches!(
            taylor_nonlinearity(&Nonlinearity::Linear, &phi, &xi, 9),
            Err(Error::OrderTooHigh { .. })
        ));
    }

    /// Evaluates the truncated Taylor series at a physical `(z, f)`.
    fn taylor_eval(t: &TaylorCoefficients, z: C64, f: &SpinorField, n: usize) -> SpinorField {
        let mut out = SpinorField::zeros(n);
        for ((m, k), l) in &t.lambda {
            let c = z.powu(*m) * z.conj().powu(*k);
            out.axpy(c, l);
        }
        for ((m, k), a) in &t.a {
            let c = z.powu(*m) * z.conj().powu(*k);
            out.axpy(c, &a.apply(f));
        }
        out
    }

    #[test]
    fn taylor_matches_direct_remainder_to_next_order() {
        let g = RadialGrid::new(3, 8.0, 80).unwrap();
        let (phi, xi) = test_profile(&g);
        let fr: Vec<C64> = g.nodes().iter().map(|r| C64::new(0.3, -0.2) * math::exp(-r * r)).collect();
        for spec in [
            Nonlinearity::PurePower { p: 3.0 },
            Nonlinearity::CubicQuintic { a: 1.0, b: 0.4 },
            Nonlinearity::Saturable { kappa: 1.0 },
        ] {
            for order in [2usize, 3, 4] {
                let t = taylor_nonlinearity(&spec, &phi, &xi, order).unwrap();
                let mut errs = Vec::new();
                for eps in [0.02, 0.01, 0.005] {
                    let z = C64::new(0.7, 0.4) * eps;
                    let f = SpinorField::lift(&fr).scale_re(eps * eps * eps);
                    let r: Vec<C64> = (0..g.len()).map(|j| z * xi.a[j] + z.conj() * xi.b[j] + f.a[j]).collect();
                    let direct = nonlinear_remainder(&spec, &phi, &r);
                    let approx = taylor_eval(&t, z, &f, g.len());
                    errs.push(norm(&g, &direct.sub(&approx)));
                }
                if errs[2] < 1e-14 {
                    // series terminates: the truncation is exact
                    continue;
                }
                let slope = math::ln(errs[1] / errs[2]) / math::ln(2.0);
                assert!(slope > order as f64 + 0.9, "{spec:?} order {order}: {errs:?}");
            }
        }
    }
}
