//! The linearized operator `H_ω`, its gap spectrum, the internal mode and the
//! continuous-spectrum projection.
//!
//! `H = [[L_a, -b], [b, -L_a]]` with `L_a = -Δ + ω - β(φ²) - β'(φ²)φ²` and `b = β'(φ²)φ²`.
//! This is `σ_3(-Δ+ω) + V` with the off-diagonal part of `V` written as `iβ'φ²σ_2`
//! for `σ_2 = [[0, i], [-i, 0]]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, Matrix4, Vector4};

use crate::banded::{BandLu, BandMatrix, Scalar};
use crate::ground_state::GroundState;
use crate::math::{self, XorShift};
use crate::model::{bilinear, norm, pair, Kinetic, MatrixField, Nonlinearity, RadialGrid, SpinorField};
use crate::{Error, Result, C64};

const ZERO: C64 = C64::new(0.0, 0.0);
const ONE: C64 = C64::new(1.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

pub const SIGMA_1: [[C64; 2]; 2] = [[ZERO, ONE], [ONE, ZERO]];
/// The nonstandard sign used with the potential, `[[0, i], [-i, 0]]`.
pub const SIGMA_2: [[C64; 2]; 2] = [[ZERO, I], [C64::new(0.0, -1.0), ZERO]];
pub const SIGMA_3: [[C64; 2]; 2] = [[ONE, ZERO], [ZERO, C64::new(-1.0, 0.0)]];

/// `H_ω` on a radial grid, stored by its kinetic part and two potential profiles.
#[derive(Clone, Debug)]
pub struct Hamiltonian {
    grid: RadialGrid,
    omega: f64,
    kin: Kinetic,
    scales: Vec<f64>,
    /// `ω - β(φ²) - β'(φ²)φ²`
    pub diag: Vec<f64>,
    /// `β'(φ²)φ²`
    pub coupling: Vec<f64>,
}

impl Hamiltonian {
    /// `σ_3(-Δ + ω)`.
    pub fn free(grid: &RadialGrid, omega: f64) -> Self {
        let n = grid.len();
        Hamiltonian {
            grid: *grid,
            omega,
            kin: grid.kinetic(),
            scales: grid.scales(),
            diag: vec![omega; n],
            coupling: vec![0.0; n],
        }
    }

    pub fn assemble(spec: &Nonlinearity, omega: f64, grid: &RadialGrid, phi: &[f64]) -> Result<Self> {
        grid.check_len(phi.len())?;
        let mut h = Self::free(grid, omega);
        for j in 0..phi.len() {
            let s = phi[j] * phi[j];
            let bs = spec.derivative(s, 1) * s;
            h.diag[j] = omega - spec.beta(s) - bs;
            h.coupling[j] = bs;
        }
        Ok(h)
    }

    /// The same operator on a longer grid with the same spacing; the potential is
    /// continued by zero.
    pub fn extended(&self, grid: &RadialGrid) -> Result<Self> {
        if (grid.h() - self.grid.h()).abs() > 1e-12 * grid.h() || grid.dim() != self.grid.dim() {
            return Err(Error::GridMismatch("extension must keep d and h".into()));
        }
        if grid.len() < self.grid.len() {
            return Err(Error::GridMismatch("extension must not shrink the grid".into()));
        }
        let mut h = Self::free(grid, self.omega);
        let n = self.len();
        h.diag[..n].copy_from_slice(&self.diag);
        h.coupling[..n].copy_from_slice(&self.coupling);
        Ok(h)
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.grid
    }
    pub fn omega(&self) -> f64 {
        self.omega
    }
    pub fn len(&self) -> usize {
        self.diag.len()
    }
    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }
    pub fn kinetic(&self) -> &Kinetic {
        &self.kin
    }

    /// `V_ω` entrywise.
    pub fn potential(&self) -> MatrixField {
        let n = self.len();
        let mut v = MatrixField::zeros(n);
        for j in 0..n {
            let d = self.diag[j] - self.omega;
            v.a11[j] = d;
            v.a12[j] = -self.coupling[j];
            v.a21[j] = self.coupling[j];
            v.a22[j] = -d;
        }
        v
    }

    pub fn apply(&self, f: &SpinorField) -> SpinorField {
        let n = self.len();
        let va: Vec<C64> = (0..n).map(|j| f.a[j] * self.scales[j]).collect();
        let vb: Vec<C64> = (0..n).map(|j| f.b[j] * self.scales[j]).collect();
        let ka = self.kin.apply_c(&va);
        let kb = self.kin.apply_c(&vb);
        let mut out = SpinorField::zeros(n);
        for j in 0..n {
            let s = self.scales[j];
            out.a[j] = ka[j] / s + f.a[j] * self.diag[j] - f.b[j] * self.coupling[j];
            out.b[j] = f.a[j] * self.coupling[j] - kb[j] / s - f.b[j] * self.diag[j];
        }
        out
    }

    /// Interleaved `v`-space vector `(v_1(r_0), v_2(r_0), v_1(r_1), ...)`.
    pub fn to_v(&self, f: &SpinorField) -> Vec<C64> {
        let mut x = Vec::with_capacity(2 * self.len());
        for j in 0..self.len() {
            x.push(f.a[j] * self.scales[j]);
            x.push(f.b[j] * self.scales[j]);
        }
        x
    }

    pub fn from_v(&self, x: &[C64]) -> SpinorField {
        let n = self.len();
        let mut f = SpinorField::zeros(n);
        for j in 0..n {
            f.a[j] = x[2 * j] / self.scales[j];
            f.b[j] = x[2 * j + 1] / self.scales[j];
        }
        f
    }

    pub fn from_v_real(&self, x: &[f64]) -> SpinorField {
        let n = self.len();
        let mut f = SpinorField::zeros(n);
        for j in 0..n {
            f.a[j] = C64::new(x[2 * j] / self.scales[j], 0.0);
            f.b[j] = C64::new(x[2 * j + 1] / self.scales[j], 0.0);
        }
        f
    }

    /// `H - μ` in interleaved `v` variables, bandwidth 2 on each side.
    pub fn shifted_band<T: Scalar>(&self, mu: T) -> BandMatrix<T> {
        let n = self.len();
        let mut m = BandMatrix::<T>::zeros(2 * n, 2, 2);
        for j in 0..n {
            let (p, q) = (2 * j, 2 * j + 1);
            let d = self.kin.diag[j] + self.diag[j];
            m.set(p, p, T::from_f64(d) - mu);
            m.set(p, q, T::from_f64(-self.coupling[j]));
            m.set(q, p, T::from_f64(self.coupling[j]));
            m.set(q, q, T::from_f64(-d) - mu);
            if j + 1 < n {
                let o = self.kin.off[j];
                m.set(p, p + 2, T::from_f64(o));
                m.set(p + 2, p, T::from_f64(o));
                m.set(q, q + 2, T::from_f64(-o));
                m.set(q + 2, q, T::from_f64(-o));
            }
        }
        m
    }

    /// `H x` in interleaved `v` variables.
    pub fn apply_v<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let n = self.len();
        let mut y = vec![T::zero(); 2 * n];
        for j in 0..n {
            let (p, q) = (2 * j, 2 * j + 1);
            let d = T::from_f64(self.kin.diag[j] + self.diag[j]);
            let b = T::from_f64(self.coupling[j]);
            let mut ya = d * x[p] - b * x[q];
            let mut yb = b * x[p] - d * x[q];
            if j > 0 {
                let o = T::from_f64(self.kin.off[j - 1]);
                ya = ya + o * x[p - 2];
                yb = yb - o * x[q - 2];
            }
            if j + 1 < n {
                let o = T::from_f64(self.kin.off[j]);
                ya = ya + o * x[p + 2];
                yb = yb - o * x[q + 2];
            }
            y[p] = ya;
            y[q] = yb;
        }
        y
    }
}

/// Tuning for the gap eigenvalue sweep.
#[derive(Clone, Copy, Debug)]
pub struct SpectrumOptions {
    pub krylov_dim: usize,
    /// Shifts at `±ω k / (shifts+1)`, `k = 1..=shifts`.
    pub shifts: usize,
    /// Eigenvalues with `|μ| < kernel_tol·ω` belong to the generalized kernel.
    pub kernel_tol: f64,
    /// Eigenvalues with `ω - |Re μ| < threshold_tol·ω` are flagged.
    pub threshold_tol: f64,
    /// Required relative distance of `ω/λ` from an integer.
    pub resonance_margin: f64,
    pub seed: u64,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        SpectrumOptions {
            krylov_dim: 36,
            shifts: 9,
            kernel_tol: 1e-4,
            threshold_tol: 1e-3,
            resonance_margin: 1e-3,
            seed: 0x5eed_1234_abcd_0001,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EigenKind {
    Kernel,
    InternalMode,
    Conjugate,
    /// Anything else in the gap.
    Extra,
}

#[derive(Clone, Debug)]
pub struct GapEigenvalue {
    pub value: C64,
    pub residual: f64,
    pub kind: EigenKind,
}

#[derive(Clone, Debug)]
pub struct SpectrumReport {
    pub omega: f64,
    pub eigenvalues: Vec<GapEigenvalue>,
    /// Number of Ritz values found inside the kernel tolerance.
    pub kernel_dim: usize,
    /// Smallest `ω - |Re μ|` over the computed gap eigenvalues.
    pub threshold_distance: f64,
    /// Gap eigenvalues so close to `±ω` that a threshold resonance cannot be excluded.
    pub near_threshold: Vec<C64>,
    internal: Option<(f64, Vec<f64>)>,
}

impl SpectrumReport {
    pub fn internal_eigenvalue(&self) -> Option<f64> {
        self.internal.as_ref().map(|(l, _)| *l)
    }
    pub fn extra(&self) -> Vec<C64> {
        self.eigenvalues.iter().filter(|e| e.kind == EigenKind::Extra).map(|e| e.value).collect()
    }
    /// Gap part of (H9): generalized kernel of dimension two, one pair `±λ`, nothing else.
    pub fn gap_h9_holds(&self) -> bool {
        let count = |k| self.eigenvalues.iter().filter(|e| e.kind == k).count();
        self.kernel_dim == 2
            && count(EigenKind::InternalMode) == 1
            && count(EigenKind::Conjugate) == 1
            && count(EigenKind::Extra) == 0
            && self.near_threshold.is_empty()
    }
    pub fn is_inconclusive(&self) -> bool {
        !self.near_threshold.is_empty()
    }
}

fn arnoldi_ritz(lu: &BandLu<f64>, dim: usize, m: usize, rng: &mut XorShift) -> Result<Vec<C64>> {
    let m = m.min(dim);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut v: Vec<f64> = (0..dim).map(|_| rng.uniform()).collect();
    let nv = math::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    v.iter_mut().for_each(|x| *x /= nv);
    basis.push(v);
    let mut hess = DMatrix::<f64>::zeros(m, m);
    let mut size = m;
    for k in 0..m {
        let mut w = lu.solve(&basis[k]);
        for _ in 0..2 {
            for (i, q) in basis.iter().enumerate() {
                let c: f64 = w.iter().zip(q).map(|(a, b)| a * b).sum();
                hess[(i, k)] += c;
                w.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let nw = math::sqrt(w.iter().map(|x| x * x).sum::<f64>());
        if k + 1 == m {
            break;
        }
        if nw < 1e-14 * hess[(k, k)].abs().max(1e-300) {
            size = k + 1;
            break;
        }
        hess[(k + 1, k)] = nw;
        w.iter_mut().for_each(|x| *x /= nw);
        basis.push(w);
    }
    let hm = hess.view((0, 0), (size, size)).into_owned();
    let schur = hm
        .try_schur(1e-14, 10_000)
        .ok_or_else(|| Error::Eigensolver("Hessenberg QR did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

fn bilinear_sigma3<T: Scalar>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (k, (a, b)) in x.iter().zip(y).enumerate() {
        if k % 2 == 0 {
            acc = acc + *a * *b;
        } else {
            acc = acc - *a * *b;
        }
    }
    acc
}

struct Refined<T> {
    value: T,
    vector: Vec<T>,
    residual: f64,
}

fn normalize<T: Scalar>(x: &mut [T]) -> f64 {
    let n = math::sqrt(x.iter().map(|a| a.modulus() * a.modulus()).sum::<f64>());
    let inv = T::from_f64(1.0 / n);
    x.iter_mut().for_each(|a| *a = *a * inv);
    n
}

/// Inverse iteration at a fixed shift, then a `σ_3`-weighted Rayleigh quotient.
fn inverse_iteration<T: Scalar>(ham: &Hamiltonian, mu0: T, rng: &mut XorShift) -> Option<Refined<T>> {
    let dim = 2 * ham.len();
    let lu = ham.shifted_band(mu0).factor();
    if lu.is_singular() {
        return None;
    }
    let mut x: Vec<T> = (0..dim).map(|_| T::from_f64(rng.uniform())).collect();
    normalize(&mut x);
    for _ in 0..12 {
        lu.solve_in_place(&mut x);
        normalize(&mut x);
    }
    let hx = ham.apply_v(&x);
    let den = bilinear_sigma3(&x, &x);
    let value = if den.modulus() > 1e-8 {
        bilinear_sigma3(&hx, &x) / den
    } else {
        // degenerate σ_3 norm: plain Rayleigh quotient
        hx.iter().zip(&x).fold(T::zero(), |a, (p, q)| a + *p * *q)
            / x.iter().fold(T::zero(), |a, q| a + *q * *q)
    };
    let residual = math::sqrt(hx.iter().zip(&x).map(|(p, q)| math::powi((*p - value * *q).modulus(), 2)).sum::<f64>());
    Some(Refined { value, vector: x, residual })
}

/// All eigenvalues of `H` with `|Re μ| < ω` by a shift-invert Arnoldi sweep.
pub fn discrete_spectrum(ham: &Hamiltonian, opts: &SpectrumOptions) -> Result<SpectrumReport> {
    let omega = ham.omega();
    let dim = 2 * ham.len();
    let mut rng = XorShift::new(opts.seed);
    let ktol = opts.kernel_tol * omega;
    let radius = 1.5 * omega / (opts.shifts + 1) as f64;
    let mut kernel_dim = 0usize;
    let mut candidates: Vec<C64> = Vec::new();
    for k in 1..=opts.shifts {
        for sign in [1.0, -1.0] {
            let sigma = sign * omega * k as f64 / (opts.shifts + 1) as f64;
            let lu = ham.shifted_band(sigma).factor();
            if lu.is_singular() {
                return Err(Error::Eigensolver(format!("shift {sigma} hits an eigenvalue exactly")));
            }
            let ritz = arnoldi_ritz(&lu, dim, opts.krylov_dim, &mut rng)?;
            let mut near_zero = 0;
            for theta in ritz {
                if theta.norm() < 1e-300 {
                    continue;
                }
                let mu = C64::new(sigma, 0.0) + ONE / theta;
                if (mu - sigma).norm() > radius || mu.re.abs() >= omega {
                    continue;
                }
                if mu.norm() < ktol {
                    near_zero += 1;
                } else {
                    candidates.push(mu);
                }
            }
            kernel_dim = kernel_dim.max(near_zero);
        }
    }

    let mut found: Vec<(C64, f64, Option<Vec<f64>>)> = Vec::new();
    for mu0 in candidates {
        let (value, residual, vector) = if mu0.im.abs() < 1e-9 * omega {
            match inverse_iteration(ham, mu0.re, &mut rng) {
                Some(r) => (C64::new(r.value, 0.0), r.residual, Some(r.vector)),
                None => continue,
            }
        } else {
            match inverse_iteration(ham, mu0, &mut rng) {
                Some(r) => (r.value, r.residual, None),
                None => continue,
            }
        };
        if residual > 1e-6 * omega || value.re.abs() >= omega || value.norm() < ktol {
            continue;
        }
        if found.iter().any(|(v, _, _)| (v - value).norm() < 1e-7 * omega) {
            continue;
        }
        found.push((value, residual, vector));
    }
    found.sort_by(|a, b| a.0.re.partial_cmp(&b.0.re).unwrap_or(core::cmp::Ordering::Equal));

    // internal mode: the smallest real positive eigenvalue; its mirror is the conjugate
    let real_tol = 1e-9 * omega;
    let lambda_idx = found.iter().position(|(v, _, _)| v.re > 0.0 && v.im.abs() < real_tol);
    let mut eigenvalues: Vec<GapEigenvalue> = Vec::new();
    let mut internal = None;
    let lambda = lambda_idx.map(|i| found[i].0.re);
    let mut conj_seen = false;
    for (i, (value, residual, vector)) in found.iter().enumerate() {
        let kind = if Some(i) == lambda_idx {
            internal = Some((value.re, vector.clone().unwrap_or_default()));
            EigenKind::InternalMode
        } else if let (Some(l), false) = (lambda, conj_seen) {
            if (value.re + l).abs() < 1e-6 * omega && value.im.abs() < real_tol {
                conj_seen = true;
                EigenKind::Conjugate
            } else {
                EigenKind::Extra
            }
        } else {
            EigenKind::Extra
        };
        eigenvalues.push(GapEigenvalue { value: *value, residual: *residual, kind });
    }
    let threshold_distance = eigenvalues.iter().map(|e| omega - e.value.re.abs()).fold(omega, f64::min);
    let near_threshold =
        eigenvalues.iter().filter(|e| omega - e.value.re.abs() < opts.threshold_tol * omega).map(|e| e.value).collect();
    Ok(SpectrumReport { omega, eigenvalues, kernel_dim, threshold_distance, near_threshold, internal })
}

/// Biorthogonal projection onto the continuous spectral subspace.
#[derive(Clone, Debug)]
pub struct Projection {
    grid: RadialGrid,
    /// `σ_3Φ, ∂_ωΦ, ξ, σ_1ξ`
    pub basis: [SpinorField; 4],
    /// `Φ, σ_3∂_ωΦ, σ_3ξ, σ_3σ_1ξ`
    pub duals: [SpinorField; 4],
    /// `gram[(i, j)] = ⟨basis_j, duals_i⟩`
    pub gram: Matrix4<f64>,
    gram_inv: Matrix4<f64>,
    pub condition: f64,
}

impl Projection {
    pub fn new(grid: &RadialGrid, basis: [SpinorField; 4], duals: [SpinorField; 4]) -> Result<Self> {
        let gram = Matrix4::from_fn(|i, j| bilinear(grid, &basis[j], &duals[i]).re);
        let sv = gram.singular_values();
        let smax = sv.iter().copied().fold(0.0, f64::max);
        let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(condition <= 1e8) {
            return Err(Error::IllConditioned { what: "dual Gram matrix".into(), condition });
        }
        let gram_inv = gram
            .try_inverse()
            .ok_or_else(|| Error::IllConditioned { what: "dual Gram matrix".into(), condition })?;
        Ok(Projection { grid: *grid, basis, duals, gram, gram_inv, condition })
    }

    /// Coefficients of `F` along the four discrete directions.
    pub fn coefficients(&self, f: &SpinorField) -> [C64; 4] {
        let d: [C64; 4] = core::array::from_fn(|i| bilinear(&self.grid, f, &self.duals[i]));
        let mut c = [ZERO; 4];
        for (j, cj) in c.iter_mut().enumerate() {
            for (i, di) in d.iter().enumerate() {
                *cj += di * self.gram_inv[(j, i)];
            }
        }
        c
    }

    /// `P_c F`.
    pub fn project(&self, f: &SpinorField) -> SpinorField {
        let c = self.coefficients(f);
        let mut out = f.clone();
        for (j, cj) in c.iter().enumerate() {
            out.axpy(-cj, &self.basis[j]);
        }
        out
    }

    /// `P_c^T G`, so that `⟨P_c F, G⟩ = ⟨F, P_c^T G⟩` in the bilinear pairing.
    pub fn project_transpose(&self, g: &SpinorField) -> SpinorField {
        let e = Vector4::from_fn(|j, _| bilinear(&self.grid, &self.basis[j], g));
        let mut out = g.clone();
        for i in 0..4 {
            let mut c = ZERO;
            for j in 0..4 {
                c += e[j] * self.gram_inv[(j, i)];
            }
            out.axpy(-c, &self.duals[i]);
        }
        out
    }
}

pub fn project_continuous(system: &LinearizedSystem, f: &SpinorField) -> Result<SpinorField> {
    system.grid().check_len(f.len())?;
    Ok(system.projection.project(f))
}

/// Everything downstream needs about `H_ω` at one frequency.
#[derive(Clone, Debug)]
pub struct LinearizedSystem {
    pub spec: Nonlinearity,
    pub ground: GroundState,
    pub hamiltonian: Hamiltonian,
    pub spectrum: SpectrumReport,
    pub lambda: f64,
    /// Real internal mode with `⟨ξ, σ_3ξ⟩ = 1`.
    pub xi: SpinorField,
    /// `⟨ξ, σ_3ξ⟩ / ⟨ξ, ξ⟩` before normalization.
    pub krein_ratio: f64,
    pub dlambda: f64,
    /// `∂_ωξ` with `⟨∂_ωξ, σ_3ξ⟩ = 0`.
    pub dxi: SpinorField,
    /// Resonance index, `Nλ < ω < (N+1)λ`.
    pub resonance: usize,
    pub phi: SpinorField,
    pub dphi: SpinorField,
    pub d2phi: SpinorField,
    pub projection: Projection,
}

/// `∂_ω H` as a pointwise matrix (the kinetic part does not depend on `ω`).
pub fn hamiltonian_derivative(spec: &Nonlinearity, phi: &[f64], dphi: &[f64]) -> MatrixField {
    let n = phi.len();
    let mut m = MatrixField::zeros(n);
    for j in 0..n {
        let s = phi[j] * phi[j];
        let ds = 2.0 * phi[j] * dphi[j];
        let b1 = spec.derivative(s, 1);
        let b2 = spec.derivative(s, 2);
        let dd = 1.0 - (2.0 * b1 + b2 * s) * ds;
        let dc = (b1 + b2 * s) * ds;
        m.a11[j] = dd;
        m.a12[j] = -dc;
        m.a21[j] = dc;
        m.a22[j] = -dd;
    }
    m
}

impl LinearizedSystem {
    pub fn build(spec: &Nonlinearity, ground: GroundState, opts: &SpectrumOptions) -> Result<Self> {
        let grid = ground.grid;
        let omega = ground.omega;
        let ham = Hamiltonian::assemble(spec, omega, &grid, &ground.phi)?;
        let spectrum = discrete_spectrum(&ham, opts)?;
        Self::from_spectrum(spec, ground, ham, spectrum, opts)
    }

    fn from_spectrum(
        spec: &Nonlinearity,
        ground: GroundState,
        ham: Hamiltonian,
        spectrum: SpectrumReport,
        opts: &SpectrumOptions,
    ) -> Result<Self> {
        let grid = ground.grid;
        let omega = ground.omega;
        let (lambda0, vec) = spectrum.internal.clone().ok_or(Error::NoInternalMode(omega))?;
        let mut xi = ham.from_v_real(&vec);
        let q = pair(&grid, &xi, &xi.sigma3()).re;
        let krein_ratio = q / pair(&grid, &xi, &xi).re;
        if krein_ratio <= 0.0 {
            return Err(Error::Eigensolver(format!(
                "internal mode at {lambda0} has nonpositive ⟨ξ, σ3ξ⟩ (ratio {krein_ratio:e})"
            )));
        }
        xi = xi.scale_re(1.0 / math::sqrt(q));
        let jmax = (0..xi.len()).max_by(|&a, &b| xi.a[a].norm().total_cmp(&xi.a[b].norm())).unwrap_or(0);
        if xi.a[jmax].re < 0.0 {
            xi = xi.scale_re(-1.0);
        }
        let lambda = bilinear(&grid, &ham.apply(&xi), &xi.sigma3()).re;

        let ratio = omega / lambda;
        let resonance = math::floor(ratio) as usize;
        let lo = omega - resonance as f64 * lambda;
        let hi = (resonance + 1) as f64 * lambda - omega;
        if resonance == 0 || lo.min(hi) <= opts.resonance_margin * omega {
            return Err(Error::ResonantRatio(ratio));
        }

        let dh = hamiltonian_derivative(spec, &ground.phi, &ground.dphi);
        let dhxi = dh.apply(&xi);
        let dlambda = bilinear(&grid, &dhxi, &xi.sigma3()).re;
        let mut rhs = xi.scale_re(dlambda).sub(&dhxi);
        // any component along ξ is removed afterwards
        let c = bilinear(&grid, &rhs, &xi.sigma3());
        rhs.axpy(-c, &xi);
        let dxi = derivative_solve(&ham, lambda, &rhs, &xi)?;

        let phi = SpinorField::from_real(&ground.phi, &ground.phi);
        let dphi = SpinorField::from_real(&ground.dphi, &ground.dphi);
        let d2phi = SpinorField::from_real(&ground.d2phi, &ground.d2phi);
        let s1xi = xi.sigma1();
        let projection = Projection::new(
            &grid,
            [phi.sigma3(), dphi.clone(), xi.clone(), s1xi.clone()],
            [phi.clone(), dphi.sigma3(), xi.sigma3(), s1xi.sigma3()],
        )?;
        Ok(LinearizedSystem {
            spec: *spec,
            ground,
            hamiltonian: ham,
            spectrum,
            lambda,
            xi,
            krein_ratio,
            dlambda,
            dxi,
            resonance,
            phi,
            dphi,
            d2phi,
            projection,
        })
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.ground.grid
    }
    pub fn omega(&self) -> f64 {
        self.ground.omega
    }
    pub fn dmass(&self) -> f64 {
        self.ground.dmass
    }

    /// `(‖Hσ_3Φ‖, ‖H∂_ωΦ + σ_3Φ‖)` relative to `‖Φ‖`.
    pub fn kernel_residuals(&self) -> (f64, f64) {
        let g = self.grid();
        let nphi = norm(g, &self.phi);
        let k = norm(g, &self.hamiltonian.apply(&self.phi.sigma3())) / nphi;
        let c = norm(g, &self.hamiltonian.apply(&self.dphi).add(&self.phi.sigma3())) / nphi;
        (k, c)
    }

    /// `‖Hξ - λξ‖ / ‖ξ‖`.
    pub fn mode_residual(&self) -> f64 {
        let g = self.grid();
        norm(g, &self.hamiltonian.apply(&self.xi).sub(&self.xi.scale_re(self.lambda))) / norm(g, &self.xi)
    }

    /// The system with `ξ → -ξ`.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        out.xi = self.xi.scale_re(-1.0);
        out.dxi = self.dxi.scale_re(-1.0);
        out.projection.basis[2] = out.xi.clone();
        out.projection.basis[3] = out.xi.sigma1();
        out.projection.duals[2] = out.xi.sigma3();
        out.projection.duals[3] = out.xi.sigma1().sigma3();
        out
    }

    /// Rebuilds at a nearby frequency: one ground-state step and a spectrum search
    /// restricted to the neighbourhood of the current `λ`.
    pub fn at_omega(&self, omega: f64, opts: &SpectrumOptions) -> Result<Self> {
        let ground = crate::ground_state::step_to(&self.spec, self.grid(), &self.ground, omega)?;
        let ham = Hamiltonian::assemble(&self.spec, omega, self.grid(), &ground.phi)?;
        let mut rng = XorShift::new(opts.seed);
        let guess = self.lambda + self.dlambda * (omega - self.omega());
        let r = inverse_iteration(&ham, guess, &mut rng)
            .ok_or_else(|| Error::Eigensolver("inverse iteration hit an exact eigenvalue".into()))?;
        if r.residual > 1e-6 * omega || (r.value - guess).abs() > 0.05 * omega {
            return Err(Error::Eigensolver(format!("internal mode lost while moving to omega = {omega}")));
        }
        // align with the previous mode before the sign convention is reapplied
        let mut vector = r.vector;
        let prev = ham.to_v(&self.xi.resized(ham.len()));
        let dot: f64 = vector.iter().zip(&prev).map(|(a, b)| a * b.re).sum();
        if dot < 0.0 {
            vector.iter_mut().for_each(|x| *x = -*x);
        }
        let spectrum = SpectrumReport {
            omega,
            eigenvalues: vec![GapEigenvalue { value: C64::new(r.value, 0.0), residual: r.residual, kind: EigenKind::InternalMode }],
            kernel_dim: self.spectrum.kernel_dim,
            threshold_distance: omega - r.value.abs(),
            near_threshold: Vec::new(),
            internal: Some((r.value, vector)),
        };
        Self::from_spectrum(&self.spec, ground, ham, spectrum, opts)
    }
}

/// Solves `(H - λ)η = rhs` on the complement of `ξ`, for `rhs` with no `σ_3ξ` component.
fn derivative_solve(ham: &Hamiltonian, lambda: f64, rhs: &SpinorField, xi: &SpinorField) -> Result<SpinorField> {
    let tau = 1e-5 * ham.omega();
    let b: Vec<f64> = ham.to_v(rhs).iter().map(|c| c.re).collect();
    let mut acc = vec![0.0; b.len()];
    for shift in [lambda + tau, lambda - tau] {
        let lu = ham.shifted_band(shift).factor();
        if lu.is_singular() {
            return Err(Error::ResolventSingular { mu: shift, distance: tau });
        }
        let x = lu.solve(&b);
        acc.iter_mut().zip(&x).for_each(|(a, y)| *a += 0.5 * y);
    }
    let mut eta = ham.from_v_real(&acc);
    let grid = *ham.grid();
    let c = bilinear(&grid, &eta, &xi.sigma3());
    eta.axpy(-c, xi);
    Ok(eta)
}

/// Human-readable one-line summary used by reports.
pub fn describe(report: &SpectrumReport) -> String {
    let vals: Vec<String> = report.eigenvalues.iter().map(|e| format!("{:.8}", e.value.re)).collect();
    format!("kernel dim {}, gap eigenvalues [{}]", report.kernel_dim, vals.join(", "))
}
