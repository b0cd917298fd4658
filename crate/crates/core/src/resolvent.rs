//! Resolvents of `H_ω`: direct solves in the spectral gap and the limiting absorption
//! values `R(μ + i0)` for `ω < μ < 3ω`.
//!
//! The outgoing value is computed two ways. `OutgoingBc` replaces the Dirichlet node at
//! `R` by the discrete outgoing wave on the open component and the discrete decaying
//! wave on the closed one. `EpsExtrapolation` solves at `μ + iε` on a Dirichlet grid long
//! enough for the damped wave to die out, for three values of `ε`, and extrapolates.
//! The long free exterior is eliminated by a backward sweep, which is the same linear
//! algebra as the long banded solve without storing it.

use alloc::vec;
use alloc::vec::Vec;

use crate::banded::BandMatrix;
use crate::linearization::{Hamiltonian, LinearizedSystem};
use crate::math;
use crate::model::{bilinear, norm, RadialGrid, SpinorField};
use crate::{Error, Result, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutgoingMethod {
    OutgoingBc,
    EpsExtrapolation,
}

#[derive(Clone, Copy, Debug)]
pub struct ResolventOptions {
    /// `ε_0 = eps_factor·(μ - ω)`.
    pub eps_factor: f64,
    /// The damped wave decays by `e^{-decay}` before the far Dirichlet wall.
    pub decay: f64,
    /// Gap solves refuse `μ` closer than `singular_tol·ω` to an eigenvalue.
    pub singular_tol: f64,
}

impl Default for ResolventOptions {
    fn default() -> Self {
        ResolventOptions { eps_factor: 0.05, decay: 23.0, singular_tol: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct OutgoingSolution {
    pub psi: SpinorField,
    pub method: OutgoingMethod,
    /// `(F(ε) - F(ε/2)) / (F(ε/2) - F(ε/4))` for `F = ⟨ψ_ε, g⟩`; close to 2 when the
    /// dependence on `ε` is first order.
    pub eps_ratio: Option<f64>,
    /// Distance of the far wall for the extrapolation method.
    pub far_radius: Option<f64>,
}

/// Solves `(H - μ)ψ = g` in the gap, refusing `μ` near any of `point_spectrum`.
pub fn solve_gap_with(
    ham: &Hamiltonian,
    point_spectrum: &[f64],
    mu: f64,
    g: &SpinorField,
    opts: &ResolventOptions,
) -> Result<SpinorField> {
    ham.grid().check_len(g.len())?;
    let omega = ham.omega();
    if mu.abs() >= omega {
        return Err(Error::InvalidParameter(alloc::format!("gap solve needs |mu| < omega, got mu = {mu}")));
    }
    let distance = point_spectrum.iter().map(|e| (e - mu).abs()).fold(f64::INFINITY, f64::min);
    if distance < opts.singular_tol * omega {
        return Err(Error::ResolventSingular { mu, distance });
    }
    let lu = ham.shifted_band(mu).factor();
    if lu.is_singular() {
        return Err(Error::ResolventSingular { mu, distance: 0.0 });
    }
    let solve = |rhs: &SpinorField| -> SpinorField {
        let b = ham.to_v(rhs);
        let re: Vec<f64> = b.iter().map(|c| c.re).collect();
        let im: Vec<f64> = b.iter().map(|c| c.im).collect();
        let xr = lu.solve(&re);
        let xi = lu.solve(&im);
        let x: Vec<C64> = xr.iter().zip(&xi).map(|(a, b)| C64::new(*a, *b)).collect();
        ham.from_v(&x)
    };
    let mut psi = solve(g);
    let ng = norm(ham.grid(), g);
    for _ in 0..2 {
        let res = g.sub(&ham.apply(&psi).sub(&psi.scale_re(mu)));
        if norm(ham.grid(), &res) <= 1e-12 * ng {
            break;
        }
        psi = psi.add(&solve(&res));
    }
    Ok(psi)
}

/// Gap resolvent of a linearized system; its point spectrum is `0, ±λ` and any extras.
pub fn solve_gap(system: &LinearizedSystem, mu: f64, g: &SpinorField) -> Result<SpinorField> {
    let mut spec = vec![0.0, system.lambda, -system.lambda];
    spec.extend(system.spectrum.extra().iter().filter(|e| e.im.abs() < 1e-9).map(|e| e.re));
    solve_gap_with(&system.hamiltonian, &spec, mu, g, &ResolventOptions::default())
}

/// `R(μ)g` restricted to the continuous subspace, for `g` in that subspace.
///
/// Away from the point spectrum this is [`solve_gap`] followed by `P_c`. At an eigenvalue
/// (the kernel, or `±λ`) the restricted resolvent is still regular: the solves at `μ ± τ`
/// are averaged, which cancels the simple pole, and `P_c` removes the kernel pollution.
pub fn solve_gap_continuous(system: &LinearizedSystem, mu: f64, g: &SpinorField) -> Result<SpinorField> {
    let omega = system.omega();
    let ham = &system.hamiltonian;
    let opts = ResolventOptions::default();
    let near = [0.0, system.lambda, -system.lambda].iter().any(|e| (e - mu).abs() < 1e-6 * omega);
    let psi = if near {
        let tau = 1e-4 * omega;
        let a = solve_gap_with(ham, &[], mu + tau, g, &opts)?;
        let b = solve_gap_with(ham, &[], mu - tau, g, &opts)?;
        a.add(&b).scale_re(0.5)
    } else {
        solve_gap(system, mu, g)?
    };
    Ok(system.projection.project(&psi))
}

/// `‖(H - μ)ψ - g‖ / ‖g‖`.
pub fn residual(ham: &Hamiltonian, mu: C64, psi: &SpinorField, g: &SpinorField) -> f64 {
    let r = ham.apply(psi).sub(&psi.scale(mu)).sub(g);
    norm(ham.grid(), &r) / norm(ham.grid(), g).max(f64::MIN_POSITIVE)
}

fn check_channel(omega: f64, mu: f64) -> Result<()> {
    if !(mu > omega && mu < 3.0 * omega) {
        return Err(Error::ChannelPrecondition { mu, omega });
    }
    Ok(())
}

/// Centrifugal coefficient `s(s-1)` of the far-field radial operator in `v`.
fn centrifugal(grid: &RadialGrid) -> f64 {
    let s = grid.sym_exponent();
    s * (s - 1.0)
}

/// Discrete open-channel wavenumber at the outer boundary, `cos(k h) = 1 - (μ-ω-c/R²)h²/2`.
pub fn discrete_wavenumber(grid: &RadialGrid, omega: f64, mu: f64) -> f64 {
    let h = grid.h();
    let r = grid.radius();
    let e = mu - omega - centrifugal(grid) / (r * r);
    math::acos((1.0 - e * h * h / 2.0).clamp(-1.0, 1.0)) / h
}

fn solve_complex_band(m: BandMatrix<C64>, b: &[C64]) -> Result<Vec<C64>> {
    let lu = m.factor();
    if lu.is_singular() {
        return Err(Error::Eigensolver("singular outgoing system".into()));
    }
    Ok(lu.solve(b))
}

fn outgoing_bc(ham: &Hamiltonian, mu: f64, g: &SpinorField) -> Result<SpinorField> {
    let grid = *ham.grid();
    let n = ham.len();
    let h = grid.h();
    let r = grid.radius();
    let c = centrifugal(&grid) / (r * r);
    let omega = ham.omega();
    let kh = discrete_wavenumber(&grid, omega, mu) * h;
    let kappa_h = math::acosh(1.0 + (mu + omega + c) * h * h / 2.0);
    let bnd = ham.kinetic().boundary;
    let mut m = ham.shifted_band(C64::new(mu, 0.0));
    let (p, q) = (2 * (n - 1), 2 * (n - 1) + 1);
    m.add_to(p, p, C64::new(math::cos(kh), math::sin(kh)) * bnd);
    m.add_to(q, q, C64::new(-bnd * math::exp(-kappa_h), 0.0));
    let x = solve_complex_band(m, &ham.to_v(g))?;
    Ok(ham.from_v(&x))
}

/// `R(μ + iε)g` with a Dirichlet wall at `far_radius`; the zero-potential exterior beyond
/// the grid of `ham` is eliminated by a backward sweep.
pub fn damped_resolvent(ham: &Hamiltonian, mu: C64, g: &SpinorField, far_radius: f64) -> Result<SpinorField> {
    let grid = *ham.grid();
    let n = ham.len();
    let far = grid.with_radius(far_radius.max(grid.radius()))?;
    let kin = far.kinetic();
    let nf = far.len();
    let omega = ham.omega();
    // ratios v_{j+1}/v_j at the interface, open (+) and closed (-) component
    let sweep = |sign: f64| -> C64 {
        let mut rho = C64::new(0.0, 0.0);
        for j in (n..nf).rev() {
            let d = C64::new(kin.diag[j] + omega, 0.0) - mu * sign;
            let next = if j + 1 < nf { kin.off[j] } else { 0.0 };
            rho = C64::new(-kin.off[j - 1], 0.0) / (d + rho * next);
        }
        rho
    };
    let mut m = ham.shifted_band(mu);
    if nf > n {
        let (p, q) = (2 * (n - 1), 2 * (n - 1) + 1);
        let o = kin.off[n - 1];
        m.add_to(p, p, sweep(1.0) * o);
        m.add_to(q, q, -(sweep(-1.0) * o));
    }
    let x = solve_complex_band(m, &ham.to_v(g))?;
    Ok(ham.from_v(&x))
}

fn eps_extrapolation(ham: &Hamiltonian, mu: f64, g: &SpinorField, opts: &ResolventOptions) -> Result<OutgoingSolution> {
    let omega = ham.omega();
    let eps0 = opts.eps_factor * (mu - omega);
    let eps_min = eps0 / 4.0;
    let k = C64::new(mu - omega, eps_min).sqrt();
    let far = ham.grid().radius() + opts.decay / k.im;
    let sols: Vec<SpinorField> = [eps0, eps0 / 2.0, eps0 / 4.0]
        .iter()
        .map(|e| damped_resolvent(ham, C64::new(mu, *e), g, far))
        .collect::<Result<_>>()?;
    // F(0) = (8F(ε/4) - 6F(ε/2) + F(ε)) / 3 for F quadratic in ε
    let mut psi = sols[2].scale_re(8.0 / 3.0);
    psi.axpy(C64::new(-2.0, 0.0), &sols[1]);
    psi.axpy(C64::new(1.0 / 3.0, 0.0), &sols[0]);
    let f: Vec<C64> = sols.iter().map(|s| bilinear(ham.grid(), s, g)).collect();
    let d2 = f[1] - f[2];
    let ratio = if d2.norm() > 0.0 { Some((f[0] - f[1]).norm() / d2.norm()) } else { None };
    Ok(OutgoingSolution { psi, method: OutgoingMethod::EpsExtrapolation, eps_ratio: ratio, far_radius: Some(far) })
}

/// `R(μ + i0)g` for `ω < μ < 3ω`.
pub fn solve_outgoing(
    ham: &Hamiltonian,
    mu: f64,
    g: &SpinorField,
    method: OutgoingMethod,
    opts: &ResolventOptions,
) -> Result<OutgoingSolution> {
    ham.grid().check_len(g.len())?;
    check_channel(ham.omega(), mu)?;
    match method {
        OutgoingMethod::OutgoingBc => Ok(OutgoingSolution {
            psi: outgoing_bc(ham, mu, g)?,
            method,
            eps_ratio: None,
            far_radius: None,
        }),
        OutgoingMethod::EpsExtrapolation => eps_extrapolation(ham, mu, g, opts),
    }
}

/// Energy-normalized real generalized eigenfunction at `μ > ω`, so that
/// `Im R(μ+i0) = π ψ ⟨·, σ_3ψ⟩` on localized data.
///
/// The open component is matched to `A sin(k r) + B cos(k r)` over the outer third of
/// the grid; this is exact for `d = 3` and accurate to `O(1/(kR)²)` otherwise.
pub fn generalized_eigenfunction(ham: &Hamiltonian, mu: f64) -> Result<SpinorField> {
    check_channel(ham.omega(), mu)?;
    let grid = *ham.grid();
    let n = ham.len();
    let bnd = ham.kinetic().boundary;
    let m = ham.shifted_band(mu);
    let mut rhs = vec![0.0; 2 * n];
    // v_1(R) = 1 through the boundary coupling
    rhs[2 * (n - 1)] = -bnd;
    let lu = m.factor();
    if lu.is_singular() {
        return Err(Error::ResolventSingular { mu, distance: 0.0 });
    }
    let x = lu.solve(&rhs);
    let k = discrete_wavenumber(&grid, ham.omega(), mu);
    let h = grid.h();
    let start = 2 * n / 3;
    let (mut ss, mut sc, mut cc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for j in start..n {
        let (s, c) = (math::sin(k * grid.r(j)), math::cos(k * grid.r(j)));
        let y = x[2 * j];
        ss += s * s;
        sc += s * c;
        cc += c * c;
        ys += y * s;
        yc += y * c;
    }
    let det = ss * cc - sc * sc;
    let a = (ys * cc - yc * sc) / det;
    let b = (yc * ss - ys * sc) / det;
    let amp = math::sqrt(a * a + b * b);
    let dmu_dk = 2.0 * math::sin(k * h) / h;
    let target = math::sqrt(2.0 / (math::PI * grid.sphere() * dmu_dk));
    let x: Vec<f64> = x.iter().map(|v| v * target / amp).collect();
    Ok(ham.from_v_real(&x))
}

/// `π ⟨g, σ_3ψ⟩⟨ψ, w⟩`, the `δ`-function part of `⟨R(μ+i0)g, w⟩`.
pub fn delta_form(ham: &Hamiltonian, mu: f64, g: &SpinorField, w: &SpinorField) -> Result<f64> {
    let psi = generalized_eigenfunction(ham, mu)?;
    let grid = ham.grid();
    let a = bilinear(grid, g, &psi.sigma3());
    let b = bilinear(grid, &psi, w);
    Ok(math::PI * (a * b).re)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::XorShift;

    fn gaussian(grid: &RadialGrid, a: f64, b: f64) -> SpinorField {
        let n = grid.len();
        let mut f = SpinorField::zeros(n);
        for j in 0..n {
            let r = grid.r(j);
            f.a[j] = C64::new(math::exp(-r * r), 0.0) * a;
            f.b[j] = C64::new(math::exp(-r * r / 2.0), 0.0) * b;
        }
        f
    }

    /// `∫∫ w(r) sin(k r_<) e^{ik r_>}/k w(r') dr dr'` for `w = r e^{-r²}`, by a fine
    /// midpoint rule independent of the grid.
    fn free_kernel_observable(k: f64) -> C64 {
        let m = 4000;
        let dr = 8.0 / m as f64;
        let xs: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) * dr).collect();
        let w: Vec<f64> = xs.iter().map(|r| r * math::exp(-r * r)).collect();
        // split e^{ik r_>} sin(k r_<) into cumulative sums
        let mut acc = C64::new(0.0, 0.0);
        let mut inner_sin = 0.0;
        for i in 0..m {
            let r = xs[i];
            let e = C64::new(math::cos(k * r), math::sin(k * r));
            // pairs with r' < r, and the diagonal with half weight
            let diag = w[i] * math::sin(k * r) * dr * 0.5;
            acc += e * w[i] * dr * (inner_sin + diag) * 2.0;
            inner_sin += w[i] * math::sin(k * r) * dr;
        }
        acc / k
    }

    #[test]
    fn free_outgoing_matches_closed_form() {
        let grid = RadialGrid::new(3, 40.0, 4000).unwrap();
        let omega = 1.0;
        let ham = Hamiltonian::free(&grid, omega);
        let mu = 1.6;
        let g = gaussian(&grid, 1.0, 0.0);
        let k = math::sqrt(mu - omega);
        let want = free_kernel_observable(k) * (4.0 * math::PI);
        for method in [OutgoingMethod::OutgoingBc, OutgoingMethod::EpsExtrapolation] {
            let sol = solve_outgoing(&ham, mu, &g, method, &ResolventOptions::default()).unwrap();
            let got = bilinear(&grid, &sol.psi, &g);
            let err = (got - want).norm() / want.norm();
            assert!(err < 1e-4, "{method:?}: {got} vs {want}, err {err}");
            if let Some(ratio) = sol.eps_ratio {
                assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
            }
        }
        // residual of the outgoing-bc solve away from the boundary row
        let sol = solve_outgoing(&ham, mu, &g, OutgoingMethod::OutgoingBc, &ResolventOptions::default()).unwrap();
        let tail: Vec<f64> = (3 * grid.len() / 4..grid.len()).map(|j| (sol.psi.a[j] * grid.r(j)).norm()).collect();
        let (lo, hi) = tail.iter().fold((f64::INFINITY, 0.0f64), |(a, b), x| (a.min(*x), b.max(*x)));
        assert!((hi - lo) / hi < 0.02);
    }

    #[test]
    fn free_delta_form_is_imaginary_part() {
        let grid = RadialGrid::new(3, 40.0, 4000).unwrap();
        let ham = Hamiltonian::free(&grid, 1.0);
        let g = gaussian(&grid, 1.0, 0.3);
        for mu in [1.3, 2.0, 2.7] {
            let sol = solve_outgoing(&ham, mu, &g, OutgoingMethod::OutgoingBc, &ResolventOptions::default()).unwrap();
            let im = bilinear(&grid, &sol.psi, &g.sigma3()).im;
            let d = delta_form(&ham, mu, &g, &g.sigma3()).unwrap();
            assert!((im - d).abs() < 1e-6 * im.abs(), "{im} {d}");
            assert!(im > 0.0);
        }
    }

    #[test]
    fn channel_and_singular_errors() {
        let grid = RadialGrid::new(3, 20.0, 400).unwrap();
        let ham = Hamiltonian::free(&grid, 1.0);
        let g = gaussian(&grid, 1.0, 1.0);
        for mu in [0.5, 1.0, 3.0, 3.5] {
            let e = solve_outgoing(&ham, mu, &g, OutgoingMethod::OutgoingBc, &ResolventOptions::default()).unwrap_err();
            assert!(matches!(e, Error::ChannelPrecondition { .. }));
        }
        let e = solve_gap_with(&ham, &[0.0], 0.0, &g, &ResolventOptions::default()).unwrap_err();
        assert!(matches!(e, Error::ResolventSingular { .. }));
        let z = solve_gap_with(&ham, &[], 0.2, &SpinorField::zeros(grid.len()), &ResolventOptions::default()).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn free_gap_solve_residual_and_realness() {
        let grid = RadialGrid::new(3, 20.0, 800).unwrap();
        let ham = Hamiltonian::free(&grid, 1.0);
        let mut rng = XorShift::new(9);
        for _ in 0..5 {
            let mu = 0.9 * rng.uniform();
            let g = gaussian(&grid, rng.uniform(), rng.uniform());
            let psi = solve_gap_with(&ham, &[], mu, &g, &ResolventOptions::default()).unwrap();
            assert!(residual(&ham, C64::new(mu, 0.0), &psi, &g) <= 1e-10);
            assert!(psi.max_imag() <= 1e-12 * psi.max_abs());
        }
    }
}
