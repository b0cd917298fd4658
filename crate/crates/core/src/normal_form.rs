//! Normal-form sources `Φ_{m,n}` and correctors `Ψ_{m,n}`, and the dual vectors of the
//! modulation equations.
//!
//! The modulation system is solved as a formal power series in `(z, z̄)` whose
//! coefficients are affine in the dispersive remainder `g`: a scalar polynomial plus
//! spinor duals `D_{m,n}` contributing `z^m z̄^n ⟨g, D_{m,n}⟩`. The unknowns are
//! `X_1 = iω̇`, `X_2 = γ̇` and `Y = iż - λz`, and the rows are
//!
//! ```text
//! (M' - ⟨R,∂Φ⟩) X_1 - ⟨R,σ3Φ⟩ X_2            = ⟨𝒩, Φ⟩
//! -⟨R,σ3∂²Φ⟩ X_1 - (M' + ⟨R,∂Φ⟩) X_2         = ⟨𝒩, σ3∂Φ⟩
//! -⟨R,σ3∂ξ⟩ X_1 - ⟨R,ξ⟩ X_2 + Y              = ⟨𝒩, σ3ξ⟩
//! ```
//!
//! with `M' = dM/dω`, `∂ = ∂_ω` and `R = zξ + z̄σ1ξ + Σ Ψ_{m,n} z^m z̄^n + g`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::linearization::LinearizedSystem;
use crate::math;
use crate::model::{
    bilinear, nonlinear_remainder, norm, taylor_nonlinearity_with, RadialGrid, SpinorField, TaylorCoefficients,
    MAX_TAYLOR_ORDER,
};
use crate::resolvent::{solve_gap_continuous, solve_outgoing, OutgoingMethod, ResolventOptions};
use crate::{Error, Result, C64};

type Key = (u32, u32);

fn zpow(z: C64, m: u32, n: u32) -> C64 {
    z.powu(m) * z.conj().powu(n)
}

/// Truncated series in `(z, z̄)`, affine in `g`.
#[derive(Clone, Debug)]
pub struct Affine {
    scalar_degree: usize,
    dual_degree: usize,
    pub scalar: BTreeMap<Key, C64>,
    pub duals: BTreeMap<Key, SpinorField>,
}

impl Affine {
    pub fn zero(scalar_degree: usize, dual_degree: usize) -> Self {
        Affine { scalar_degree, dual_degree, scalar: BTreeMap::new(), duals: BTreeMap::new() }
    }

    fn add_scalar(&mut self, k: Key, c: C64) {
        if (k.0 + k.1) as usize <= self.scalar_degree && c != C64::new(0.0, 0.0) {
            *self.scalar.entry(k).or_insert(C64::new(0.0, 0.0)) += c;
        }
    }

    fn add_dual(&mut self, k: Key, c: C64, d: &SpinorField) {
        if (k.0 + k.1) as usize > self.dual_degree {
            return;
        }
        match self.duals.get_mut(&k) {
            Some(e) => e.axpy(c, d),
            None => {
                self.duals.insert(k, d.scale(c));
            }
        }
    }

    pub fn scalar_at(&self, m: u32, n: u32) -> C64 {
        self.scalar.get(&(m, n)).copied().unwrap_or(C64::new(0.0, 0.0))
    }

    pub fn dual_at(&self, m: u32, n: u32) -> Option<&SpinorField> {
        self.duals.get(&(m, n))
    }

    pub fn plus(&self, o: &Affine, c: C64) -> Affine {
        let mut out = self.clone();
        for (k, v) in &o.scalar {
            out.add_scalar(*k, c * v);
        }
        for (k, d) in &o.duals {
            out.add_dual(*k, c, d);
        }
        out
    }

    pub fn scaled(&self, c: C64) -> Affine {
        Affine::zero(self.scalar_degree, self.dual_degree).plus(self, c)
    }

    /// Product, dropping terms quadratic in `g`.
    pub fn times(&self, o: &Affine) -> Affine {
        let mut out = Affine::zero(self.scalar_degree.min(o.scalar_degree), self.dual_degree.min(o.dual_degree));
        for (a, x) in &self.scalar {
            for (b, y) in &o.scalar {
                out.add_scalar((a.0 + b.0, a.1 + b.1), x * y);
            }
            for (b, d) in &o.duals {
                out.add_dual((a.0 + b.0, a.1 + b.1), *x, d);
            }
        }
        for (a, d) in &self.duals {
            for (b, y) in &o.scalar {
                out.add_dual((a.0 + b.0, a.1 + b.1), *y, d);
            }
        }
        out
    }

    pub fn eval_scalar(&self, z: C64) -> C64 {
        self.scalar.iter().map(|((m, n), c)| c * zpow(z, *m, *n)).sum()
    }

    /// `Σ z^m z̄^n ⟨g, D_{m,n}⟩`.
    pub fn eval_dual(&self, grid: &RadialGrid, z: C64, g: &SpinorField) -> C64 {
        self.duals.iter().map(|((m, n), d)| zpow(z, *m, *n) * bilinear(grid, g, d)).sum()
    }

    /// Conjugate series, `conj(F(z, z̄))` with `g` held real-symmetric: scalar coefficients
    /// move to the swapped monomials.
    fn conj_scalar(&self) -> BTreeMap<Key, C64> {
        self.scalar.iter().map(|((m, n), c)| ((*n, *m), c.conj())).collect()
    }

    fn map_duals(&mut self, f: impl Fn(&SpinorField) -> SpinorField) {
        for d in self.duals.values_mut() {
            *d = f(d);
        }
    }
}

/// `iω̇`, `γ̇` and `iż - λz` as series (`p, q, r` polynomials in `z, z̄` with duals
/// `α, β, γ`). All duals are transposed projections, so they may be paired with any
/// `g` in the continuous subspace.
#[derive(Clone, Debug)]
pub struct ModulationExpansion {
    pub x1: Affine,
    pub x2: Affine,
    pub y: Affine,
    pub taylor: TaylorCoefficients,
}

fn taylor_affine(t: &TaylorCoefficients, grid: &RadialGrid, g: &SpinorField, sd: usize, dd: usize) -> Affine {
    let mut out = Affine::zero(sd, dd);
    for ((m, n), l) in &t.lambda {
        out.add_scalar((*m, *n), bilinear(grid, l, g));
    }
    for ((m, n), a) in &t.a {
        if (*m + *n) as usize <= dd {
            out.add_dual((*m, *n), C64::new(1.0, 0.0), &a.apply_transpose(g));
        }
    }
    out
}

fn pair_r(system: &LinearizedSystem, extra: &[(Key, SpinorField)], g: &SpinorField, sd: usize, dd: usize) -> Affine {
    let grid = system.grid();
    let mut out = Affine::zero(sd, dd);
    out.add_scalar((1, 0), bilinear(grid, &system.xi, g));
    out.add_scalar((0, 1), bilinear(grid, &system.xi.sigma1(), g));
    for (k, p) in extra {
        out.add_scalar(*k, bilinear(grid, p, g));
    }
    out.add_dual((0, 0), C64::new(1.0, 0.0), g);
    out
}

/// Solves the modulation system as a series with scalar degree `sd` and dual degree `dd`,
/// around `R = zξ + z̄σ1ξ + Σ extra + g`.
pub fn modulation_expansion(
    system: &LinearizedSystem,
    extra: &[(Key, SpinorField)],
    sd: usize,
    dd: usize,
) -> Result<ModulationExpansion> {
    if dd >= sd {
        return Err(Error::InvalidParameter("dual degree must be below the scalar degree".into()));
    }
    let grid = system.grid();
    let mp = system.dmass();
    if !(mp.abs() > 1e-12 * system.ground.mass) {
        return Err(Error::IllConditioned { what: "modulation matrix (dM/domega = 0)".into(), condition: f64::INFINITY });
    }
    let taylor = taylor_nonlinearity_with(&system.spec, &system.ground.phi, &system.xi, extra, sd.min(MAX_TAYLOR_ORDER))?;
    let phi = &system.phi;
    let dphi = &system.dphi;
    let n_phi = taylor_affine(&taylor, grid, phi, sd, dd);
    let n_dphi = taylor_affine(&taylor, grid, &dphi.sigma3(), sd, dd);
    let n_xi = taylor_affine(&taylor, grid, &system.xi.sigma3(), sd, dd);
    let r_dphi = pair_r(system, extra, dphi, sd, dd);
    let r_s3phi = pair_r(system, extra, &phi.sigma3(), sd, dd);
    let r_s3d2phi = pair_r(system, extra, &system.d2phi.sigma3(), sd, dd);
    let r_s3dxi = pair_r(system, extra, &system.dxi.sigma3(), sd, dd);
    let r_xi = pair_r(system, extra, &system.xi, sd, dd);

    let inv = C64::new(1.0 / mp, 0.0);
    let one = C64::new(1.0, 0.0);
    let mut x1 = Affine::zero(sd, dd);
    let mut x2 = Affine::zero(sd, dd);
    let mut y = Affine::zero(sd, dd);
    for _ in 0..sd {
        let nx1 = n_phi.plus(&r_dphi.times(&x1), one).plus(&r_s3phi.times(&x2), one).scaled(inv);
        let nx2 = n_dphi.plus(&r_s3d2phi.times(&x1), one).plus(&r_dphi.times(&x2), one).scaled(-inv);
        let ny = n_xi.plus(&r_s3dxi.times(&x1), one).plus(&r_xi.times(&x2), one);
        x1 = nx1;
        x2 = nx2;
        y = ny;
    }
    let pr = &system.projection;
    for a in [&mut x1, &mut x2, &mut y] {
        a.map_duals(|d| pr.project_transpose(d));
    }
    Ok(ModulationExpansion { x1, x2, y, taylor })
}

/// Duals of the modulation equations up to degree `n` with the level-one correctors
/// substituted (needed from `n = 2` on).
pub fn build_ode_duals(system: &LinearizedSystem, package: &NormalFormPackage) -> Result<ModulationExpansion> {
    let n = package.resonance;
    modulation_expansion(system, &package.substituted(), 2 * n + 1, n)
}

/// `(iω̇, γ̇, iż - λz)` from the exact nonlinearity at `R = zξ + z̄σ1ξ + f`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModulationRhs {
    pub x1: C64,
    pub x2: C64,
    pub y: C64,
}

pub fn modulation_rhs(system: &LinearizedSystem, z: C64, f: &SpinorField) -> Result<ModulationRhs> {
    let grid = system.grid();
    grid.check_len(f.len())?;
    let mut r = system.xi.scale(z);
    r.axpy(z.conj(), &system.xi.sigma1());
    r.axpy(C64::new(1.0, 0.0), f);
    let nl = nonlinear_remainder(&system.spec, &system.ground.phi, &r.a);
    let p = |a: &SpinorField, b: &SpinorField| bilinear(grid, a, b);
    let mp = C64::new(system.dmass(), 0.0);
    let phi = &system.phi;
    let dphi = &system.dphi;
    let rd = p(&r, dphi);
    let a = [
        [mp - rd, -p(&r, &phi.sigma3())],
        [-p(&r, &system.d2phi.sigma3()), -(mp + rd)],
    ];
    let b = [p(&nl, phi), p(&nl, &dphi.sigma3())];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.norm() < 1e-14 * mp.norm() * mp.norm() {
        return Err(Error::IllConditioned { what: "modulation matrix".into(), condition: f64::INFINITY });
    }
    let x1 = (b[0] * a[1][1] - a[0][1] * b[1]) / det;
    let x2 = (a[0][0] * b[1] - a[1][0] * b[0]) / det;
    let y = p(&nl, &system.xi.sigma3()) + p(&r, &system.dxi.sigma3()) * x1 + p(&r, &system.xi) * x2;
    Ok(ModulationRhs { x1, x2, y })
}

#[derive(Clone, Copy, Debug)]
pub struct NormalFormOptions {
    pub method: OutgoingMethod,
    /// Outer radius of the continuum grid used for the resonant solve.
    pub continuum_radius: f64,
    pub resolvent: ResolventOptions,
    /// Refuse `(m-n)λ` within `resonance_tol·ω` of `±λ`.
    pub resonance_tol: f64,
}

impl Default for NormalFormOptions {
    fn default() -> Self {
        NormalFormOptions {
            method: OutgoingMethod::OutgoingBc,
            continuum_radius: 80.0,
            resolvent: ResolventOptions::default(),
            resonance_tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Level {
    pub k: usize,
    /// `Φ^{(k)}_{m,n}` for `m+n = k+1`.
    pub sources: Vec<(Key, SpinorField)>,
    /// `Ψ^{(k)}_{m,n}` for the non-resonant levels.
    pub correctors: Vec<(Key, SpinorField)>,
}

#[derive(Clone, Debug)]
pub struct NormalFormPackage {
    pub resonance: usize,
    pub mu: f64,
    pub levels: Vec<Level>,
    /// `Φ^{(N)}_{N+1,0}`.
    pub resonant_source: SpinorField,
    /// `Ψ^{(N)}_{N+1,0} = -R(μ+i0)Φ^{(N)}_{N+1,0}` restricted to the system grid.
    pub resonant_corrector: SpinorField,
    /// `σ_1 conj Ψ^{(N)}_{N+1,0}`.
    pub resonant_conjugate: SpinorField,
    /// The same corrector on the full continuum grid.
    pub resonant_corrector_full: SpinorField,
    pub continuum_grid: RadialGrid,
    pub method: OutgoingMethod,
    pub eps_ratio: Option<f64>,
    /// Modulation series with duals up to degree `N`.
    pub expansion: ModulationExpansion,
    /// `γ^{(N)}_{0,N}`.
    pub resonant_dual: SpinorField,
}

impl NormalFormPackage {
    /// Non-resonant correctors, which enter `R` in the modulation expansion.
    pub fn substituted(&self) -> Vec<(Key, SpinorField)> {
        self.levels.iter().flat_map(|l| l.correctors.iter().cloned()).collect()
    }

    pub fn source(&self, k: usize, m: u32, n: u32) -> Option<&SpinorField> {
        self.levels.get(k.checked_sub(1)?)?.sources.iter().find(|(key, _)| *key == (m, n)).map(|(_, f)| f)
    }

    /// `α_{m,n}`, `β_{m,n}`, `γ_{m,n}` duals of `iω̇`, `γ̇`, `iż - λz`.
    pub fn ode_duals(&self) -> (&BTreeMap<Key, SpinorField>, &BTreeMap<Key, SpinorField>, &BTreeMap<Key, SpinorField>) {
        (&self.expansion.x1.duals, &self.expansion.x2.duals, &self.expansion.y.duals)
    }
}

/// Coefficients at total degree `d` of the forcing of the `f` equation with the
/// correctors `extra` substituted, before any further normal-form step.
fn forcing_coefficients(system: &LinearizedSystem, exp: &ModulationExpansion, extra: &[(Key, SpinorField)], d: u32) -> Vec<(Key, SpinorField)> {
    let x1 = &exp.x1;
    let x2 = &exp.x2;
    let y = &exp.y;
    let ybar = y.conj_scalar();
    let xi = &system.xi;
    let s1xi = xi.sigma1();
    let dxi = &system.dxi;
    let s1dxi = dxi.sigma1();
    let mut out = Vec::new();
    for nn in 0..=d {
        let m = d - nn;
        let mut f = exp.taylor.lambda(m, nn).cloned().unwrap_or_else(|| SpinorField::zeros(xi.len()));
        if m >= 1 {
            f.axpy(x2.scalar_at(m - 1, nn), &xi.sigma3());
            f.axpy(-x1.scalar_at(m - 1, nn), dxi);
        }
        if nn >= 1 {
            f.axpy(x2.scalar_at(m, nn - 1), &s1xi.sigma3());
            f.axpy(-x1.scalar_at(m, nn - 1), &s1dxi);
        }
        for ((p, q), psi) in extra {
            // γ̇ σ3 Ψ z^p z̄^q
            if *p <= m && *q <= nn {
                f.axpy(x2.scalar_at(m - p, nn - q), &psi.sigma3());
            }
            // -Ψ (p z^{p-1} z̄^q Y - q z^p z̄^{q-1} Ȳ)
            if *p >= 1 && p - 1 <= m && *q <= nn {
                f.axpy(-y.scalar_at(m + 1 - p, nn - q) * (*p as f64), psi);
            }
            if *q >= 1 && *p <= m && q - 1 <= nn {
                let c = ybar.get(&(m - p, nn + 1 - q)).copied().unwrap_or(C64::new(0.0, 0.0));
                f.axpy(c * (*q as f64), psi);
            }
        }
        out.push(((m, nn), system.projection.project(&f)));
    }
    out
}

/// Sources and correctors up to the resonant level `N` (`N = 1, 2` supported).
pub fn build_sources(system: &LinearizedSystem, n: usize, opts: &NormalFormOptions) -> Result<NormalFormPackage> {
    let omega = system.omega();
    let lambda = system.lambda;
    let mu = (n + 1) as f64 * lambda;
    if !(mu > omega) {
        return Err(Error::ChannelPrecondition { mu, omega });
    }
    if !(1..=2).contains(&n) {
        return Err(Error::OrderTooHigh { order: n, max: 2 });
    }
    let mut levels: Vec<Level> = Vec::new();
    let mut extra: Vec<(Key, SpinorField)> = Vec::new();
    for k in 1..=n {
        let exp = modulation_expansion(system, &extra, k + 1, 0)?;
        let sources = forcing_coefficients(system, &exp, &extra, (k + 1) as u32);
        let mut correctors = Vec::new();
        if k < n {
            for ((m, nn), src) in &sources {
                let shift = (*m as f64 - *nn as f64) * lambda;
                for e in [lambda, -lambda] {
                    let distance = (shift - e).abs();
                    if distance < opts.resonance_tol * omega {
                        return Err(Error::NearResonance { m: *m, n: *nn, distance });
                    }
                }
                let psi = solve_gap_continuous(system, shift, src)?.scale_re(-1.0);
                correctors.push(((*m, *nn), psi));
            }
            extra.extend(correctors.iter().cloned());
        }
        levels.push(Level { k, sources, correctors });
    }
    let top = levels.last().ok_or_else(|| Error::InvalidParameter("empty normal form".into()))?;
    let resonant_source =
        top.sources.iter().find(|(key, _)| *key == ((n + 1) as u32, 0)).map(|(_, f)| f.clone())
        .ok_or_else(|| Error::InvalidParameter("missing resonant source".into()))?;

    let grid = *system.grid();
    let cgrid = grid.with_radius(opts.continuum_radius.max(grid.radius()))?;
    let ham = system.hamiltonian.extended(&cgrid)?;
    let sol = solve_outgoing(&ham, mu, &resonant_source.resized(cgrid.len()), opts.method, &opts.resolvent)?;
    let full = sol.psi.scale_re(-1.0);
    let resonant_corrector = full.resized(grid.len());
    let resonant_conjugate = resonant_corrector.conj().sigma1();

    let expansion = modulation_expansion(system, &extra, 2 * n + 1, n)?;
    let resonant_dual = expansion.y.dual_at(0, n as u32).cloned().unwrap_or_else(|| SpinorField::zeros(grid.len()));
    Ok(NormalFormPackage {
        resonance: n,
        mu,
        levels,
        resonant_source,
        resonant_corrector,
        resonant_conjugate,
        resonant_corrector_full: full,
        continuum_grid: cgrid,
        method: opts.method,
        eps_ratio: sol.eps_ratio,
        expansion,
        resonant_dual,
    })
}

/// Residual of the `f` equation at `f = Σ Ψ_{m,n} z^m z̄^n` (with `H Ψ` replaced by
/// `(m-n)λΨ - Φ`), using the exact nonlinearity and the exact modulation speeds.
/// `terms` lists `(key, Ψ, Φ)`.
pub fn forcing_residual(system: &LinearizedSystem, terms: &[(Key, SpinorField, SpinorField)], z: C64) -> Result<SpinorField> {
    let n = system.xi.len();
    let lambda = system.lambda;
    let mut f = SpinorField::zeros(n);
    for ((m, nn), psi, _) in terms {
        f.axpy(zpow(z, *m, *nn), psi);
    }
    let rhs = modulation_rhs(system, z, &f)?;
    let mut r = system.xi.scale(z);
    r.axpy(z.conj(), &system.xi.sigma1());
    r.axpy(C64::new(1.0, 0.0), &f);
    let nl = nonlinear_remainder(&system.spec, &system.ground.phi, &r.a);
    let mut inner = nl;
    inner.axpy(rhs.x2, &f.sigma3());
    inner.axpy(rhs.x2 * z, &system.xi.sigma3());
    inner.axpy(rhs.x2 * z.conj(), &system.xi.sigma1().sigma3());
    inner.axpy(-rhs.x1 * z, &system.dxi);
    inner.axpy(-rhs.x1 * z.conj(), &system.dxi.sigma1());
    let mut res = system.projection.project(&inner);
    let izdot = C64::new(lambda, 0.0) * z + rhs.y;
    let izbar_dot = -izdot.conj();
    for ((m, nn), psi, phi) in terms {
        let zm = zpow(z, *m, *nn);
        let shift = (*m as f64 - *nn as f64) * lambda;
        res.axpy(zm * shift, psi);
        res.axpy(-zm, phi);
        let mut d = C64::new(0.0, 0.0);
        if *m >= 1 {
            d += zpow(z, m - 1, *nn) * izdot * (*m as f64);
        }
        if *nn >= 1 {
            d += zpow(z, *m, nn - 1) * izbar_dot * (*nn as f64);
        }
        res.axpy(-d, psi);
    }
    Ok(res)
}

/// Fitted decay rate `a` of `|F(r)| r^{(d-1)/2} ~ e^{-a r}` over `[r0, r1]`.
pub fn decay_rate(grid: &RadialGrid, f: &SpinorField, r0: f64, r1: f64) -> f64 {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for j in 0..grid.len() {
        let r = grid.r(j);
        if r >= r0 && r <= r1 {
            let v = (f.a[j].norm() + f.b[j].norm()) * grid.scale(j);
            if v > 0.0 {
                xs.push(r);
                ys.push(math::ln(v));
            }
        }
    }
    -math::linear_fit(&xs, &ys).0
}

/// Largest nodal defect of `σ_1 Φ_{m,n} = -Φ_{n,m}` over a set of sources.
pub fn source_symmetry_defect(sources: &[(Key, SpinorField)]) -> f64 {
    let mut worst: f64 = 0.0;
    for ((m, n), f) in sources {
        if let Some((_, g)) = sources.iter().find(|(k, _)| *k == (*n, *m)) {
            worst = worst.max(f.sigma1().add(g).max_abs());
        }
    }
    worst
}

/// `‖F‖` helper for tests and reports.
pub fn field_norm(grid: &RadialGrid, f: &SpinorField) -> f64 {
    norm(grid, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ground_state::GroundState;
    use crate::linearization::SpectrumOptions;
    use crate::math::XorShift;
    use crate::model::Nonlinearity;

    fn system(omega: f64) -> LinearizedSystem {
        let spec = Nonlinearity::Saturable { kappa: 1.0 };
        let grid = RadialGrid::new(3, 40.0, 800).unwrap();
        let gs = GroundState::compute(&spec, &grid, omega, None).unwrap();
        LinearizedSystem::build(&spec, gs, &SpectrumOptions::default()).unwrap()
    }

    fn random_continuous(sys: &LinearizedSystem, rng: &mut XorShift) -> SpinorField {
        let g = sys.grid();
        let c: Vec<(f64, f64, f64)> = (0..4).map(|_| (rng.uniform(), rng.uniform(), 1.0 + 3.0 * rng.uniform().abs())).collect();
        let r: Vec<C64> = (0..g.len())
            .map(|j| {
                let x = g.r(j);
                c.iter().map(|(a, b, w)| C64::new(*a, *b) * math::exp(-x * x / (w * w))).sum()
            })
            .collect();
        sys.projection.project(&SpinorField::lift(&r))
    }

    #[test]
    fn linear_expansion_is_trivial() {
        let spec = Nonlinearity::Linear;
        let sys = system(0.72);
        let mut lin = sys.clone();
        lin.spec = spec;
        let exp = modulation_expansion(&lin, &[], 5, 2).unwrap();
        assert!(exp.y.scalar.values().all(|c| c.norm() == 0.0));
        assert!(exp.y.duals.values().all(|d| d.max_abs() == 0.0));
    }

    #[test]
    fn duals_match_direct_modulation_system() {
        let sys = system(0.72);
        let g = *sys.grid();
        let exp = modulation_expansion(&sys, &[], 7, 5).unwrap();
        for d in exp.y.duals.values().chain(exp.x1.duals.values()) {
            assert!(bilinear(&g, &sys.phi.sigma3(), d).norm() <= 1e-9 * norm(&g, d) * norm(&g, &sys.phi));
        }
        let mut rng = XorShift::new(21);
        let zero = SpinorField::zeros(g.len());
        for _ in 0..50 {
            let z = C64::new(rng.uniform(), rng.uniform()) * 0.01;
            let f = random_continuous(&sys, &mut rng);
            assert!(f.conjugation_defect() < 1e-12 * f.max_abs());
            // five-point derivative in the amplitude of f
            let eps = 1e-3 / f.max_abs();
            let y = |t: f64| modulation_rhs(&sys, z, &f.scale_re(t * eps)).unwrap().y;
            let direct = (8.0 * (y(1.0) - y(-1.0)) - (y(2.0) - y(-2.0))) / (12.0 * eps);
            let dual = exp.y.eval_dual(&g, z, &f);
            assert!((direct - dual).norm() <= 1e-6 * direct.norm(), "{direct} {dual}");
            // polynomial part
            let d0 = modulation_rhs(&sys, z, &zero).unwrap();
            assert!((d0.y - exp.y.eval_scalar(z)).norm() <= 1e-6 * d0.y.norm());
            assert!((d0.x1 - exp.x1.eval_scalar(z)).norm() <= 1e-6 * d0.x1.norm());
            assert!((d0.x2 - exp.x2.eval_scalar(z)).norm() <= 1e-6 * d0.x2.norm());
        }
    }

    #[test]
    fn substituted_duals_match_direct_modulation_system() {
        let sys = system(0.8);
        let g = *sys.grid();
        let pkg = build_sources(&sys, 2, &NormalFormOptions::default()).unwrap();
        let extra = pkg.substituted();
        let exp = modulation_expansion(&sys, &extra, 7, 5).unwrap();
        let mut rng = XorShift::new(5);
        for _ in 0..10 {
            let z = C64::new(rng.uniform(), rng.uniform()) * 0.01;
            let mut fp = SpinorField::zeros(g.len());
            for ((m, n), p) in &extra {
                fp.axpy(zpow(z, *m, *n), p);
            }
            let f = random_continuous(&sys, &mut rng);
            let eps = 1e-3 / f.max_abs();
            let y = |t: f64| {
                let mut h = fp.clone();
                h.axpy(C64::new(t * eps, 0.0), &f);
                modulation_rhs(&sys, z, &h).unwrap().y
            };
            let direct = (8.0 * (y(1.0) - y(-1.0)) - (y(2.0) - y(-2.0))) / (12.0 * eps);
            let dual = exp.y.eval_dual(&g, z, &f);
            assert!((direct - dual).norm() <= 1e-6 * direct.norm(), "{direct} {dual}");
            let y0 = y(0.0);
            assert!((y0 - exp.y.eval_scalar(z)).norm() <= 1e-6 * y0.norm());
        }
    }

    #[test]
    fn level_one_sources_and_residual_order() {
        let sys = system(0.72);
        let pkg = build_sources(&sys, 1, &NormalFormOptions::default()).unwrap();
        let g = *sys.grid();
        let lvl = &pkg.levels[0];
        assert_eq!(lvl.sources.len(), 3);
        assert!(source_symmetry_defect(&lvl.sources) <= 1e-10 * pkg.resonant_source.max_abs());
        for (_, s) in &lvl.sources {
            assert!(norm(&g, &sys.projection.project(s).sub(s)) <= 1e-9 * norm(&g, s));
            assert!(s.max_imag() == 0.0);
        }
        assert!(pkg.resonant_corrector.max_imag() > 1e-6 * pkg.resonant_corrector.max_abs());
        // (z, f) = (ε, Σ Ψ ε^2): the f equation is forced at order ε³
        let phi20 = pkg.source(1, 2, 0).unwrap().clone();
        let phi11 = pkg.source(1, 1, 1).unwrap().clone();
        let phi02 = pkg.source(1, 0, 2).unwrap().clone();
        let psi11 = solve_gap_continuous(&sys, 0.0, &phi11).unwrap().scale_re(-1.0);
        let terms = [
            ((2, 0), pkg.resonant_corrector.clone(), phi20),
            ((1, 1), psi11, phi11),
            ((0, 2), pkg.resonant_conjugate.clone(), phi02),
        ];
        let base = C64::new(0.6, 0.8);
        let res: Vec<f64> = [0.08, 0.04, 0.02, 0.01]
            .iter()
            .map(|e| norm(&g, &forcing_residual(&sys, &terms, base * *e).unwrap()))
            .collect();
        let slope = math::ln(res[2] / res[3]) / math::ln(2.0);
        assert!(slope >= 2.9, "residuals {res:?}");
    }

    #[test]
    fn level_two_sources_match_residual() {
        // N = 2 needs 2λ < ω < 3λ
        let sys = system(0.8);
        assert_eq!(sys.resonance, 2);
        let pkg = build_sources(&sys, 2, &NormalFormOptions::default()).unwrap();
        let g = *sys.grid();
        assert!(source_symmetry_defect(&pkg.levels[1].sources) <= 1e-10 * pkg.resonant_source.max_abs());
        let mut terms = Vec::new();
        for ((k, psi), (_, phi)) in pkg.levels[0].correctors.iter().zip(&pkg.levels[0].sources) {
            terms.push((*k, psi.clone(), phi.clone()));
        }
        let base = C64::new(0.8, -0.6);
        let res: Vec<f64> = [0.16, 0.08, 0.04]
            .iter()
            .map(|e| {
                let z = base * *e;
                let mut r = forcing_residual(&sys, &terms, z).unwrap();
                for ((m, n), s) in &pkg.levels[1].sources {
                    r.axpy(-zpow(z, *m, *n), s);
                }
                norm(&g, &r)
            })
            .collect();
        let slope = math::ln(res[1] / res[2]) / math::ln(2.0);
        assert!(slope >= 3.9, "residuals {res:?}");
    }
}
