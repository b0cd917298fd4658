//! Ground states `Δφ - ωφ + β(φ²)φ = 0`: shooting for a first guess, damped Newton on
//! the symmetrized finite-difference system, continuation in `ω`, and the (H3)-(H5) checks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::banded::{sturm_count, tridiagonal_eigenvalue, BandMatrix};
use crate::math;
use crate::model::{Nonlinearity, RadialGrid};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct SolverOptions {
    /// Required relative residual `‖Δφ - ωφ + β(φ²)φ‖ / ‖φ‖`.
    pub residual_tol: f64,
    pub max_newton: usize,
    /// RK4 step for the shooting guess.
    pub shooting_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { residual_tol: 1e-10, max_newton: 60, shooting_step: 2e-3 }
    }
}

/// Ground state profile with its first two `ω`-derivatives and mass data.
#[derive(Clone, Debug)]
pub struct GroundState {
    pub omega: f64,
    pub grid: RadialGrid,
    pub phi: Vec<f64>,
    pub dphi: Vec<f64>,
    pub d2phi: Vec<f64>,
    /// `M(ω) = ‖φ‖²`.
    pub mass: f64,
    /// `dM/dω = 2⟨φ, ∂_ωφ⟩`.
    pub dmass: f64,
    pub residual: f64,
    pub dphi_residual: f64,
}

impl GroundState {
    pub fn compute(spec: &Nonlinearity, grid: &RadialGrid, omega: f64, guess: Option<&[f64]>) -> Result<Self> {
        let phi = solve_ground_state(spec, omega, grid, guess)?;
        Self::from_profile(spec, grid, omega, phi)
    }

    /// Derivatives and mass data for an already converged profile.
    pub fn from_profile(spec: &Nonlinearity, grid: &RadialGrid, omega: f64, phi: Vec<f64>) -> Result<Self> {
        let residual = ground_state_residual(spec, omega, grid, &phi);
        let lp = LPlus::new(spec, omega, grid, &phi);
        let rhs: Vec<f64> = phi.iter().map(|p| -p).collect();
        let dphi = lp.solve(&rhs)?;
        let dphi_residual = {
            let got = lp.apply(&dphi);
            let e: Vec<f64> = got.iter().zip(&rhs).map(|(a, b)| a - b).collect();
            grid.l2_norm(&e) / grid.l2_norm(&phi)
        };
        // L₊ ∂²φ = -∂φ - (∂_ω L₊) ∂φ,  ∂_ω L₊ = 1 - (3β' + 2β''s) 2φ∂φ
        let rhs2: Vec<f64> = (0..phi.len())
            .map(|j| {
                let s = phi[j] * phi[j];
                let dl = 1.0 - (3.0 * spec.derivative(s, 1) + 2.0 * spec.derivative(s, 2) * s) * 2.0 * phi[j] * dphi[j];
                -dphi[j] - dl * dphi[j]
            })
            .collect();
        let d2phi = lp.solve(&rhs2)?;
        let mass = math::powi(grid.l2_norm(&phi), 2);
        let pd: Vec<f64> = phi.iter().zip(&dphi).map(|(a, b)| a * b).collect();
        let dmass = 2.0 * grid.integrate(&pd);
        Ok(GroundState { omega, grid: *grid, phi, dphi, d2phi, mass, dmass, residual, dphi_residual })
    }

    pub fn origin_value(&self) -> f64 {
        self.grid.origin_value(&self.phi)
    }
}

/// `‖Δφ - ωφ + β(φ²)φ‖ / ‖φ‖`.
pub fn ground_state_residual(spec: &Nonlinearity, omega: f64, grid: &RadialGrid, phi: &[f64]) -> f64 {
    let lap = grid.laplacian(phi);
    let r: Vec<f64> = (0..phi.len()).map(|j| lap[j] - omega * phi[j] + spec.beta(phi[j] * phi[j]) * phi[j]).collect();
    grid.l2_norm(&r) / grid.l2_norm(phi)
}

/// `L₊ = -Δ + ω - β(φ²) - 2β'(φ²)φ²` as a symmetric tridiagonal matrix in `v = r^s u`.
#[derive(Clone, Debug)]
pub struct LPlus {
    grid: RadialGrid,
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl LPlus {
    pub fn new(spec: &Nonlinearity, omega: f64, grid: &RadialGrid, phi: &[f64]) -> Self {
        let kin = grid.kinetic();
        let mut diag = kin.diag;
        for (j, d) in diag.iter_mut().enumerate() {
            let s = phi[j] * phi[j];
            *d += omega - spec.beta(s) - 2.0 * spec.derivative(s, 1) * s;
        }
        LPlus { grid: *grid, diag, off: kin.off }
    }

    /// Applies `L₊` to physical samples.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let n = u.len();
        let v: Vec<f64> = (0..n).map(|j| u[j] * self.grid.scale(j)).collect();
        (0..n)
            .map(|j| {
                let mut t = self.diag[j] * v[j];
                if j > 0 {
                    t += self.off[j - 1] * v[j - 1];
                }
                if j + 1 < n {
                    t += self.off[j] * v[j + 1];
                }
                t / self.grid.scale(j)
            })
            .collect()
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = rhs.len();
        let mut m = BandMatrix::<f64>::zeros(n, 1, 1);
        for j in 0..n {
            m.set(j, j, self.diag[j]);
            if j + 1 < n {
                m.set(j, j + 1, self.off[j]);
                m.set(j + 1, j, self.off[j]);
            }
        }
        let lu = m.factor();
        if lu.is_singular() {
            return Err(Error::IllConditioned { what: "L+ (kernel present)".into(), condition: f64::INFINITY });
        }
        let mut b: Vec<f64> = (0..n).map(|j| rhs[j] * self.grid.scale(j)).collect();
        lu.solve_in_place(&mut b);
        Ok((0..n).map(|j| b[j] / self.grid.scale(j)).collect())
    }
}

/// Outcome of one shot from amplitude `A`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shot {
    Over,
    Under,
    Undecided,
}

fn shooting_rhs(spec: &Nonlinearity, omega: f64, dm1: f64, r: f64, y: f64, p: f64) -> (f64, f64) {
    (p, -dm1 / r * p + omega * y - spec.beta(y * y) * y)
}

/// Integrates the radial ODE from the origin; optionally records samples every `record` steps.
fn shoot(
    spec: &Nonlinearity,
    omega: f64,
    dim: usize,
    amp: f64,
    step: f64,
    r_max: f64,
    mut record: Option<(usize, &mut Vec<f64>)>,
) -> (Shot, f64) {
    let dm1 = dim as f64 - 1.0;
    let c = amp * (omega - spec.beta(amp * amp)) / (2.0 * dim as f64);
    // series start one step off the origin
    let mut r = step;
    let mut y = amp + c * r * r;
    let mut p = 2.0 * c * r;
    let mut k = 1usize;
    if let Some((every, out)) = record.as_mut() {
        if *every == 1 {
            out.push(y);
        }
    }
    while r < r_max {
        let (k1y, k1p) = shooting_rhs(spec, omega, dm1, r, y, p);
        let (k2y, k2p) = shooting_rhs(spec, omega, dm1, r + 0.5 * step, y + 0.5 * step * k1y, p + 0.5 * step * k1p);
        let (k3y, k3p) = shooting_rhs(spec, omega, dm1, r + 0.5 * step, y + 0.5 * step * k2y, p + 0.5 * step * k2p);
        let (k4y, k4p) = shooting_rhs(spec, omega, dm1, r + step, y + step * k3y, p + step * k3p);
        y += step / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
        p += step / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
        k += 1;
        r = k as f64 * step;
        if let Some((every, out)) = record.as_mut() {
            if k % *every == 0 {
                out.push(y);
            }
        }
        if y < 0.0 {
            return (Shot::Over, r);
        }
        if p > 0.0 {
            return (Shot::Under, r);
        }
        if !y.is_finite() {
            return (Shot::Undecided, r);
        }
    }
    (Shot::Undecided, r)
}

/// Finds the shooting amplitude by a log-spaced scan and bisection.
fn shooting_amplitude(
    spec: &Nonlinearity,
    omega: f64,
    dim: usize,
    step: f64,
    r_max: f64,
) -> core::result::Result<f64, String> {
    let potential = |a: f64| 0.5 * spec.primitive(a * a) - 0.5 * omega * a * a;
    let n_scan = 480;
    let (lo_a, hi_a) = (1e-3f64, 1e3f64);
    let ratio = math::powf(hi_a / lo_a, 1.0 / n_scan as f64);
    let mut prev = lo_a;
    let mut bracket = None;
    let mut a = lo_a;
    for _ in 0..n_scan {
        a *= ratio;
        if potential(a) <= 0.0 {
            prev = a;
            continue;
        }
        match shoot(spec, omega, dim, a, step, r_max, None).0 {
            Shot::Over => {
                bracket = Some((prev, a));
                break;
            }
            _ => prev = a,
        }
    }
    let (mut lo, mut hi) = bracket.ok_or_else(|| String::from("no overshoot in amplitude scan (branch absent)"))?;
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        match shoot(spec, omega, dim, mid, step, r_max, None).0 {
            Shot::Over => hi = mid,
            _ => lo = mid,
        }
    }
    Ok(lo)
}

/// Shooting profile sampled on the grid nodes, with an exponential tail past the
/// point where the shot becomes unreliable.
fn shooting_guess(spec: &Nonlinearity, omega: f64, grid: &RadialGrid, opts: &SolverOptions) -> core::result::Result<Vec<f64>, String> {
    let h = grid.h();
    let sub = math::floor(h / opts.shooting_step).max(1.0) as usize;
    let step = h / sub as f64;
    let amp = shooting_amplitude(spec, omega, grid.dim(), step, grid.radius())?;
    let mut samples = Vec::new();
    shoot(spec, omega, grid.dim(), amp, step, grid.radius(), Some((sub, &mut samples)));
    let n = grid.len();
    let mut out = vec![0.0; n];
    let mut cut = samples.len().min(n);
    for (j, y) in samples.iter().enumerate().take(cut) {
        if *y < 1e-6 * amp || !y.is_finite() {
            cut = j;
            break;
        }
    }
    cut = cut.saturating_sub(1).max(1);
    out[..cut].copy_from_slice(&samples[..cut]);
    let rc = grid.r(cut - 1);
    let yc = samples[cut - 1];
    let k = math::sqrt(omega);
    let s = grid.sym_exponent();
    for (j, o) in out.iter_mut().enumerate().skip(cut) {
        let r = grid.r(j);
        *o = yc * math::powf(rc / r, s) * math::exp(-k * (r - rc));
    }
    Ok(out)
}

/// `residual_tol`, raised to the round-off level of the discrete Laplacian on fine grids.
fn effective_tol(opts: &SolverOptions, grid: &RadialGrid, omega: f64) -> f64 {
    let h = grid.h();
    opts.residual_tol.max(16.0 * f64::EPSILON * (4.0 / (h * h) + omega))
}

/// Damped Newton in `v`; returns the profile and the final relative residual.
fn newton(spec: &Nonlinearity, omega: f64, grid: &RadialGrid, guess: &[f64], opts: &SolverOptions) -> Option<Vec<f64>> {
    let n = grid.len();
    let scales = grid.scales();
    let kin = grid.kinetic();
    let kd = &kin.diag;
    let ko = &kin.off;
    let mut v: Vec<f64> = (0..n).map(|j| guess[j] * scales[j]).collect();
    let resid = |v: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|j| {
                let u = v[j] / scales[j];
                let mut t = kd[j] * v[j] + (omega - spec.beta(u * u)) * v[j];
                if j > 0 {
                    t += ko[j - 1] * v[j - 1];
                }
                if j + 1 < n {
                    t += ko[j] * v[j + 1];
                }
                t
            })
            .collect()
    };
    let norm = |x: &[f64]| math::sqrt(x.iter().map(|a| a * a).sum::<f64>());
    let mut f = resid(&v);
    let mut fnorm = norm(&f);
    let tol = effective_tol(opts, grid, omega);
    for _ in 0..opts.max_newton {
        let vn = norm(&v);
        if vn == 0.0 || !vn.is_finite() {
            return None;
        }
        if fnorm / vn <= 0.05 * tol {
            break;
        }
        let mut jac = BandMatrix::<f64>::zeros(n, 1, 1);
        for j in 0..n {
            let u = v[j] / scales[j];
            let s = u * u;
            jac.set(j, j, kd[j] + omega - spec.beta(s) - 2.0 * spec.derivative(s, 1) * s);
            if j + 1 < n {
                jac.set(j, j + 1, ko[j]);
                jac.set(j + 1, j, ko[j]);
            }
        }
        let lu = jac.factor();
        if lu.is_singular() {
            return None;
        }
        let dv = lu.solve(&f);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = v.iter().zip(&dv).map(|(a, b)| a - alpha * b).collect();
            let ft = resid(&trial);
            let tn = norm(&ft);
            if tn.is_finite() && tn < (1.0 - 1e-4 * alpha) * fnorm {
                v = trial;
                f = ft;
                fnorm = tn;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // stagnation at round-off is acceptance, anything else is failure
            if fnorm / vn <= tol {
                break;
            }
            return None;
        }
    }
    let u: Vec<f64> = (0..n).map(|j| v[j] / scales[j]).collect();
    Some(u)
}

/// Positive and decreasing down to the round-off tail.
fn is_nodeless_decreasing(phi: &[f64]) -> bool {
    let top = phi.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return false;
    }
    let floor = 1e-9 * top;
    for j in 0..phi.len() {
        if phi[j] < -floor {
            return false;
        }
        if j + 1 < phi.len() && phi[j] > floor && phi[j + 1] >= phi[j] {
            return false;
        }
    }
    true
}

pub fn solve_ground_state(spec: &Nonlinearity, omega: f64, grid: &RadialGrid, guess: Option<&[f64]>) -> Result<Vec<f64>> {
    solve_ground_state_with(spec, omega, grid, guess, &SolverOptions::default())
}

pub fn solve_ground_state_with(
    spec: &Nonlinearity,
    omega: f64,
    grid: &RadialGrid,
    guess: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    if !(omega > 0.0 && omega.is_finite()) {
        return Err(Error::InvalidParameter(format!("omega must be positive, got {omega}")));
    }
    if spec.is_linear() {
        return Err(Error::NoGroundState { omega, reason: "linear equation has no decaying positive solution".into() });
    }
    let accept = |phi: Vec<f64>| -> Option<Vec<f64>> {
        if is_nodeless_decreasing(&phi) && ground_state_residual(spec, omega, grid, &phi) <= effective_tol(opts, grid, omega) {
            Some(phi)
        } else {
            None
        }
    };
    if let Some(g) = guess {
        grid.check_len(g.len())?;
        if let Some(phi) = newton(spec, omega, grid, g, opts).and_then(accept) {
            return Ok(phi);
        }
    }
    let start = shooting_guess(spec, omega, grid, opts).map_err(|reason| Error::NoGroundState { omega, reason })?;
    newton(spec, omega, grid, &start, opts).and_then(accept).ok_or_else(|| Error::NoGroundState {
        omega,
        reason: "Newton from the shooting guess did not reach a nodeless solution (shooting bracket found)".into(),
    })
}

#[derive(Clone, Debug)]
pub struct BranchSample {
    pub state: GroundState,
    /// Centered difference of `M` at `ω ± δω`.
    pub dmass_fd: f64,
}

#[derive(Clone, Debug)]
pub struct GroundStateBranch {
    pub samples: Vec<BranchSample>,
    /// Set when continuation stopped before the end of the requested range.
    pub truncated: Option<String>,
}

impl GroundStateBranch {
    pub fn omegas(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.state.omega).collect()
    }
    /// (H4): `dM/dω > 0` at every sample.
    pub fn mass_slope_positive(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.state.dmass > 0.0)
    }
    pub fn max_slope_disagreement(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| (s.state.dmass - s.dmass_fd).abs() / s.state.dmass.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

/// Continues the branch over `omegas` (in the given order), each solve seeded by the
/// previous profile shifted along `∂_ωφ`.
pub fn continue_branch(spec: &Nonlinearity, omegas: &[f64], grid: &RadialGrid) -> Result<GroundStateBranch> {
    let first = *omegas.first().ok_or_else(|| Error::InvalidParameter("empty omega range".into()))?;
    let mut samples: Vec<BranchSample> = Vec::new();
    let mut current = GroundState::compute(spec, grid, first, None)?;
    let mut truncated = None;
    for (k, &om) in omegas.iter().enumerate() {
        if k > 0 {
            match step_to(spec, grid, &current, om) {
                Ok(s) => current = s,
                Err(e) => {
                    truncated = Some(format!("continuation stopped at omega = {om}: {e}"));
                    break;
                }
            }
        }
        let d = 1e-3 * om;
        let fd = (|| -> Result<f64> {
            let plus = solve_ground_state(spec, om + d, grid, Some(&extrapolate(&current, d)))?;
            let minus = solve_ground_state(spec, om - d, grid, Some(&extrapolate(&current, -d)))?;
            Ok((math::powi(grid.l2_norm(&plus), 2) - math::powi(grid.l2_norm(&minus), 2)) / (2.0 * d))
        })();
        match fd {
            Ok(dm) => samples.push(BranchSample { state: current.clone(), dmass_fd: dm }),
            Err(e) => {
                truncated = Some(format!("finite-difference slope failed at omega = {om}: {e}"));
                break;
            }
        }
        let h5 = check_h5(spec, om, &current.phi, grid)?;
        if h5.kernel_gap < 1e-8 {
            truncated = Some(format!("branch fold: L+ nearly singular at omega = {om}"));
            break;
        }
    }
    Ok(GroundStateBranch { samples, truncated })
}

fn extrapolate(state: &GroundState, d: f64) -> Vec<f64> {
    state.phi.iter().zip(&state.dphi).zip(&state.d2phi).map(|((p, q), r)| p + d * q + 0.5 * d * d * r).collect()
}

/// Moves along the branch from `from` to `omega`, halving the step on failure.
pub fn step_to(spec: &Nonlinearity, grid: &RadialGrid, from: &GroundState, omega: f64) -> Result<GroundState> {
    let mut state = from.clone();
    let mut pieces = 1usize;
    while pieces <= 64 {
        let mut ok = true;
        let mut s = state.clone();
        for i in 1..=pieces {
            let target = from.omega + (omega - from.omega) * i as f64 / pieces as f64;
            let g = extrapolate(&s, target - s.omega);
            match solve_ground_state_with(spec, target, grid, Some(&g), &SolverOptions::default())
                .and_then(|phi| if newton_only_ok(&phi, &g) { Ok(phi) } else { Err(Error::NoGroundState { omega: target, reason: "jumped branch".into() }) })
                .and_then(|phi| GroundState::from_profile(spec, grid, target, phi))
            {
                Ok(n) => s = n,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            return Ok(s);
        }
        pieces *= 2;
        state = from.clone();
    }
    Err(Error::NoGroundState { omega, reason: "continuation step could not be resolved".into() })
}

/// Guards against Newton landing on a different branch than the predictor.
fn newton_only_ok(phi: &[f64], guess: &[f64]) -> bool {
    let top = guess.iter().cloned().fold(0.0, f64::max);
    let diff = phi.iter().zip(guess).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    diff < 0.25 * top
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct H5Report {
    pub negative_count: usize,
    /// Smallest `|eigenvalue|` of `L₊`.
    pub kernel_gap: f64,
    pub lowest: f64,
}

impl H5Report {
    pub fn passes(&self, tol: f64) -> bool {
        self.negative_count == 1 && self.kernel_gap > 10.0 * tol
    }
}

/// Inertia of `L₊` on radial functions by Sturm counts.
pub fn check_h5(spec: &Nonlinearity, omega: f64, phi: &[f64], grid: &RadialGrid) -> Result<H5Report> {
    grid.check_len(phi.len())?;
    let lp = LPlus::new(spec, omega, grid, phi);
    let neg = sturm_count(&lp.diag, &lp.off, 0.0);
    let tol = 1e-13;
    let lowest = tridiagonal_eigenvalue(&lp.diag, &lp.off, 0, tol);
    let above = tridiagonal_eigenvalue(&lp.diag, &lp.off, neg, tol);
    let mut gap = above.abs();
    if neg > 0 {
        gap = gap.min(tridiagonal_eigenvalue(&lp.diag, &lp.off, neg - 1, tol).abs());
    }
    if !gap.is_finite() {
        return Err(Error::Eigensolver("Sturm bisection produced a non-finite eigenvalue".into()));
    }
    Ok(H5Report { negative_count: neg, kernel_gap: gap, lowest })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cubic() -> Nonlinearity {
        Nonlinearity::PurePower { p: 3.0 }
    }

    #[test]
    fn cubic_ground_state_converges() {
        let g = RadialGrid::new(3, 30.0, 3000).unwrap();
        let gs = GroundState::compute(&cubic(), &g, 1.0, None).unwrap();
        assert!(gs.residual <= 1e-10, "residual {}", gs.residual);
        assert!(gs.dphi_residual <= 1e-8);
        assert!(is_nodeless_decreasing(&gs.phi));
        let q = gs.origin_value();
        assert!((q - 4.33738768).abs() < 2e-3, "phi(0) = {q}");
    }

    #[test]
    fn fine_grid_accepts_roundoff_limited_residual() {
        // at h = 1e-3 the Laplacian alone carries a relative round-off near 1e-9
        let g = RadialGrid::new(3, 20.0, 20000).unwrap();
        let a = GroundState::compute(&cubic(), &g, 1.0, None).unwrap();
        let b = GroundState::compute(&cubic(), &g, 4.0, None).unwrap();
        assert!((b.origin_value() / a.origin_value() - 2.0).abs() < 1e-4);
    }

    #[test]
    fn linear_has_no_ground_state() {
        let g = RadialGrid::new(3, 20.0, 400).unwrap();
        let e = solve_ground_state(&Nonlinearity::Linear, 1.0, &g, None).unwrap_err();
        assert!(matches!(e, Error::NoGroundState { .. }));
        assert!(solve_ground_state(&cubic(), -1.0, &g, None).is_err());
    }

    #[test]
    fn h5_on_cubic() {
        let g = RadialGrid::new(3, 30.0, 1500).unwrap();
        let phi = solve_ground_state(&cubic(), 1.0, &g, None).unwrap();
        let rep = check_h5(&cubic(), 1.0, &phi, &g).unwrap();
        assert_eq!(rep.negative_count, 1);
        assert!(rep.passes(1e-12));
        // ⟨φ, L₊φ⟩ = -2∫β'(φ²)φ⁴ < 0
        let lp = LPlus::new(&cubic(), 1.0, &g, &phi);
        let q: Vec<f64> = lp.apply(&phi).iter().zip(&phi).map(|(a, b)| a * b).collect();
        assert!(g.integrate(&q) < 0.0);
    }

    #[test]
    fn saturable_branch_slope_positive() {
        let g = RadialGrid::new(3, 60.0, 1500).unwrap();
        let spec = Nonlinearity::Saturable { kappa: 1.0 };
        let br = continue_branch(&spec, &[0.6, 0.65, 0.7], &g).unwrap();
        assert!(br.truncated.is_none(), "{:?}", br.truncated);
        assert_eq!(br.samples.len(), 3);
        assert!(br.mass_slope_positive());
        assert!(br.max_slope_disagreement() < 1e-4);
    }
}
