//! Modulation decomposition `u = e^{iθ}(φ_ω + r)`, `R = zξ + z̄σ_1ξ + f`, along a trajectory.
//!
//! With `Φ = (φ, φ)` the two orthogonality conditions `⟨R, Φ⟩ = 0` and `⟨R, σ_3∂_ωΦ⟩ = 0`
//! read `Re(e^{-iθ}⟨u, φ_ω⟩) = M(ω)` and `Im(e^{-iθ}⟨u, ∂_ωφ⟩) = 0`. The second fixes `θ`
//! given `ω`, which leaves a scalar equation in `ω`.
//!
//! The family `ω ↦ (φ_ω, ξ_ω)` is sampled on a lattice of exact systems and interpolated
//! (quintic Hermite for `φ`, cubic for `ξ`), so a decomposition never re-solves a ground state.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::linearization::{LinearizedSystem, SpectrumOptions};
use crate::math::{self, PI};
use crate::model::{bilinear, RadialGrid, SpinorField};
use crate::{Error, Result, C64};

/// Interpolated family data at one frequency.
#[derive(Clone, Debug)]
pub struct Frame {
    pub omega: f64,
    pub lambda: f64,
    pub phi: Vec<f64>,
    pub dphi: Vec<f64>,
    pub mass: f64,
    /// Real internal mode with `⟨ξ, σ_3ξ⟩ = 1`.
    pub xi: SpinorField,
}

#[derive(Clone, Debug)]
pub struct SystemFamily {
    opts: SpectrumOptions,
    origin: f64,
    spacing: f64,
    weights: Vec<f64>,
    nodes: BTreeMap<i64, LinearizedSystem>,
    /// Lattice nodes may not leave `[lo, hi]`.
    lo: f64,
    hi: f64,
}

impl SystemFamily {
    /// Lattice through `base.omega()` with the given spacing; nodes are built on demand.
    pub fn new(base: LinearizedSystem, spacing: f64, opts: SpectrumOptions) -> Result<Self> {
        let omega = base.omega();
        if !(spacing > 0.0) || spacing >= 0.5 * omega {
            return Err(Error::InvalidParameter(format!("family spacing {spacing} at omega = {omega}")));
        }
        let weights = base.grid().weights();
        let mut nodes = BTreeMap::new();
        nodes.insert(0, base);
        Ok(SystemFamily { opts, origin: omega, spacing, weights, nodes, lo: 0.5 * omega, hi: 2.0 * omega })
    }

    /// Default spacing `2e-3·ω`.
    pub fn around(base: LinearizedSystem) -> Result<Self> {
        let s = 2e-3 * base.omega();
        Self::new(base, s, SpectrumOptions::default())
    }

    /// Restricts the frequencies the lattice may reach.
    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.lo = lo;
        self.hi = hi;
        self
    }

    pub fn base(&self) -> &LinearizedSystem {
        &self.nodes[&0]
    }
    pub fn grid(&self) -> &RadialGrid {
        self.base().grid()
    }
    pub fn reference_omega(&self) -> f64 {
        self.origin
    }
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn node_omega(&self, k: i64) -> f64 {
        self.origin + k as f64 * self.spacing
    }

    fn ensure(&mut self, k: i64) -> Result<()> {
        if self.nodes.contains_key(&k) {
            return Ok(());
        }
        let step = if k > 0 { -1 } else { 1 };
        self.ensure(k + step)?;
        let omega = self.node_omega(k);
        if omega < self.lo || omega > self.hi {
            return Err(Error::OutsideTube(format!("frequency {omega} left the family range [{}, {}]", self.lo, self.hi)));
        }
        let next = self.nodes[&(k + step)]
            .at_omega(omega, &self.opts)
            .map_err(|e| Error::OutsideTube(format!("family lost at omega = {omega}: {e}")))?;
        self.nodes.insert(k, next);
        Ok(())
    }

    /// The system at the nearest lattice node.
    pub fn nearest(&mut self, omega: f64) -> Result<&LinearizedSystem> {
        let k = math::round((omega - self.origin) / self.spacing) as i64;
        self.ensure(k)?;
        Ok(&self.nodes[&k])
    }

    /// Frame at an arbitrary `ω`; exact at lattice nodes.
    pub fn frame(&mut self, omega: f64) -> Result<Frame> {
        if !omega.is_finite() {
            return Err(Error::OutsideTube(format!("non-finite frequency {omega}")));
        }
        let x = (omega - self.origin) / self.spacing;
        let k = math::floor(x) as i64;
        let t = x - k as f64;
        self.ensure(k)?;
        if t == 0.0 {
            return Ok(self.exact(k));
        }
        self.ensure(k + 1)?;
        Ok(self.interpolate(k, t))
    }

    fn exact(&self, k: i64) -> Frame {
        let s = &self.nodes[&k];
        Frame {
            omega: s.omega(),
            lambda: s.lambda,
            phi: s.ground.phi.clone(),
            dphi: s.ground.dphi.clone(),
            mass: s.ground.mass,
            xi: s.xi.clone(),
        }
    }

    fn interpolate(&self, k: i64, t: f64) -> Frame {
        let (s0, s1) = (&self.nodes[&k], &self.nodes[&(k + 1)]);
        let d = self.spacing;
        let (t2, t3) = (t * t, t * t * t);
        let (t4, t5) = (t3 * t, t3 * t2);
        // quintic Hermite in values, first and second derivatives
        let q = [
            1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5,
            t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5,
            0.5 * (t2 - 3.0 * t3 + 3.0 * t4 - t5),
            10.0 * t3 - 15.0 * t4 + 6.0 * t5,
            -4.0 * t3 + 7.0 * t4 - 3.0 * t5,
            0.5 * (t3 - 2.0 * t4 + t5),
        ];
        let dq = [
            -30.0 * t2 + 60.0 * t3 - 30.0 * t4,
            1.0 - 18.0 * t2 + 32.0 * t3 - 15.0 * t4,
            0.5 * (2.0 * t - 9.0 * t2 + 12.0 * t3 - 5.0 * t4),
            30.0 * t2 - 60.0 * t3 + 30.0 * t4,
            -12.0 * t2 + 28.0 * t3 - 15.0 * t4,
            0.5 * (3.0 * t2 - 8.0 * t3 + 5.0 * t4),
        ];
        let (g0, g1) = (&s0.ground, &s1.ground);
        let n = g0.phi.len();
        let mut phi = Vec::with_capacity(n);
        let mut dphi = Vec::with_capacity(n);
        for j in 0..n {
            let v = [g0.phi[j], d * g0.dphi[j], d * d * g0.d2phi[j], g1.phi[j], d * g1.dphi[j], d * d * g1.d2phi[j]];
            phi.push(q.iter().zip(&v).map(|(a, b)| a * b).sum());
            dphi.push(dq.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / d);
        }
        let mass = phi.iter().zip(&self.weights).map(|(p, w)| w * p * p).sum();

        let c = [2.0 * t3 - 3.0 * t2 + 1.0, t3 - 2.0 * t2 + t, -2.0 * t3 + 3.0 * t2, t3 - t2];
        let cubic = |f0: f64, df0: f64, f1: f64, df1: f64| c[0] * f0 + c[1] * d * df0 + c[2] * f1 + c[3] * d * df1;
        let lambda = cubic(s0.lambda, s0.dlambda, s1.lambda, s1.dlambda);
        let mut xi = SpinorField::zeros(n);
        for j in 0..n {
            xi.a[j] = C64::new(cubic(s0.xi.a[j].re, s0.dxi.a[j].re, s1.xi.a[j].re, s1.dxi.a[j].re), 0.0);
            xi.b[j] = C64::new(cubic(s0.xi.b[j].re, s0.dxi.b[j].re, s1.xi.b[j].re, s1.dxi.b[j].re), 0.0);
        }
        let krein = bilinear(s0.grid(), &xi, &xi.sigma3()).re;
        let xi = xi.scale_re(1.0 / math::sqrt(krein));
        Frame { omega: self.node_omega(k) + t * d, lambda, phi, dphi, mass, xi }
    }
}

#[derive(Clone, Debug)]
pub struct ModulationState {
    pub t: f64,
    pub omega: f64,
    /// Total phase `θ`, unwrapped against the guess.
    pub gamma: f64,
    pub z: C64,
    pub f: SpinorField,
    pub lambda: f64,
    /// Worst of the four orthogonality pairings against unit duals, relative to `‖φ‖`.
    pub orthogonality_residual: f64,
    /// `‖R‖ / ‖φ‖`.
    pub distance: f64,
    pub newton_iterations: usize,
    /// Set when a solve from a perturbed guess lands elsewhere.
    pub ambiguous: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct DecomposeOptions {
    /// Largest admissible `‖R‖ / ‖φ‖`.
    pub tube_radius: f64,
    pub tol: f64,
    pub max_iterations: usize,
    /// Relative frequency offset of the uniqueness probe, `None` to skip it.
    pub probe: Option<f64>,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        DecomposeOptions { tube_radius: 0.5, tol: 1e-14, max_iterations: 40, probe: None }
    }
}

struct Pairings {
    theta: f64,
    g: f64,
}

fn pairings(u: &[C64], frame: &Frame, weights: &[f64], theta_guess: f64) -> Option<Pairings> {
    let mut p = C64::new(0.0, 0.0);
    let mut q = C64::new(0.0, 0.0);
    for j in 0..u.len() {
        p += u[j] * (weights[j] * frame.phi[j]);
        q += u[j] * (weights[j] * frame.dphi[j]);
    }
    if q.norm() == 0.0 || !q.norm().is_finite() {
        return None;
    }
    let base = q.arg();
    let theta = base + 2.0 * PI * math::round((theta_guess - base) / (2.0 * PI));
    let rot = C64::new(math::cos(theta), -math::sin(theta));
    Some(Pairings { theta, g: (rot * p).re - frame.mass })
}

fn solve_frequency(
    u: &[C64],
    family: &mut SystemFamily,
    weights: &[f64],
    guess: (f64, f64),
    opts: &DecomposeOptions,
) -> Result<(Frame, f64, usize)> {
    let outside = |why: String| Error::OutsideTube(why);
    let mut omega = guess.0;
    let mut theta = guess.1;
    let mut last_step = f64::INFINITY;
    for it in 0..opts.max_iterations {
        let frame = family.frame(omega)?;
        let here = pairings(u, &frame, weights, theta).ok_or_else(|| outside("no phase pairing".into()))?;
        theta = here.theta;
        let h = 1e-6 * omega;
        let gp = pairings(u, &family.frame(omega + h)?, weights, theta).ok_or_else(|| outside("no phase pairing".into()))?;
        let gm = pairings(u, &family.frame(omega - h)?, weights, theta).ok_or_else(|| outside("no phase pairing".into()))?;
        let slope = (gp.g - gm.g) / (2.0 * h);
        if !(slope.is_finite()) || slope == 0.0 {
            return Err(outside(format!("flat orthogonality condition at omega = {omega}")));
        }
        let mut step = -here.g / slope;
        // keep a single Newton step inside a fraction of the frequency
        let cap = 0.25 * omega;
        if step.abs() > cap {
            step = cap * step.signum();
        }
        omega += step;
        if omega <= 0.0 || !omega.is_finite() {
            return Err(outside(format!("frequency left (0, inf) at iteration {it}")));
        }
        // converged, or stalled at the roundoff of the pairings
        let stalled = step.abs() <= 1e-10 * omega && step.abs() >= 0.3 * last_step;
        last_step = step.abs();
        if step.abs() <= opts.tol * omega.max(1.0) || stalled {
            let frame = family.frame(omega)?;
            let fin = pairings(u, &frame, weights, theta).ok_or_else(|| outside("no phase pairing".into()))?;
            return Ok((frame, fin.theta, it + 1));
        }
    }
    Err(outside(format!("modulation Newton did not converge from omega = {}", guess.0)))
}

fn weighted_norm(grid: &RadialGrid, weights: &[f64], f: &[C64], s1: f64) -> f64 {
    let mut acc = 0.0;
    for (j, x) in f.iter().enumerate() {
        let r = grid.r(j);
        acc += weights[j] * x.norm_sqr() * math::powf(1.0 + r * r, -s1);
    }
    math::sqrt(acc)
}

/// Solves the orthogonality conditions for `(ω, θ)` starting from `guess`.
pub fn decompose(u: &[C64], family: &mut SystemFamily, guess: (f64, f64)) -> Result<ModulationState> {
    decompose_with(u, family, guess, &DecomposeOptions::default())
}

pub fn decompose_with(u: &[C64], family: &mut SystemFamily, guess: (f64, f64), opts: &DecomposeOptions) -> Result<ModulationState> {
    let grid = *family.grid();
    grid.check_len(u.len())?;
    let weights = family.weights.clone();
    let (frame, theta, iterations) = solve_frequency(u, family, &weights, guess, opts)?;

    let rot = C64::new(math::cos(theta), -math::sin(theta));
    let r: Vec<C64> = u.iter().zip(&frame.phi).map(|(x, p)| rot * x - p).collect();
    let rr = SpinorField::lift(&r);
    let phi_norm = math::sqrt(frame.mass);
    let distance = grid.l2_norm_c(&r) / phi_norm;
    if distance > opts.tube_radius {
        return Err(Error::OutsideTube(format!("distance {distance:.3e} exceeds tube radius {}", opts.tube_radius)));
    }
    let xi = &frame.xi;
    let z = bilinear(&grid, &rr, &xi.sigma3());
    let mut f = rr.clone();
    f.axpy(-z, xi);
    f.axpy(-z.conj(), &xi.sigma1());

    let big_phi = SpinorField::from_real(&frame.phi, &frame.phi);
    let dphi = SpinorField::from_real(&frame.dphi, &frame.dphi);
    let unit = |g: &SpinorField| math::sqrt(bilinear(&grid, g, &g.conj()).re).max(f64::MIN_POSITIVE);
    let pairs = [
        bilinear(&grid, &rr, &big_phi).norm() / unit(&big_phi),
        bilinear(&grid, &rr, &dphi.sigma3()).norm() / unit(&dphi),
        bilinear(&grid, &f, &xi.sigma3()).norm() / unit(xi),
        bilinear(&grid, &f, &xi.sigma1().sigma3()).norm() / unit(xi),
    ];
    let orthogonality_residual = pairs.iter().fold(0.0f64, |a, b| a.max(*b)) / phi_norm;

    let mut ambiguous = false;
    if let Some(p) = opts.probe {
        let probe_opts = DecomposeOptions { probe: None, ..*opts };
        for s in [1.0 + p, 1.0 - p] {
            match solve_frequency(u, family, &weights, (guess.0 * s, guess.1), &probe_opts) {
                Ok((other, _, _)) if (other.omega - frame.omega).abs() <= 1e-6 * frame.omega => {}
                _ => ambiguous = true,
            }
        }
    }

    Ok(ModulationState {
        t: 0.0,
        omega: frame.omega,
        gamma: theta,
        z,
        f,
        lambda: frame.lambda,
        orthogonality_residual,
        distance,
        newton_iterations: iterations,
        ambiguous,
    })
}

/// `e^{iθ}(φ_ω + zξ_1 + z̄ξ_2 + f_1)`, the inverse of [`decompose`].
pub fn compose(family: &mut SystemFamily, omega: f64, theta: f64, z: C64, f: Option<&SpinorField>) -> Result<Vec<C64>> {
    let frame = family.frame(omega)?;
    let rot = C64::new(math::cos(theta), math::sin(theta));
    let n = frame.phi.len();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut r = z * frame.xi.a[j] + z.conj() * frame.xi.b[j];
        if let Some(f) = f {
            r += f.a[j];
        }
        out.push(rot * (C64::new(frame.phi[j], 0.0) + r));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct TrackerOptions {
    /// Resonance index `N`; the running integral uses `|z|^{2N+2}`.
    pub resonance: usize,
    /// Exponent `s_1` of the weight `⟨x⟩^{-s_1}`.
    pub weight_exponent: f64,
    /// Allowed ratio between a `z` jump and the local `|ż|Δt` estimate.
    pub smoothness_factor: f64,
    pub decompose: DecomposeOptions,
}

impl Default for TrackerOptions {
    fn default() -> Self {
        TrackerOptions { resonance: 1, weight_exponent: 3.0, smoothness_factor: 10.0, decompose: DecomposeOptions::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticSample {
    pub t: f64,
    pub z: C64,
    pub omega: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub f_h1: f64,
    pub f_weighted: f64,
    /// `∫_0^t |z|^{2N+2}` by the trapezoid rule over snapshots.
    pub running_integral: f64,
    pub orthogonality_residual: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrajectoryDiagnostics {
    pub resonance: usize,
    pub samples: Vec<DiagnosticSample>,
    /// Times at which the smoothness guard fired.
    pub smoothness_violations: Vec<f64>,
    pub tube_exit: Option<(f64, String)>,
}

impl TrajectoryDiagnostics {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    /// `θ̇ - ω` by differences of the tracked phase.
    pub fn phase_drift(&self) -> Vec<f64> {
        let s = &self.samples;
        let n = s.len();
        (0..n)
            .map(|i| {
                if n < 2 {
                    return 0.0;
                }
                let (a, b) = if i == 0 { (0, 1) } else if i == n - 1 { (n - 2, n - 1) } else { (i - 1, i + 1) };
                (s[b].gamma - s[a].gamma) / (s[b].t - s[a].t) - s[i].omega
            })
            .collect()
    }

    /// Sample closest to time `t`.
    pub fn at(&self, t: f64) -> Option<&DiagnosticSample> {
        self.samples.iter().min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
    }

    /// `sup |ω(t) - ω(0)|`.
    pub fn max_omega_excursion(&self) -> f64 {
        let w0 = self.samples.first().map_or(0.0, |s| s.omega);
        self.samples.iter().map(|s| (s.omega - w0).abs()).fold(0.0, f64::max)
    }

    /// `|ω(T) - ω(T/2)|`.
    pub fn omega_tail(&self, t: f64) -> Option<f64> {
        Some((self.at(t)?.omega - self.at(0.5 * t)?.omega).abs())
    }

    /// `ω(t)` averaged `passes` times over one rotation period of `z`; `NaN` near the ends.
    pub fn smoothed_omega(&self, passes: usize) -> Vec<f64> {
        let s = &self.samples;
        let mut w: Vec<f64> = s.iter().map(|x| x.omega).collect();
        if s.len() < 3 || s.iter().all(|x| x.z.norm() == 0.0) {
            return w;
        }
        let dt = (s[s.len() - 1].t - s[0].t) / (s.len() - 1) as f64;
        let freq = rotation_rate(s);
        if freq > 0.0 {
            let width = 2.0 * PI / freq / dt;
            if width >= 1.0 {
                for _ in 0..passes {
                    w = period_average(&w, width);
                }
            }
        }
        w
    }

    /// `|ω(T) - ω(T/2)|` of [`smoothed_omega`](Self::smoothed_omega), each end taken
    /// at the nearest sample where the average is defined.
    pub fn smoothed_omega_tail(&self, t: f64, passes: usize) -> Option<f64> {
        let w = self.smoothed_omega(passes);
        let pick = |tt: f64| {
            self.samples
                .iter()
                .zip(&w)
                .filter(|(_, v)| v.is_finite())
                .min_by(|a, b| (a.0.t - tt).abs().total_cmp(&(b.0.t - tt).abs()))
                .map(|(_, v)| *v)
        };
        Some((pick(t)? - pick(0.5 * t)?).abs())
    }

    /// Mean weighted norm over the last `fraction` of the run divided by its peak.
    pub fn radiation_decay_ratio(&self, fraction: f64) -> Option<f64> {
        let t_end = self.samples.last()?.t;
        let t0 = self.samples.first()?.t;
        let cut = t_end - fraction * (t_end - t0);
        let peak = self.samples.iter().map(|s| s.f_weighted).fold(0.0, f64::max);
        let tail: Vec<f64> = self.samples.iter().filter(|s| s.t >= cut).map(|s| s.f_weighted).collect();
        if peak == 0.0 || tail.is_empty() {
            return None;
        }
        Some(tail.iter().sum::<f64>() / tail.len() as f64 / peak)
    }

    /// Running integral at `t` (nearest sample).
    pub fn running_integral(&self, t: f64) -> Option<f64> {
        self.at(t).map(|s| s.running_integral)
    }
}

/// Streaming tracker: feed snapshots in time order.
pub struct Tracker<'a> {
    family: &'a mut SystemFamily,
    opts: TrackerOptions,
    guess: (f64, f64),
    weights: Vec<f64>,
    diagnostics: TrajectoryDiagnostics,
}

impl<'a> Tracker<'a> {
    pub fn new(family: &'a mut SystemFamily, opts: TrackerOptions) -> Self {
        let guess = (family.reference_omega(), 0.0);
        let weights = family.weights.clone();
        let diagnostics = TrajectoryDiagnostics { resonance: opts.resonance, ..Default::default() };
        Tracker { family, opts, guess, weights, diagnostics }
    }

    /// Starts continuation from `(ω, θ)` instead of the reference frequency.
    pub fn with_guess(mut self, guess: (f64, f64)) -> Self {
        self.guess = guess;
        self
    }

    pub fn diagnostics(&self) -> &TrajectoryDiagnostics {
        &self.diagnostics
    }

    pub fn finish(self) -> TrajectoryDiagnostics {
        self.diagnostics
    }

    pub fn push(&mut self, t: f64, u: &[C64]) -> Result<ModulationState> {
        if let Some((te, why)) = &self.diagnostics.tube_exit {
            return Err(Error::OutsideTube(format!("already left the tube at t = {te}: {why}")));
        }
        let mut state = match decompose_with(u, self.family, self.guess, &self.opts.decompose) {
            Ok(s) => s,
            Err(e) => {
                self.diagnostics.tube_exit = Some((t, format!("{e}")));
                return Err(e);
            }
        };
        state.t = t;
        self.guess = (state.omega, state.gamma);

        let grid = *self.family.grid();
        let p = 2 * self.opts.resonance as i32 + 2;
        let amp = math::powi(state.z.norm(), p);
        let running_integral = match self.diagnostics.samples.last() {
            Some(prev) => prev.running_integral + 0.5 * (t - prev.t) * (amp + math::powi(prev.z.norm(), p)),
            None => 0.0,
        };
        let s = &self.diagnostics.samples;
        if s.len() >= 2 {
            let (a, b) = (&s[s.len() - 2], &s[s.len() - 1]);
            let rate = (b.z - a.z).norm() / (b.t - a.t);
            let jump = (state.z - b.z).norm();
            if jump > self.opts.smoothness_factor * rate * (t - b.t) + 1e-10 {
                self.diagnostics.smoothness_violations.push(t);
            }
        }
        self.diagnostics.samples.push(DiagnosticSample {
            t,
            z: state.z,
            omega: state.omega,
            gamma: state.gamma,
            lambda: state.lambda,
            f_h1: grid.h1_norm_c(&state.f.a),
            f_weighted: weighted_norm(&grid, &self.weights, &state.f.a, self.opts.weight_exponent),
            running_integral,
            orthogonality_residual: state.orthogonality_residual,
        });
        Ok(state)
    }
}

/// Tracks a stored sequence of snapshots; stops at the first tube exit.
pub fn track<'s, I>(snapshots: I, family: &mut SystemFamily, opts: TrackerOptions) -> TrajectoryDiagnostics
where
    I: IntoIterator<Item = (f64, &'s [C64])>,
{
    let mut tracker = Tracker::new(family, opts);
    for (t, u) in snapshots {
        if tracker.push(t, u).is_err() {
            break;
        }
    }
    tracker.finish()
}

#[derive(Clone, Copy, Debug)]
pub struct FitOptions {
    pub min_samples: usize,
    pub max_residual: f64,
    /// Candidate window starts as fractions of the usable range.
    pub starts: [f64; 6],
    /// Passes of the one-period moving average; `0` disables smoothing.
    pub smoothing_passes: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { min_samples: 50, max_residual: 0.2, starts: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5], smoothing_passes: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DampingFit {
    /// `Γ_fit` in `d|z|²/(2dt) = Γ_fit |z|^{2N+2}`; negative means damping.
    pub gamma_fit: f64,
    /// Half-width of the two-sigma interval on `Γ_fit`.
    pub confidence: f64,
    /// Free exponent `q` in `d|z|²/dt ∝ |z|^q`.
    pub exponent: f64,
    /// `|q - (2N+2)|`.
    pub exponent_error: f64,
    pub window: (f64, f64),
    pub samples: usize,
    /// Relative residual of the pure-power fit over the window.
    pub residual: f64,
    /// Rotation rate of `z` used for the smoothing period.
    pub frequency: f64,
    /// `+1` for damping, `-1` for growth.
    pub damping_sign: i32,
}

/// Moving average over exactly `width` (in samples, possibly fractional), centred.
fn period_average(y: &[f64], width: f64) -> Vec<f64> {
    let n = y.len();
    // 2k+1 full taps and two edge taps of weight `frac`, summing to `width`
    let k = math::floor(0.5 * (width - 1.0)) as usize;
    let frac = 0.5 * (width - (2 * k + 1) as f64);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i < k + 1 || i + k + 1 >= n {
            out.push(f64::NAN);
            continue;
        }
        let mut acc: f64 = y[i - k..=i + k].iter().sum();
        acc += frac * (y[i - k - 1] + y[i + k + 1]);
        out.push(acc / width);
    }
    out
}

/// Mean rotation rate of `z` from its unwrapped phase.
fn rotation_rate(s: &[DiagnosticSample]) -> f64 {
    let mut phase = Vec::with_capacity(s.len());
    let mut acc = 0.0;
    let mut prev = s[0].z.arg();
    for x in s {
        let a = x.z.arg();
        let mut d = a - prev;
        d -= 2.0 * PI * math::round(d / (2.0 * PI));
        acc += d;
        prev = a;
        phase.push(acc);
    }
    let t: Vec<f64> = s.iter().map(|x| x.t).collect();
    math::linear_fit(&t, &phase).0.abs()
}

/// Least squares `Δy ≈ c X` through the origin; returns `(c, relative residual, Σ residual²)`.
fn origin_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let c = x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>() / sxx;
    let ss: f64 = x.iter().zip(y).map(|(u, v)| (v - c * u) * (v - c * u)).sum();
    let yy: f64 = y.iter().map(|v| v * v).sum();
    (c, math::sqrt(ss / yy), ss)
}

/// Residual of the straight-line fit of `y^{1-q/2}` (the exact law `ẏ ∝ y^{q/2}`).
fn power_law_residual(t: &[f64], y: &[f64], q: f64) -> f64 {
    let e = 1.0 - 0.5 * q;
    let w: Vec<f64> = y.iter().map(|v| if e.abs() < 1e-12 { math::ln(*v) } else { math::powf(*v, e) }).collect();
    let (slope, icpt) = math::linear_fit(t, &w);
    let ss: f64 = t.iter().zip(&w).map(|(a, b)| (b - slope * a - icpt) * (b - slope * a - icpt)).sum();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var: f64 = w.iter().map(|b| (b - mean) * (b - mean)).sum();
    math::sqrt(ss / var)
}

/// Fits the resonant damping law to a tracked `|z(t)|²`.
///
/// The internal-mode oscillations are removed by repeated averages over one rotation
/// period of `z`; the law `dy/dt = 2Γ_fit y^{N+1}`, `y = |z|²`, is then fitted in
/// integrated form over the window, `y(t) - y(t_a) = 2Γ_fit ∫_{t_a}^t y^{N+1}`.
pub fn fit_damping(diagnostics: &TrajectoryDiagnostics, resonance: usize, opts: &FitOptions) -> Result<DampingFit> {
    let s = &diagnostics.samples;
    let unreliable = |why: String| Error::FitUnreliable(why);
    if s.len() < opts.min_samples {
        return Err(unreliable(format!("{} samples, need {}", s.len(), opts.min_samples)));
    }
    let peak = s.iter().map(|x| x.z.norm()).fold(0.0, f64::max);
    if peak < 1e-8 {
        return Err(unreliable(format!("no internal-mode signal (max |z| = {peak:.1e})")));
    }
    let t_all: Vec<f64> = s.iter().map(|x| x.t).collect();
    let dt = (t_all[t_all.len() - 1] - t_all[0]) / (t_all.len() - 1) as f64;
    let frequency = rotation_rate(s);
    let mut y: Vec<f64> = s.iter().map(|x| x.z.norm_sqr()).collect();
    if opts.smoothing_passes > 0 && frequency > 0.0 {
        let width = 2.0 * PI / frequency / dt;
        if width >= 1.0 {
            for _ in 0..opts.smoothing_passes {
                y = period_average(&y, width);
            }
        }
    }
    let keep: Vec<usize> = (0..y.len()).filter(|&i| y[i].is_finite()).collect();
    if keep.len() < opts.min_samples {
        return Err(unreliable(format!("window too short after smoothing ({} samples)", keep.len())));
    }
    let t: Vec<f64> = keep.iter().map(|&i| t_all[i]).collect();
    let y: Vec<f64> = keep.iter().map(|&i| y[i]).collect();
    if y.iter().any(|v| *v <= 0.0) {
        return Err(unreliable("smoothed amplitude vanishes".into()));
    }
    let p = resonance as i32 + 1;
    let x: Vec<f64> = y.iter().map(|v| math::powi(*v, p)).collect();

    let mut best: Option<(f64, usize, f64, f64)> = None;
    for &frac in &opts.starts {
        let a = math::floor(frac * t.len() as f64) as usize;
        if t.len() - a < opts.min_samples {
            continue;
        }
        let mut integral = Vec::with_capacity(t.len() - a);
        let mut acc = 0.0;
        integral.push(0.0);
        for i in a + 1..t.len() {
            acc += (t[i] - t[i - 1]) * (x[i] + x[i - 1]);
            integral.push(acc);
        }
        let dy: Vec<f64> = y[a..].iter().map(|v| v - y[a]).collect();
        if dy.iter().all(|v| *v == 0.0) {
            continue;
        }
        let (g, res, ss) = origin_fit(&integral, &dy);
        if best.is_none_or(|b| res < b.0) {
            let sxx: f64 = integral.iter().map(|v| v * v).sum();
            best = Some((res, a, g, math::sqrt(ss / (dy.len() - 1) as f64 / sxx)));
        }
    }
    let (residual, a, gamma_fit, sigma) = best.ok_or_else(|| unreliable("no admissible fit window".into()))?;
    if !(residual <= opts.max_residual) {
        return Err(unreliable(format!("pure-power residual {residual:.3}")));
    }
    // smoothed samples are correlated over about one period
    let corr = if frequency > 0.0 { (2.0 * PI / frequency / dt).max(1.0) } else { 1.0 };
    let confidence = 2.0 * sigma * math::sqrt(corr);

    // free exponent: golden-section search on the linearity of y^{1-q/2}
    let (tw, yw) = (&t[a..], &y[a..]);
    let target = 2.0 * p as f64;
    let (mut lo, mut hi) = (target - 3.0, target + 3.0);
    let g = 0.5 * (math::sqrt(5.0) - 1.0);
    let (mut c, mut d) = (hi - g * (hi - lo), lo + g * (hi - lo));
    let (mut fc, mut fd) = (power_law_residual(tw, yw, c), power_law_residual(tw, yw, d));
    for _ in 0..80 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = power_law_residual(tw, yw, c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = power_law_residual(tw, yw, d);
        }
    }
    let exponent = 0.5 * (lo + hi);
    Ok(DampingFit {
        gamma_fit,
        confidence,
        exponent,
        exponent_error: (exponent - target).abs(),
        window: (t[a], t[t.len() - 1]),
        samples: t.len() - a,
        residual,
        frequency,
        damping_sign: if gamma_fit < 0.0 { 1 } else { -1 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::make_initial_data;
    use crate::ground_state::GroundState;
    use crate::model::Nonlinearity;
    use alloc::vec;

    fn family() -> SystemFamily {
        let spec = Nonlinearity::Saturable { kappa: 1.0 };
        let grid = RadialGrid::new(3, 40.0, 800).unwrap();
        let gs = GroundState::compute(&spec, &grid, 0.72, None).unwrap();
        let sys = LinearizedSystem::build(&spec, gs, &SpectrumOptions::default()).unwrap();
        SystemFamily::around(sys).unwrap()
    }

    #[test]
    fn ground_state_is_recovered() {
        let mut fam = family();
        let g0 = 0.7;
        let rot = C64::new(math::cos(g0), math::sin(g0));
        let u: Vec<C64> = fam.base().ground.phi.iter().map(|p| rot * *p).collect();
        let st = decompose(&u, &mut fam, (0.73, 0.6)).unwrap();
        assert!((st.omega - 0.72).abs() < 1e-10, "{}", st.omega);
        assert!((st.gamma - g0).abs() < 1e-10);
        assert!(st.z.norm() < 1e-10 && st.f.max_abs() < 1e-10);
    }

    #[test]
    fn initial_data_round_trip_and_basin() {
        let mut fam = family();
        let z0 = C64::new(0.05, 0.0);
        let data = make_initial_data(fam.base(), z0, None).unwrap();
        let st = decompose(&data.u, &mut fam, (0.72, 0.0)).unwrap();
        assert!((st.z - z0).norm() < 1e-8, "{}", st.z);
        assert!((st.omega - 0.72).abs() < 1e-8);
        assert!(st.orthogonality_residual < 1e-9);
        let moved = decompose(&data.u, &mut fam, (0.74, 0.1)).unwrap();
        assert!((moved.z - st.z).norm() < 1e-8 && (moved.omega - st.omega).abs() < 1e-8);
        assert!((moved.gamma - st.gamma).abs() < 1e-8);
    }

    #[test]
    fn compose_then_decompose_off_lattice() {
        let mut fam = family();
        let base = fam.base().clone();
        let f0: Vec<C64> = (0..base.grid().len())
            .map(|j| {
                let r = base.grid().r(j);
                C64::new(0.01, 0.004) * math::exp(-0.3 * (r - 3.0) * (r - 3.0))
            })
            .collect();
        let omega = 0.72 + 0.37 * 2e-3 * 0.72;
        let exact = base.at_omega(omega, &SpectrumOptions::default()).unwrap();
        let f = exact.projection.project(&SpinorField::lift(&f0));
        // the interpolated frame against the exact system
        let frame = fam.frame(omega).unwrap();
        let dev = frame.phi.iter().zip(&exact.ground.phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-10 * exact.ground.phi[0], "{dev}");
        assert!(frame.xi.sub(&exact.xi).max_abs() < 1e-7 * exact.xi.max_abs());
        let z = C64::new(0.02, -0.03);
        let u = compose(&mut fam, omega, 1.3, z, Some(&f)).unwrap();
        let st = decompose(&u, &mut fam, (0.72, 1.2)).unwrap();
        assert!((st.omega - omega).abs() < 1e-8, "{}", st.omega - omega);
        assert!((st.z - z).norm() < 1e-8, "{}", (st.z - z).norm());
        assert!((st.gamma - 1.3).abs() < 1e-8);
        assert!(st.f.conjugation_defect() < 1e-14);
    }

    #[test]
    fn gauge_covariance() {
        let mut fam = family();
        let data = make_initial_data(fam.base(), C64::new(0.03, 0.02), None).unwrap();
        let a = decompose(&data.u, &mut fam, (0.72, 0.0)).unwrap();
        let alpha = 2.1;
        let rot = C64::new(math::cos(alpha), math::sin(alpha));
        let u: Vec<C64> = data.u.iter().map(|x| rot * x).collect();
        let b = decompose(&u, &mut fam, (0.72, alpha)).unwrap();
        assert!((b.gamma - a.gamma - alpha).abs() < 1e-10);
        assert!((b.omega - a.omega).abs() < 1e-10);
        assert!((b.z.norm() - a.z.norm()).abs() < 1e-10);
        let g = *fam.grid();
        assert!((g.h1_norm_c(&b.f.a) - g.h1_norm_c(&a.f.a)).abs() < 1e-10);
    }

    fn synthetic(lambda: f64, c: f64, n: usize, z0: f64, dt: f64, steps: usize) -> TrajectoryDiagnostics {
        // exact solution of ż = -iλz - c|z|^{2N}z
        let k = n as f64;
        let samples = (0..steps)
            .map(|i| {
                let t = i as f64 * dt;
                let amp = math::powf(math::powf(z0, -2.0 * k) + 2.0 * k * c * t, -0.5 / k);
                let z = C64::new(math::cos(lambda * t), -math::sin(lambda * t)) * amp;
                DiagnosticSample {
                    t,
                    z,
                    omega: 1.0,
                    gamma: t,
                    lambda,
                    f_h1: 0.0,
                    f_weighted: 0.0,
                    running_integral: 0.0,
                    orthogonality_residual: 0.0,
                }
            })
            .collect();
        TrajectoryDiagnostics { resonance: n, samples, ..Default::default() }
    }

    #[test]
    fn synthetic_ode_damping_is_recovered() {
        for n in [1usize, 2] {
            let c = 0.4;
            let d = synthetic(0.3, c, n, 0.5, 0.5, 2000);
            let fit = fit_damping(&d, n, &FitOptions::default()).unwrap();
            assert!((-fit.gamma_fit - c).abs() < 0.02 * c, "{fit:?}");
            assert!(fit.exponent_error < 0.1, "{fit:?}");
            assert_eq!(fit.damping_sign, 1);
        }
    }

    #[test]
    fn standing_wave_fit_is_unreliable() {
        let d = synthetic(0.3, 0.0, 1, 0.0, 0.5, 500);
        assert!(matches!(fit_damping(&d, 1, &FitOptions::default()), Err(Error::FitUnreliable(_))));
        let short = synthetic(0.3, 0.4, 1, 0.5, 0.5, 30);
        assert!(matches!(fit_damping(&short, 1, &FitOptions::default()), Err(Error::FitUnreliable(_))));
    }

    #[test]
    fn tube_exit_is_reported() {
        let mut fam = family();
        let u = vec![C64::new(0.0, 0.0); fam.grid().len()];
        let mut tr = Tracker::new(&mut fam, TrackerOptions::default());
        assert!(tr.push(1.5, &u).is_err());
        assert_eq!(tr.finish().tube_exit.map(|x| x.0), Some(1.5));
    }
}
