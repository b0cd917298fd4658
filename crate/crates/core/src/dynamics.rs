//! Time evolution of `iu_t + Δu + β(|u|²)u = 0` on the radial grid.
//!
//! Both schemes work on `v = r^{(d-1)/2}u`. Crank-Nicolson uses the secant nonlinearity
//! `(G(|u^{n+1}|²) - G(|u^n|²)) / (|u^{n+1}|² - |u^n|²)`, which conserves the discrete mass
//! and energy exactly; the implicit step is solved by fixed-point sweeps. Strang
//! splitting alternates Cayley half-steps of the linear part with the exact phase
//! rotation of the nonlinear part.
//!
//! Radiation leaves through a complex absorbing layer `-iW(r)` on the outer part of the
//! grid. For Crank-Nicolson the mass removed by the layer is accumulated exactly, so
//! `mass + absorbed` is conserved at any time.

use alloc::vec;
use alloc::vec::Vec;

use crate::banded::Tridiagonal;
use crate::linearization::LinearizedSystem;
use crate::model::{Kinetic, Nonlinearity, RadialGrid, SpinorField};
use crate::{Error, Result, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    CrankNicolson,
    StrangSplit,
}

#[derive(Clone, Copy, Debug)]
pub struct EvolutionConfig {
    pub dt: f64,
    pub t_final: f64,
    /// Observer call every `stride` steps.
    pub stride: usize,
    pub scheme: Scheme,
    /// Layer thickness as a fraction of `R`, in `[0, 0.25]`.
    pub absorber_width: f64,
    /// Peak of `W`; the profile rises like the cube of the depth into the layer.
    pub absorber_strength: f64,
    pub fixed_point_tol: f64,
    pub min_sweeps: usize,
    pub max_sweeps: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            dt: 0.05,
            t_final: 100.0,
            stride: 20,
            scheme: Scheme::CrankNicolson,
            absorber_width: 0.15,
            absorber_strength: 0.4,
            fixed_point_tol: 1e-13,
            min_sweeps: 2,
            max_sweeps: 30,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter("dt must be positive".into()));
        }
        if !(self.t_final >= 0.0) {
            return Err(Error::InvalidParameter("t_final must be nonnegative".into()));
        }
        if self.stride == 0 {
            return Err(Error::InvalidParameter("stride must be at least 1".into()));
        }
        if !(0.0..=0.25).contains(&self.absorber_width) {
            return Err(Error::InvalidParameter("absorber width must lie in [0, 0.25]".into()));
        }
        if !(self.absorber_strength >= 0.0) {
            return Err(Error::InvalidParameter("absorber strength must be nonnegative".into()));
        }
        if self.max_sweeps < self.min_sweeps.max(1) {
            return Err(Error::InvalidParameter("max_sweeps below min_sweeps".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        let n = self.t_final / self.dt;
        let r = libm::round(n);
        if (n - r).abs() < 1e-9 * n.max(1.0) {
            r as usize
        } else {
            libm::ceil(n) as usize
        }
    }
}

/// `W(r)` on the grid nodes.
pub fn absorber_profile(grid: &RadialGrid, width: f64, strength: f64) -> Vec<f64> {
    let r_max = grid.radius();
    let start = r_max * (1.0 - width);
    (0..grid.len())
        .map(|j| {
            let r = grid.r(j);
            if width > 0.0 && r > start {
                let x = (r - start) / (r_max - start);
                strength * x * x * x
            } else {
                0.0
            }
        })
        .collect()
}

/// `‖u‖²`.
pub fn mass(grid: &RadialGrid, u: &[C64]) -> f64 {
    let w = grid.weights();
    u.iter().zip(&w).map(|(x, w)| x.norm_sqr() * w).sum()
}

/// `∫ |∇u|² - G(|u|²)`, with the gradient term taken from the discrete Laplacian.
pub fn energy(spec: &Nonlinearity, grid: &RadialGrid, u: &[C64]) -> f64 {
    let w = grid.weights();
    let pot: f64 = u.iter().zip(&w).map(|(x, w)| spec.primitive(x.norm_sqr()) * w).sum();
    grid.kinetic_form(u) - pot
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub t: f64,
    pub step: usize,
    pub mass: f64,
    pub energy: f64,
    /// Mass removed by the absorbing layer so far.
    pub absorbed: f64,
    pub max_abs: f64,
    pub sweeps: usize,
}

pub struct Evolution {
    spec: Nonlinearity,
    grid: RadialGrid,
    kin: Kinetic,
    absorber: Vec<f64>,
    cfg: EvolutionConfig,
    scales: Vec<f64>,
    v: Vec<C64>,
    v_prev: Option<Vec<C64>>,
    t: f64,
    step: usize,
    absorbed: f64,
    last_sweeps: usize,
}

impl Evolution {
    pub fn new(spec: &Nonlinearity, grid: &RadialGrid, u0: &[C64], cfg: &EvolutionConfig) -> Result<Self> {
        cfg.validate()?;
        grid.check_len(u0.len())?;
        let scales = grid.scales();
        let v = u0.iter().zip(&scales).map(|(u, s)| u * s).collect();
        Ok(Evolution {
            spec: *spec,
            grid: *grid,
            kin: grid.kinetic(),
            absorber: absorber_profile(grid, cfg.absorber_width, cfg.absorber_strength),
            cfg: *cfg,
            scales,
            v,
            v_prev: None,
            t: 0.0,
            step: 0,
            absorbed: 0.0,
            last_sweeps: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }
    pub fn steps_taken(&self) -> usize {
        self.step
    }
    pub fn grid(&self) -> &RadialGrid {
        &self.grid
    }
    pub fn absorbed(&self) -> f64 {
        self.absorbed
    }

    pub fn field(&self) -> Vec<C64> {
        self.v.iter().zip(&self.scales).map(|(v, s)| v / s).collect()
    }

    pub fn diagnostics(&self) -> StepDiagnostics {
        let u = self.field();
        StepDiagnostics {
            t: self.t,
            step: self.step,
            mass: mass(&self.grid, &u),
            energy: energy(&self.spec, &self.grid, &u),
            absorbed: self.absorbed,
            max_abs: u.iter().map(|x| x.norm()).fold(0.0, f64::max),
            sweeps: self.last_sweeps,
        }
    }

    /// `(I + i dt/2 (K - B - iW)) x = rhs` and the matching explicit factor.
    fn cayley(&self, b: &[f64], dt: f64, v: &[C64]) -> Vec<C64> {
        let n = v.len();
        let c = C64::new(0.0, 0.5 * dt);
        let kin = &self.kin;
        let mut rhs = vec![C64::new(0.0, 0.0); n];
        for j in 0..n {
            let d = C64::new(kin.diag[j] - b[j], -self.absorber[j]);
            let mut t = d * v[j];
            if j > 0 {
                t += v[j - 1] * kin.off[j - 1];
            }
            if j + 1 < n {
                t += v[j + 1] * kin.off[j];
            }
            rhs[j] = v[j] - c * t;
        }
        let diag: Vec<C64> =
            (0..n).map(|j| C64::new(1.0, 0.0) + c * C64::new(kin.diag[j] - b[j], -self.absorber[j])).collect();
        let off: Vec<C64> = kin.off.iter().map(|o| c * o).collect();
        Tridiagonal::new(&off, &diag, &off).solve_in_place(&mut rhs);
        rhs
    }

    fn absorbed_in(&self, dt: f64, a: &[C64], b: &[C64]) -> f64 {
        let h = self.grid.sphere() * self.grid.h();
        2.0 * dt * h * (0..a.len()).map(|j| self.absorber[j] * (0.5 * (a[j] + b[j])).norm_sqr()).sum::<f64>()
    }

    fn step_cn(&mut self) -> Result<()> {
        let dt = self.cfg.dt;
        let n = self.v.len();
        let s0: Vec<f64> = (0..n).map(|j| (self.v[j] / self.scales[j]).norm_sqr()).collect();
        let mut guess: Vec<C64> = match &self.v_prev {
            Some(p) => (0..n).map(|j| self.v[j] * 2.0 - p[j]).collect(),
            None => self.v.clone(),
        };
        let scale = self.v.iter().map(|x| x.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut sweeps = 0;
        let mut last_change = f64::INFINITY;
        loop {
            sweeps += 1;
            let b: Vec<f64> = (0..n)
                .map(|j| self.spec.secant(s0[j], (guess[j] / self.scales[j]).norm_sqr()))
                .collect();
            let next = self.cayley(&b, dt, &self.v);
            let change = next.iter().zip(&guess).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            guess = next;
            let tol = self.cfg.fixed_point_tol * scale;
            // below `tol` or stalled at roundoff just above it
            let stalled = change <= 1e3 * tol && change >= 0.5 * last_change;
            if sweeps >= self.cfg.min_sweeps && (change <= tol || stalled) {
                break;
            }
            last_change = change;
            if sweeps >= self.cfg.max_sweeps {
                return Err(Error::NonlinearSolver(self.step));
            }
        }
        self.absorbed += self.absorbed_in(dt, &self.v, &guess);
        self.last_sweeps = sweeps;
        self.v_prev = Some(core::mem::replace(&mut self.v, guess));
        Ok(())
    }

    fn rotate(&mut self, dt: f64) {
        for (v, s) in self.v.iter_mut().zip(&self.scales) {
            let b = self.spec.beta((*v / s).norm_sqr());
            *v *= C64::new(libm::cos(b * dt), libm::sin(b * dt));
        }
    }

    fn step_strang(&mut self) {
        let dt = self.cfg.dt;
        let zero = vec![0.0; self.v.len()];
        let half = self.cayley(&zero, 0.5 * dt, &self.v);
        self.absorbed += self.absorbed_in(0.5 * dt, &self.v, &half);
        self.v = half;
        self.rotate(dt);
        let half = self.cayley(&zero, 0.5 * dt, &self.v);
        self.absorbed += self.absorbed_in(0.5 * dt, &self.v, &half);
        self.v = half;
        self.last_sweeps = 1;
    }

    pub fn advance(&mut self) -> Result<()> {
        match self.cfg.scheme {
            Scheme::CrankNicolson => self.step_cn()?,
            Scheme::StrangSplit => self.step_strang(),
        }
        self.step += 1;
        self.t = self.step as f64 * self.cfg.dt;
        Ok(())
    }

    /// Runs to `t_final`, calling `observer(t, u)` at `t = 0` and every `stride` steps
    /// (and at the final step).
    pub fn run<F>(&mut self, mut observer: F) -> Result<Vec<StepDiagnostics>>
    where
        F: FnMut(f64, &[C64]) -> Result<()>,
    {
        let steps = self.cfg.steps();
        let mut out = vec![self.diagnostics()];
        observer(self.t, &self.field())?;
        for k in 1..=steps {
            self.advance()?;
            if k % self.cfg.stride == 0 || k == steps {
                out.push(self.diagnostics());
                observer(self.t, &self.field())?;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<Vec<C64>>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Evolves and stores every output snapshot.
pub fn evolve(spec: &Nonlinearity, grid: &RadialGrid, u0: &[C64], cfg: &EvolutionConfig) -> Result<Trajectory> {
    let mut ev = Evolution::new(spec, grid, u0, cfg)?;
    let mut times = Vec::new();
    let mut fields = Vec::new();
    let diagnostics = ev.run(|t, u| {
        times.push(t);
        fields.push(u.to_vec());
        Ok(())
    })?;
    Ok(Trajectory { times, fields, diagnostics })
}

#[derive(Clone, Debug)]
pub struct InitialData {
    pub u: Vec<C64>,
    /// `f0` had a component outside the continuous subspace and was projected.
    pub projected: bool,
    /// `|z0| > 0.3`.
    pub large_amplitude: bool,
}

/// `u0 = φ + [z0 ξ + z̄0 σ1ξ + P_c F0]_1` with `F0 = (f0, f̄0)`.
pub fn make_initial_data(system: &LinearizedSystem, z0: C64, f0: Option<&[C64]>) -> Result<InitialData> {
    let grid = system.grid();
    let mut r = system.xi.scale(z0);
    r.axpy(z0.conj(), &system.xi.sigma1());
    let mut projected = false;
    if let Some(f0) = f0 {
        grid.check_len(f0.len())?;
        let f = SpinorField::lift(f0);
        let pf = system.projection.project(&f);
        let scale = f.max_abs().max(f64::MIN_POSITIVE);
        if pf.sub(&f).max_abs() > 1e-12 * scale {
            projected = true;
        }
        r.axpy(C64::new(1.0, 0.0), &pf);
    }
    let u = system.ground.phi.iter().zip(&r.a).map(|(p, x)| C64::new(*p, 0.0) + x).collect();
    Ok(InitialData { u, projected, large_amplitude: z0.norm() > 0.3 })
}
