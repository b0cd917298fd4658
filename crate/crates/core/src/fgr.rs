//! Fermi golden rule coefficient `Γ = Im⟨R(μ+i0)Φ_{N+1,0}, γ_{0,N}⟩` at `μ = (N+1)λ`.
//!
//! With `Ψ_{N+1,0} = -R(μ+i0)Φ_{N+1,0}`, the resonant term of the internal-mode equation
//! gives `d|z|²/dt = -2Γ|z|^{2N+2}` to leading order, so `Γ > 0` means damping.

use alloc::string::String;
use alloc::vec::Vec;

use crate::ground_state::GroundStateBranch;
use crate::linearization::{LinearizedSystem, SpectrumOptions};
use crate::model::{bilinear, Nonlinearity, SpinorField};
use crate::normal_form::{build_sources, NormalFormOptions, NormalFormPackage};
use crate::resolvent::{delta_form, solve_outgoing, OutgoingMethod};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct FgrOptions {
    pub normal_form: NormalFormOptions,
    /// Hypothesis threshold on `|Γ|`.
    pub threshold: f64,
    /// Relative noise floor against `⟨|Φ_{N+1,0}|, |γ_{0,N}|⟩`.
    pub noise_factor: f64,
    /// Allowed relative disagreement between the two outgoing methods.
    pub method_tolerance: f64,
}

impl Default for FgrOptions {
    fn default() -> Self {
        FgrOptions { normal_form: NormalFormOptions::default(), threshold: 0.0, noise_factor: 1e-3, method_tolerance: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FgrReport {
    pub omega: f64,
    pub lambda: f64,
    pub resonance: usize,
    pub mu: f64,
    pub method: OutgoingMethod,
    /// From the outgoing solve with `method`.
    pub gamma_resolvent: f64,
    /// From the other outgoing method.
    pub gamma_alternate: f64,
    /// `π⟨Φ, σ_3ψ⟩⟨ψ, γ⟩` with the energy-normalized generalized eigenfunction.
    pub gamma_delta: f64,
    pub method_error: f64,
    pub delta_error: f64,
    pub noise_floor: f64,
    pub eps_ratio: Option<f64>,
    pub degenerate: bool,
    /// `|Γ| > threshold` and not degenerate.
    pub hypothesis: bool,
}

impl FgrReport {
    /// `+1` for damping, `-1` for growth, `0` when degenerate.
    pub fn sign(&self) -> i32 {
        if self.degenerate {
            0
        } else if self.gamma_resolvent > 0.0 {
            1
        } else {
            -1
        }
    }

    /// Worst of the two cross-method errors.
    pub fn cross_error(&self) -> f64 {
        self.method_error.max(self.delta_error)
    }
}

fn other(method: OutgoingMethod) -> OutgoingMethod {
    match method {
        OutgoingMethod::OutgoingBc => OutgoingMethod::EpsExtrapolation,
        OutgoingMethod::EpsExtrapolation => OutgoingMethod::OutgoingBc,
    }
}

fn relative(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn compute_gamma(system: &LinearizedSystem, package: &NormalFormPackage, opts: &FgrOptions) -> Result<FgrReport> {
    let cgrid = package.continuum_grid;
    let ham = system.hamiltonian.extended(&cgrid)?;
    let n = cgrid.len();
    let phi = package.resonant_source.resized(n);
    let gamma = package.resonant_dual.resized(n);
    let mu = package.mu;

    let g1 = -bilinear(&cgrid, &package.resonant_corrector_full, &gamma).im;
    let alt = solve_outgoing(&ham, mu, &phi, other(package.method), &opts.normal_form.resolvent)?;
    let g2 = bilinear(&cgrid, &alt.psi, &gamma).im;
    let gd = delta_form(&ham, mu, &phi, &gamma)?;

    let abs = |f: &SpinorField| SpinorField {
        a: f.a.iter().map(|x| crate::C64::new(x.norm(), 0.0)).collect(),
        b: f.b.iter().map(|x| crate::C64::new(x.norm(), 0.0)).collect(),
    };
    let scale = bilinear(&cgrid, &abs(&phi), &abs(&gamma)).re;
    let floor = opts.noise_factor * scale;
    let degenerate = g1.abs() <= floor;
    let method_error = relative(g1, g2, floor);
    let delta_error = relative(g1, gd, floor);
    if !degenerate && method_error > opts.method_tolerance {
        return Err(Error::LimitingAbsorptionUnresolved(method_error));
    }
    let eps_ratio = package.eps_ratio.or(alt.eps_ratio);
    Ok(FgrReport {
        omega: system.omega(),
        lambda: system.lambda,
        resonance: package.resonance,
        mu,
        method: package.method,
        gamma_resolvent: g1,
        gamma_alternate: g2,
        gamma_delta: gd,
        method_error,
        delta_error,
        noise_floor: floor,
        eps_ratio,
        degenerate,
        hypothesis: !degenerate && g1.abs() > opts.threshold,
    })
}

/// Builds the normal form at the system's own resonance index and evaluates `Γ`.
pub fn gamma_at(system: &LinearizedSystem, opts: &FgrOptions) -> Result<(NormalFormPackage, FgrReport)> {
    let pkg = build_sources(system, system.resonance, &opts.normal_form)?;
    let report = compute_gamma(system, &pkg, opts)?;
    Ok((pkg, report))
}

#[derive(Clone, Debug)]
pub struct ScanEntry {
    pub omega: f64,
    pub result: core::result::Result<FgrReport, Error>,
}

#[derive(Clone, Debug)]
pub struct GammaScan {
    pub entries: Vec<ScanEntry>,
    pub threshold: f64,
}

impl GammaScan {
    pub fn reports(&self) -> impl Iterator<Item = &FgrReport> {
        self.entries.iter().filter_map(|e| e.result.as_ref().ok())
    }

    /// `inf |Γ|` over the successful entries.
    pub fn inf_gamma(&self) -> Option<f64> {
        self.reports().map(|r| r.gamma_resolvent.abs()).reduce(f64::min)
    }

    /// Every entry succeeded and passes the threshold.
    pub fn verdict(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| matches!(&e.result, Ok(r) if r.hypothesis))
    }

    /// No sign change between consecutive non-degenerate reports.
    pub fn sign_constant(&self) -> bool {
        let signs: Vec<i32> = self.reports().map(|r| r.sign()).filter(|s| *s != 0).collect();
        signs.windows(2).all(|w| w[0] == w[1])
    }

    pub fn failures(&self) -> Vec<(f64, String)> {
        self.entries
            .iter()
            .filter_map(|e| e.result.as_ref().err().map(|err| (e.omega, alloc::format!("{err}"))))
            .collect()
    }
}

/// `Γ(ω, ω)` along a branch; per-point failures are recorded and the scan continues.
pub fn gamma_scan(
    spec: &Nonlinearity,
    branch: &GroundStateBranch,
    spectrum: &SpectrumOptions,
    opts: &FgrOptions,
) -> GammaScan {
    let entries = branch
        .samples
        .iter()
        .map(|s| {
            let omega = s.state.omega;
            let result = LinearizedSystem::build(spec, s.state.clone(), spectrum).and_then(|sys| gamma_at(&sys, opts).map(|(_, r)| r));
            ScanEntry { omega, result }
        })
        .collect();
    GammaScan { entries, threshold: opts.threshold }
}
