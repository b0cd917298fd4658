//! Command pipelines. Each command writes its artifacts into the output directory and
//! returns whether every hypothesis it checks held.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use solfgr_core::dynamics::{self, Evolution, StepDiagnostics};
use solfgr_core::fgr::{self, FgrReport};
use solfgr_core::ground_state::{check_h5, continue_branch, GroundState, GroundStateBranch};
use solfgr_core::linearization::LinearizedSystem;
use solfgr_core::modulation_tracker::{fit_damping, SystemFamily, Tracker, TrajectoryDiagnostics};
use solfgr_core::normal_form::build_sources;
use solfgr_core::C64;

use crate::config::{ResonanceChoice, RunConfig};
use crate::error::{LabError, LabResult};
use crate::formats::{self, Provenance, SnapshotHeader, SnapshotReader, SnapshotWriter};

/// What a command reports back to the caller.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub passed: bool,
    pub summary: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: String) -> Self {
        Verdict { pass, detail }
    }
}

pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub jobs: usize,
    pub provenance: Provenance,
}

impl Context {
    pub fn new(config: RunConfig, out: Option<PathBuf>, jobs: usize) -> LabResult<Self> {
        let out = out.unwrap_or_else(|| PathBuf::from(&config.output.dir));
        std::fs::create_dir_all(&out).map_err(|e| LabError::io(&out, e))?;
        let provenance = Provenance { config_hash: config.config_hash(), grid_hash: config.grid_hash() };
        Ok(Context { config, out, jobs: jobs.max(1), provenance })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ground(&self) -> LabResult<GroundState> {
        let c = &self.config;
        Ok(GroundState::compute(&c.model(), &c.grid()?, c.ground_state.omega, None)?)
    }

    fn system(&self) -> LabResult<LinearizedSystem> {
        Ok(LinearizedSystem::build(&self.config.model(), self.ground()?, &self.config.spectrum_options())?)
    }

    fn resonance(&self, system: &LinearizedSystem) -> usize {
        match self.config.fgr.resonance {
            ResonanceChoice::Fixed(n) => n,
            ResonanceChoice::Auto(_) => system.resonance,
        }
    }

    fn csv(&self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> LabResult<()> {
        formats::write_csv(&self.path(name), &self.provenance, header, rows)
    }

    /// A previously written summary with matching provenance, `None` if absent.
    fn reuse<T: DeserializeOwned>(&self, name: &str) -> LabResult<Option<T>> {
        let path = self.path(name);
        if !path.exists() {
            return Ok(None);
        }
        let value: serde_json::Value = formats::read_json(&path)?;
        let prov: Provenance = serde_json::from_value(value["provenance"].clone())
            .map_err(|e| LabError::Format { path: path.clone(), detail: e.to_string() })?;
        self.check_provenance(&path, &prov)?;
        let parsed = serde_json::from_value(value).map_err(|e| LabError::Format { path: path.clone(), detail: e.to_string() })?;
        Ok(Some(parsed))
    }

    fn check_provenance(&self, path: &Path, prov: &Provenance) -> LabResult<()> {
        if prov.grid_hash != self.provenance.grid_hash {
            return Err(LabError::Stale { path: path.to_path_buf(), detail: "grid hash differs from the current config".into() });
        }
        if prov.config_hash != self.provenance.config_hash {
            return Err(LabError::Stale { path: path.to_path_buf(), detail: "config hash differs from the current config".into() });
        }
        Ok(())
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect(),
    }
}

// ------------------------------------------------------------------ ground state

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundStateSummary {
    pub provenance: Provenance,
    pub omega: f64,
    pub mass: f64,
    pub dmass: f64,
    pub origin_value: f64,
    pub residual: f64,
    pub branch_points: usize,
    pub branch_truncated: Option<String>,
    pub slope_disagreement: f64,
    pub h5_negative_count: usize,
    pub h5_kernel_gap: f64,
    pub h5_lowest: f64,
    pub h3: Verdict,
    pub h4: Verdict,
    pub h5: Verdict,
}

impl GroundStateSummary {
    pub fn passed(&self) -> bool {
        self.h3.pass && self.h4.pass && self.h5.pass
    }
}

pub fn cmd_ground_state(ctx: &Context) -> LabResult<Outcome> {
    let s = ground_state_summary(ctx)?;
    Ok(Outcome {
        passed: s.passed(),
        summary: format!("H3 {}  H4 {}  H5 {}", pf(s.h3.pass), pf(s.h4.pass), pf(s.h5.pass)),
    })
}

fn ground_state_summary(ctx: &Context) -> LabResult<GroundStateSummary> {
    let c = &ctx.config;
    let spec = c.model();
    let grid = c.grid()?;
    let gs = ctx.ground()?;
    let g = &c.ground_state;
    let branch = if g.branch_samples > 0 {
        continue_branch(&spec, &linspace(g.branch_min, g.branch_max, g.branch_samples), &grid)?
    } else {
        GroundStateBranch { samples: vec![], truncated: None }
    };
    let h5 = check_h5(&spec, gs.omega, &gs.phi, &grid)?;

    let mut rows: Vec<Vec<f64>> = branch
        .samples
        .iter()
        .map(|b| vec![b.state.omega, b.state.mass, b.state.dmass, b.dmass_fd, b.state.origin_value(), b.state.residual])
        .collect();
    rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
    ctx.csv("branch.csv", &["omega", "mass", "dmass", "dmass_fd", "phi_origin", "residual"], &rows)?;
    let profile: Vec<Vec<f64>> = (0..grid.len()).map(|j| vec![grid.r(j), gs.phi[j], gs.dphi[j], gs.d2phi[j]]).collect();
    ctx.csv("profile.csv", &["r", "phi", "dphi", "d2phi"], &profile)?;

    let disagreement = branch.max_slope_disagreement();
    let h3 = Verdict::new(
        branch.truncated.is_none() && disagreement < 1e-3,
        match &branch.truncated {
            Some(why) => format!("continuation stopped: {why}"),
            None => format!(
                "{} branch points on [{}, {}], analytic vs difference slope within {:.1e}",
                branch.samples.len(),
                g.branch_min,
                g.branch_max,
                disagreement
            ),
        },
    );
    let min_slope = branch.samples.iter().map(|b| b.state.dmass).fold(gs.dmass, f64::min);
    let h4 = Verdict::new(
        gs.dmass > 0.0 && (branch.samples.is_empty() || branch.mass_slope_positive()),
        format!("min dM/domega = {min_slope:.6e}"),
    );
    let h5v = Verdict::new(
        h5.passes(g.h5_tol),
        format!("{} negative eigenvalue(s) of L+, kernel gap {:.3e}", h5.negative_count, h5.kernel_gap),
    );
    let summary = GroundStateSummary {
        provenance: ctx.provenance.clone(),
        omega: gs.omega,
        mass: gs.mass,
        dmass: gs.dmass,
        origin_value: gs.origin_value(),
        residual: gs.residual,
        branch_points: branch.samples.len(),
        branch_truncated: branch.truncated.clone(),
        slope_disagreement: disagreement,
        h5_negative_count: h5.negative_count,
        h5_kernel_gap: h5.kernel_gap,
        h5_lowest: h5.lowest,
        h3,
        h4,
        h5: h5v,
    };
    formats::write_json(&ctx.path("ground_state.json"), &summary)?;
    Ok(summary)
}

// ------------------------------------------------------------------ spectrum

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eigen {
    pub re: f64,
    pub im: f64,
    pub residual: f64,
    pub kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub provenance: Provenance,
    pub omega: f64,
    pub lambda: f64,
    pub resonance: usize,
    /// `min(ω - Nλ, (N+1)λ - ω) / ω`.
    pub margin: f64,
    pub krein_ratio: f64,
    pub kernel_residual: f64,
    pub generalized_kernel_residual: f64,
    pub mode_residual: f64,
    pub kernel_dim: usize,
    pub threshold_distance: f64,
    pub eigenvalues: Vec<Eigen>,
    pub h7: Verdict,
    pub h9_gap: Verdict,
}

pub fn cmd_spectrum(ctx: &Context) -> LabResult<Outcome> {
    let s = spectrum_summary(ctx, &ctx.system()?)?;
    Ok(Outcome {
        passed: s.h7.pass && s.h9_gap.pass,
        summary: format!("lambda = {:.6}  N = {}  H7 {}  H9(gap) {}", s.lambda, s.resonance, pf(s.h7.pass), pf(s.h9_gap.pass)),
    })
}

fn spectrum_summary(ctx: &Context, sys: &LinearizedSystem) -> LabResult<SpectrumSummary> {
    let omega = sys.omega();
    let n = sys.resonance;
    let lambda = sys.lambda;
    let margin = (omega - n as f64 * lambda).min((n + 1) as f64 * lambda - omega) / omega;
    let (k, c) = sys.kernel_residuals();
    let sp = &sys.spectrum;
    let h7 = Verdict::new(
        n >= 1 && margin > 1e-3,
        format!("N = {n}, {n} lambda < omega < {} lambda with relative margin {margin:.3e}", n + 1),
    );
    let h9 = Verdict::new(
        sp.gap_h9_holds(),
        if sp.is_inconclusive() {
            format!("possible threshold resonance, inconclusive ({} eigenvalue(s) near omega)", sp.near_threshold.len())
        } else {
            format!(
                "gap only: kernel dim {}, {} extra eigenvalue(s); embedded eigenvalues not checked",
                sp.kernel_dim,
                sp.extra().len()
            )
        },
    );
    let grid = sys.grid();
    let rows: Vec<Vec<f64>> = (0..grid.len())
        .map(|j| vec![grid.r(j), sys.xi.a[j].re, sys.xi.b[j].re, sys.dxi.a[j].re, sys.dxi.b[j].re])
        .collect();
    ctx.csv("internal_mode.csv", &["r", "xi1", "xi2", "dxi1", "dxi2"], &rows)?;
    let summary = SpectrumSummary {
        provenance: ctx.provenance.clone(),
        omega,
        lambda,
        resonance: n,
        margin,
        krein_ratio: sys.krein_ratio,
        kernel_residual: k,
        generalized_kernel_residual: c,
        mode_residual: sys.mode_residual(),
        kernel_dim: sp.kernel_dim,
        threshold_distance: sp.threshold_distance,
        eigenvalues: sp
            .eigenvalues
            .iter()
            .map(|e| Eigen { re: e.value.re, im: e.value.im, residual: e.residual, kind: format!("{:?}", e.kind).to_lowercase() })
            .collect(),
        h7,
        h9_gap: h9,
    };
    formats::write_json(&ctx.path("spectrum.json"), &summary)?;
    Ok(summary)
}

// ------------------------------------------------------------------ FGR

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub omega: f64,
    pub gamma: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FgrSummary {
    pub provenance: Provenance,
    pub omega: f64,
    pub lambda: f64,
    pub resonance: usize,
    pub mu: f64,
    pub method: String,
    pub gamma_resolvent: f64,
    pub gamma_alternate: f64,
    pub gamma_delta: f64,
    pub method_error: f64,
    pub delta_error: f64,
    pub noise_floor: f64,
    pub eps_ratio: Option<f64>,
    pub degenerate: bool,
    pub sign: i32,
    pub scan: Vec<ScanPoint>,
    pub scan_inf_gamma: Option<f64>,
    pub scan_sign_constant: Option<bool>,
    pub hypothesis: Verdict,
    pub cross_validation: Verdict,
}

pub fn cmd_fgr(ctx: &Context) -> LabResult<Outcome> {
    let s = fgr_summary(ctx, &ctx.system()?)?;
    Ok(Outcome {
        passed: s.hypothesis.pass && s.cross_validation.pass,
        summary: format!(
            "Gamma = {:.6e} (alt {:.6e}, delta {:.6e})  FGR {}",
            s.gamma_resolvent,
            s.gamma_alternate,
            s.gamma_delta,
            pf(s.hypothesis.pass)
        ),
    })
}

fn gamma_for(ctx: &Context, sys: &LinearizedSystem) -> LabResult<(solfgr_core::normal_form::NormalFormPackage, FgrReport)> {
    let opts = ctx.config.fgr_options();
    let n = ctx.resonance(sys);
    let pkg = build_sources(sys, n, &opts.normal_form)?;
    let report = fgr::compute_gamma(sys, &pkg, &opts)?;
    Ok((pkg, report))
}

fn fgr_summary(ctx: &Context, sys: &LinearizedSystem) -> LabResult<FgrSummary> {
    let c = &ctx.config;
    let (pkg, r) = gamma_for(ctx, sys)?;
    let cg = &pkg.continuum_grid;
    let psi = &pkg.resonant_corrector_full;
    let rows: Vec<Vec<f64>> = (0..cg.len())
        .map(|j| vec![cg.r(j), psi.a[j].re, psi.a[j].im, psi.b[j].re, psi.b[j].im])
        .collect();
    ctx.csv("resonant_corrector.csv", &["r", "re_psi1", "im_psi1", "re_psi2", "im_psi2"], &rows)?;

    let mut scan = Vec::new();
    let (mut inf, mut sign_constant) = (None, None);
    if c.fgr.scan_points > 0 {
        let omegas = linspace(c.ground_state.branch_min, c.ground_state.branch_max, c.fgr.scan_points);
        let result = gamma_scan_parallel(ctx, &omegas)?;
        inf = result.inf_gamma();
        sign_constant = Some(result.sign_constant());
        scan = result
            .entries
            .iter()
            .map(|e| match &e.result {
                Ok(r) => ScanPoint { omega: e.omega, gamma: Some(r.gamma_resolvent), error: None },
                Err(err) => ScanPoint { omega: e.omega, gamma: None, error: Some(err.to_string()) },
            })
            .collect();
        let rows: Vec<Vec<f64>> = scan.iter().map(|p| vec![p.omega, p.gamma.unwrap_or(f64::NAN)]).collect();
        ctx.csv("gamma_scan.csv", &["omega", "gamma"], &rows)?;
    }
    let tol = c.fgr.method_tolerance;
    let scan_ok = scan.is_empty() || (inf.is_some_and(|g| g > c.fgr.threshold) && scan.iter().all(|p| p.error.is_none()));
    let hypothesis = Verdict::new(
        r.hypothesis && scan_ok,
        format!(
            "|Gamma| = {:.4e} > threshold {:e}{}{}",
            r.gamma_resolvent.abs(),
            c.fgr.threshold,
            if r.degenerate { ", degenerate (below noise floor)" } else { "" },
            inf.map_or(String::new(), |g| format!(", inf over scan {g:.4e}"))
        ),
    );
    let cross = Verdict::new(
        r.method_error <= tol && r.delta_error <= tol,
        format!("resolvent methods differ by {:.2e}, delta form by {:.2e} (tolerance {tol})", r.method_error, r.delta_error),
    );
    let summary = FgrSummary {
        provenance: ctx.provenance.clone(),
        omega: r.omega,
        lambda: r.lambda,
        resonance: r.resonance,
        mu: r.mu,
        method: format!("{:?}", r.method),
        gamma_resolvent: r.gamma_resolvent,
        gamma_alternate: r.gamma_alternate,
        gamma_delta: r.gamma_delta,
        method_error: r.method_error,
        delta_error: r.delta_error,
        noise_floor: r.noise_floor,
        eps_ratio: r.eps_ratio,
        degenerate: r.degenerate,
        sign: r.sign(),
        scan,
        scan_inf_gamma: inf,
        scan_sign_constant: sign_constant,
        hypothesis,
        cross_validation: cross,
    };
    formats::write_json(&ctx.path("fgr.json"), &summary)?;
    Ok(summary)
}

/// `Γ` along the branch, split into contiguous chunks over `--jobs` workers.
fn gamma_scan_parallel(ctx: &Context, omegas: &[f64]) -> LabResult<fgr::GammaScan> {
    let c = &ctx.config;
    let spec = c.model();
    let grid = c.grid()?;
    let branch = continue_branch(&spec, omegas, &grid)?;
    let chunk = branch.samples.len().div_ceil(ctx.jobs).max(1);
    let parts: Vec<GroundStateBranch> = branch
        .samples
        .chunks(chunk)
        .map(|s| GroundStateBranch { samples: s.to_vec(), truncated: None })
        .collect();
    let sp = c.spectrum_options();
    let opts = c.fgr_options();
    let scans: Vec<fgr::GammaScan> = std::thread::scope(|scope| {
        let handles: Vec<_> = parts.iter().map(|b| scope.spawn(|| fgr::gamma_scan(&spec, b, &sp, &opts))).collect();
        handles.into_iter().map(|h| h.join().expect("scan worker panicked")).collect()
    });
    Ok(fgr::GammaScan { entries: scans.into_iter().flat_map(|s| s.entries).collect(), threshold: opts.threshold })
}

// ------------------------------------------------------------------ simulate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub provenance: Provenance,
    pub tag: String,
    pub z0: [f64; 2],
    pub omega: f64,
    pub lambda: f64,
    pub dt: f64,
    pub t_final: f64,
    pub stride: usize,
    pub frames: usize,
    pub mass0: f64,
    pub energy0: f64,
    /// `max |M(t) + absorbed(t) - M(0)| / M(0)` over the run.
    pub mass_drift: f64,
    pub trusted_time: f64,
    /// `max |E(t) - E(0)| / |E(0)|` for `t` up to `trusted_time`.
    pub energy_drift: f64,
    pub energy_drift_full: f64,
    pub absorbed: f64,
    pub max_sweeps: usize,
    pub projected: bool,
    pub large_amplitude: bool,
}

fn trajectory_name(tag: &str) -> String {
    format!("trajectory_{tag}.snap")
}

/// The `z0` a named run uses.
pub fn run_amplitude(cfg: &RunConfig, tag: &str) -> LabResult<C64> {
    match tag {
        "main" => Ok(cfg.z0()),
        "half" => Ok(cfg.z0() * 0.5),
        "standing" => Ok(C64::new(0.0, 0.0)),
        other => Err(LabError::Config(format!("unknown run tag `{other}` (expected main, half or standing)"))),
    }
}

pub fn cmd_simulate(ctx: &Context, tag: &str) -> LabResult<Outcome> {
    let s = simulate(ctx, tag, &ctx.system()?)?;
    let passed = s.mass_drift <= ctx.config.report.mass_drift && s.energy_drift <= ctx.config.report.energy_drift;
    Ok(Outcome {
        passed,
        summary: format!("{} frames, mass drift {:.2e}, energy drift {:.2e} (t <= {:.1})", s.frames, s.mass_drift, s.energy_drift, s.trusted_time),
    })
}

fn simulate(ctx: &Context, tag: &str, sys: &LinearizedSystem) -> LabResult<SimulateSummary> {
    let c = &ctx.config;
    let z0 = run_amplitude(c, tag)?;
    let spec = c.model();
    let grid = *sys.grid();
    let data = dynamics::make_initial_data(sys, z0, None)?;
    let evo = c.evolution(c.dynamics.t_final);
    let header = SnapshotHeader {
        dim: grid.dim() as u32,
        intervals: grid.intervals() as u64,
        nodes: grid.len() as u64,
        radius: grid.radius(),
        omega: sys.omega(),
        dt: evo.dt,
        provenance: ctx.provenance.clone(),
    };
    let path = ctx.path(&trajectory_name(tag));
    let mut writer = SnapshotWriter::create(&path, &header)?;
    let mut ev = Evolution::new(&spec, &grid, &data.u, &evo)?;
    let mut write_err = None;
    let diags = ev.run(|t, u| {
        if write_err.is_none() {
            write_err = writer.push(t, u).err();
        }
        Ok(())
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let frames = writer.finish()?;

    let rows: Vec<Vec<f64>> = diags.iter().map(|d| vec![d.t, d.mass, d.energy, d.absorbed, d.max_abs, d.sweeps as f64]).collect();
    ctx.csv(&format!("conservation_{tag}.csv"), &["t", "mass", "energy", "absorbed", "max_abs", "sweeps"], &rows)?;

    let n = ctx.resonance(sys);
    let trusted = c.trusted_time(sys.omega(), sys.lambda, n).min(c.dynamics.t_final);
    let d0: &StepDiagnostics = &diags[0];
    let mass_drift = diags.iter().map(|d| (d.mass + d.absorbed - d0.mass).abs()).fold(0.0, f64::max) / d0.mass;
    let e_scale = d0.energy.abs().max(f64::MIN_POSITIVE);
    let e_drift = |limit: f64| diags.iter().filter(|d| d.t <= limit + 1e-9).map(|d| (d.energy - d0.energy).abs()).fold(0.0, f64::max) / e_scale;
    let summary = SimulateSummary {
        provenance: ctx.provenance.clone(),
        tag: tag.to_string(),
        z0: [z0.re, z0.im],
        omega: sys.omega(),
        lambda: sys.lambda,
        dt: evo.dt,
        t_final: evo.t_final,
        stride: evo.stride,
        frames,
        mass0: d0.mass,
        energy0: d0.energy,
        mass_drift,
        trusted_time: trusted,
        energy_drift: e_drift(trusted),
        energy_drift_full: e_drift(f64::INFINITY),
        absorbed: diags.last().map_or(0.0, |d| d.absorbed),
        max_sweeps: diags.iter().map(|d| d.sweeps).max().unwrap_or(0),
        projected: data.projected,
        large_amplitude: data.large_amplitude,
    };
    formats::write_json(&ctx.path(&format!("simulate_{tag}.json")), &summary)?;
    Ok(summary)
}

// ------------------------------------------------------------------ track

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub gamma_fit: f64,
    pub confidence: f64,
    pub exponent: f64,
    pub exponent_error: f64,
    pub window: [f64; 2],
    pub samples: usize,
    pub residual: f64,
    pub frequency: f64,
    pub damping_sign: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub provenance: Provenance,
    pub tag: String,
    pub resonance: usize,
    pub samples: usize,
    pub tube_exit: Option<(f64, String)>,
    pub smoothness_violations: usize,
    pub max_abs_z: f64,
    pub z0_abs: f64,
    pub max_omega_excursion: f64,
    pub max_orthogonality_residual: f64,
    pub fit: Option<FitSummary>,
    pub fit_error: Option<String>,
    /// `200/λ`, capped at the final time.
    pub lemma_time: f64,
    pub running_integral: f64,
    pub running_integral_half: f64,
    pub z_ratio: f64,
    /// `(T, |ω̄(T) - ω̄(T/2)|)` for the smoothed frequency.
    pub omega_tails: Vec<(f64, f64)>,
    pub radiation_ratio: Option<f64>,
}

pub fn cmd_track(ctx: &Context, tag: &str) -> LabResult<Outcome> {
    let sys = ctx.system()?;
    let s = track(ctx, tag, &sys)?;
    Ok(Outcome {
        passed: s.tube_exit.is_none(),
        summary: match (&s.fit, &s.fit_error) {
            (Some(f), _) => format!("{} samples, Gamma_fit = {:.6e}, q = {:.3}", s.samples, f.gamma_fit, f.exponent),
            (None, e) => format!("{} samples, fit: {}", s.samples, e.as_deref().unwrap_or("none")),
        },
    })
}

fn track(ctx: &Context, tag: &str, sys: &LinearizedSystem) -> LabResult<TrackSummary> {
    let c = &ctx.config;
    let path = ctx.path(&trajectory_name(tag));
    if !path.exists() {
        simulate(ctx, tag, sys)?;
    }
    let mut reader = SnapshotReader::open(&path)?;
    ctx.check_provenance(&path, &reader.header.provenance)?;
    if reader.header.nodes as usize != sys.grid().len() {
        return Err(LabError::Stale { path, detail: "node count differs from the current grid".into() });
    }
    let n = ctx.resonance(sys);
    let omega = sys.omega();
    let mut family = SystemFamily::new(sys.clone(), c.tracker.family_spacing * omega, c.spectrum_options())?;
    let mut tracker = Tracker::new(&mut family, c.tracker_options(n));
    while let Some((t, u)) = reader.next_frame()? {
        if tracker.push(t, &u).is_err() {
            break;
        }
    }
    let diag = tracker.finish();
    write_diagnostics(ctx, tag, &diag)?;
    let summary = summarize_track(ctx, tag, n, &diag, sys.lambda);
    formats::write_json(&ctx.path(&format!("fit_{tag}.json")), &summary)?;
    Ok(summary)
}

fn write_diagnostics(ctx: &Context, tag: &str, d: &TrajectoryDiagnostics) -> LabResult<()> {
    let rows: Vec<Vec<f64>> = d
        .samples
        .iter()
        .map(|s| vec![s.t, s.z.re, s.z.im, s.z.norm(), s.omega, s.gamma, s.f_h1, s.f_weighted, s.running_integral])
        .collect();
    ctx.csv(
        &format!("diagnostics_{tag}.csv"),
        &["t", "re_z", "im_z", "abs_z", "omega", "gamma", "f_h1", "f_weighted", "running_integral"],
        &rows,
    )
}

fn summarize_track(ctx: &Context, tag: &str, n: usize, d: &TrajectoryDiagnostics, lambda: f64) -> TrackSummary {
    let c = &ctx.config;
    let (fit, fit_error) = match fit_damping(d, n, &c.fit_options()) {
        Ok(f) => (
            Some(FitSummary {
                gamma_fit: f.gamma_fit,
                confidence: f.confidence,
                exponent: f.exponent,
                exponent_error: f.exponent_error,
                window: [f.window.0, f.window.1],
                samples: f.samples,
                residual: f.residual,
                frequency: f.frequency,
                damping_sign: f.damping_sign,
            }),
            None,
        ),
        Err(e) => (None, Some(e.to_string())),
    };
    let t_end = d.samples.last().map_or(0.0, |s| s.t);
    let lemma_time = (200.0 / lambda).min(t_end);
    let z0 = d.samples.first().map_or(0.0, |s| s.z.norm());
    let integral = d.running_integral(lemma_time).unwrap_or(0.0);
    let integral_half = d.running_integral(0.5 * lemma_time).unwrap_or(0.0);
    let z_end = d.at(lemma_time).map_or(0.0, |s| s.z.norm());
    let passes = c.tracker.smoothing_passes;
    let omega_tails = [0.125, 0.25, 0.5, 1.0]
        .iter()
        .filter_map(|f| {
            let t = f * c.dynamics.t_final;
            if t > t_end + 1e-9 {
                return None;
            }
            d.smoothed_omega_tail(t, passes).map(|v| (t, v))
        })
        .collect();
    TrackSummary {
        provenance: ctx.provenance.clone(),
        tag: tag.to_string(),
        resonance: n,
        samples: d.samples.len(),
        tube_exit: d.tube_exit.clone(),
        smoothness_violations: d.smoothness_violations.len(),
        max_abs_z: d.samples.iter().map(|s| s.z.norm()).fold(0.0, f64::max),
        z0_abs: z0,
        max_omega_excursion: d.max_omega_excursion(),
        max_orthogonality_residual: d.samples.iter().map(|s| s.orthogonality_residual).fold(0.0, f64::max),
        fit,
        fit_error,
        lemma_time,
        running_integral: integral,
        running_integral_half: integral_half,
        z_ratio: if z0 > 0.0 { z_end / z0 } else { 0.0 },
        omega_tails,
        radiation_ratio: d.radiation_decay_ratio(0.1),
    }
}

// ------------------------------------------------------------------ report

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub id: String,
    pub pass: bool,
    pub measured: String,
    pub requirement: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    pub rows: Vec<Row>,
    pub ground_state: GroundStateSummary,
    pub spectrum: SpectrumSummary,
    pub fgr: FgrSummary,
    pub runs: Vec<(SimulateSummary, TrackSummary)>,
}

impl Report {
    pub fn row(&self, id: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.id == id)
    }
    pub fn run(&self, tag: &str) -> Option<&(SimulateSummary, TrackSummary)> {
        self.runs.iter().find(|r| r.0.tag == tag)
    }
}

enum Task {
    Ground,
    Spectrum,
    Fgr,
    Run(&'static str),
}

enum Done {
    Ground(GroundStateSummary),
    Spectrum(SpectrumSummary),
    Fgr(FgrSummary),
    Run(Box<(SimulateSummary, TrackSummary)>),
}

fn run_task(ctx: &Context, task: &Task, sys: &LinearizedSystem) -> LabResult<Done> {
    Ok(match task {
        Task::Ground => Done::Ground(match ctx.reuse("ground_state.json")? {
            Some(s) => s,
            None => ground_state_summary(ctx)?,
        }),
        Task::Spectrum => Done::Spectrum(match ctx.reuse("spectrum.json")? {
            Some(s) => s,
            None => spectrum_summary(ctx, sys)?,
        }),
        Task::Fgr => Done::Fgr(match ctx.reuse("fgr.json")? {
            Some(s) => s,
            None => fgr_summary(ctx, sys)?,
        }),
        Task::Run(tag) => {
            let sim = match ctx.reuse(&format!("simulate_{tag}.json"))? {
                Some(s) if ctx.path(&trajectory_name(tag)).exists() => s,
                _ => simulate(ctx, tag, sys)?,
            };
            let tr = match ctx.reuse(&format!("fit_{tag}.json"))? {
                Some(s) => s,
                None => track(ctx, tag, sys)?,
            };
            Done::Run(Box::new((sim, tr)))
        }
    })
}

pub fn cmd_report(ctx: &Context) -> LabResult<Outcome> {
    let report = build_report(ctx)?;
    let failed: Vec<&str> = report.rows.iter().filter(|r| !r.pass).map(|r| r.id.as_str()).collect();
    Ok(Outcome {
        passed: failed.is_empty(),
        summary: if failed.is_empty() { "all rows pass".into() } else { format!("failing rows: {}", failed.join(", ")) },
    })
}

/// Runs (or reuses) every stage and writes `report.json` and `report.md`.
pub fn build_report(ctx: &Context) -> LabResult<Report> {
    let c = &ctx.config;
    let sys = ctx.system()?;
    let mut tasks = vec![Task::Run("main")];
    if c.report.half_amplitude {
        tasks.push(Task::Run("half"));
    }
    if c.report.standing_wave {
        tasks.push(Task::Run("standing"));
    }
    tasks.extend([Task::Fgr, Task::Ground, Task::Spectrum]);

    let slots: Vec<Mutex<Option<LabResult<Done>>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..ctx.jobs.min(tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= tasks.len() {
                    break;
                }
                let r = run_task(ctx, &tasks[i], &sys);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    let (mut gs, mut sp, mut fg, mut runs) = (None, None, None, Vec::new());
    for slot in slots {
        match slot.into_inner().expect("slot lock").expect("task ran")? {
            Done::Ground(s) => gs = Some(s),
            Done::Spectrum(s) => sp = Some(s),
            Done::Fgr(s) => fg = Some(s),
            Done::Run(r) => runs.push(*r),
        }
    }
    let (gs, sp, fg) = (gs.expect("ground task"), sp.expect("spectrum task"), fg.expect("fgr task"));
    let rows = verdict_rows(c, &gs, &sp, &fg, &runs);
    let report = Report { provenance: ctx.provenance.clone(), rows, ground_state: gs, spectrum: sp, fgr: fg, runs };
    formats::write_json(&ctx.path("report.json"), &report)?;
    let md = render_markdown(&report);
    std::fs::write(ctx.path("report.md"), md).map_err(|e| LabError::io(ctx.path("report.md"), e))?;
    Ok(report)
}

fn pf(b: bool) -> &'static str {
    if b {
        "PASS"
    } else {
        "FAIL"
    }
}

fn verdict_rows(c: &RunConfig, gs: &GroundStateSummary, sp: &SpectrumSummary, fg: &FgrSummary, runs: &[(SimulateSummary, TrackSummary)]) -> Vec<Row> {
    let rc = &c.report;
    let row = |id: &str, pass: bool, measured: String, requirement: String| Row { id: id.into(), pass, measured, requirement };
    let mut rows = vec![
        row("H3", gs.h3.pass, gs.h3.detail.clone(), "C1 branch of ground states across the window".into()),
        row("H4", gs.h4.pass, gs.h4.detail.clone(), "dM/domega > 0".into()),
        row("H5", gs.h5.pass, gs.h5.detail.clone(), "exactly one negative eigenvalue of L+, trivial kernel".into()),
        row("H7", sp.h7.pass, sp.h7.detail.clone(), "integer N >= 1, margin > 1e-3".into()),
        row("H9(gap-only)", sp.h9_gap.pass, sp.h9_gap.detail.clone(), "gap spectrum is {0, 0, lambda, -lambda}".into()),
        row(
            "FGR",
            fg.hypothesis.pass && fg.cross_validation.pass,
            format!("Gamma = {:.5e}; {}; {}", fg.gamma_resolvent, fg.hypothesis.detail, fg.cross_validation.detail),
            format!("|Gamma| > {:e}, cross-validation within {}", c.fgr.threshold, c.fgr.method_tolerance),
        ),
    ];
    let find = |tag: &str| runs.iter().find(|r| r.0.tag == tag);
    let gamma = fg.gamma_resolvent.abs();
    let rel = |t: &TrackSummary| t.fit.as_ref().map(|f| (f.gamma_fit.abs() - gamma).abs() / gamma);

    if let Some((_, main)) = find("main") {
        let half_rel = find("half").and_then(|(_, h)| rel(h));
        let (pass, measured) = match (&main.fit, rel(main)) {
            (Some(f), Some(r)) => {
                let bias_ok = half_rel.is_none_or(|h| h < r);
                (
                    r <= rc.gamma_agreement && f.exponent_error <= rc.exponent_agreement && bias_ok,
                    format!(
                        "Gamma_fit = {:.5e} (rel. {:.3}), q = {:.3}{}",
                        f.gamma_fit,
                        r,
                        f.exponent,
                        half_rel.map_or(String::new(), |h| format!(", half amplitude rel. {h:.3}"))
                    ),
                )
            }
            _ => (false, format!("fit failed: {}", main.fit_error.as_deref().unwrap_or("?"))),
        };
        rows.push(row(
            "dynamics-vs-theory",
            pass,
            measured,
            format!("rel. <= {}, |q - {}| <= {}, bias shrinks at half amplitude", rc.gamma_agreement, 2 * main.resonance + 2, rc.exponent_agreement),
        ));

        let ratio = if main.running_integral_half > 0.0 { main.running_integral / main.running_integral_half } else { f64::INFINITY };
        rows.push(row(
            "integral-bound",
            (ratio - 1.0).abs() <= rc.integral_ratio && main.z_ratio < 0.5,
            format!("I(T)/I(T/2) = {ratio:.4}, |z(T)|/|z0| = {:.4} at T = {:.1}", main.z_ratio, main.lemma_time),
            format!("ratio within {} of 1, amplitude ratio < 0.5", rc.integral_ratio),
        ));

        let tails: Vec<f64> = main.omega_tails.iter().map(|t| t.1).collect();
        let halves = tails.len() >= 2 && tails.windows(2).all(|w| w[1] <= w[0] && w[1] >= 0.25 * w[0]);
        rows.push(row(
            "omega-convergence",
            halves && main.tube_exit.is_none(),
            format!(
                "tails {} {}",
                main.omega_tails.iter().map(|(t, v)| format!("{t}:{v:.2e}")).collect::<Vec<_>>().join(" "),
                match &main.tube_exit {
                    Some((t, why)) => format!("; tube exit at t = {t}: {why}"),
                    None => "; tube never exited".into(),
                }
            ),
            "|omega(T) - omega(T/2)| halves within a factor 2 per doubling, no tube exit".into(),
        ));
        rows.push(row(
            "radiation decay",
            main.radiation_ratio.is_some_and(|r| r < rc.radiation_ratio),
            format!("late/peak weighted norm = {}", main.radiation_ratio.map_or("n/a".into(), |r| format!("{r:.3}"))),
            format!("< {}", rc.radiation_ratio),
        ));
    }

    let sims: Vec<&SimulateSummary> = runs.iter().map(|r| &r.0).collect();
    let mass = sims.iter().map(|s| s.mass_drift).fold(0.0, f64::max);
    let energy = sims.iter().map(|s| s.energy_drift).fold(0.0, f64::max);
    let standing = find("standing").map(|(_, t)| t.max_abs_z);
    rows.push(row(
        "conservation",
        mass <= rc.mass_drift && energy <= rc.energy_drift && standing.is_none_or(|z| z <= rc.standing_amplitude),
        format!(
            "mass {mass:.2e}, energy {energy:.2e}{}",
            standing.map_or(String::new(), |z| format!(", standing-wave max |z| = {z:.2e}"))
        ),
        format!("mass <= {:e}, energy <= {:e} (trusted window), standing |z| <= {:e}", rc.mass_drift, rc.energy_drift, rc.standing_amplitude),
    ));
    rows
}

fn render_markdown(r: &Report) -> String {
    let mut s = String::new();
    s.push_str("# Verdict table\n\n");
    s.push_str(&format!("config `{}`  \ngrid `{}`\n\n", r.provenance.config_hash, r.provenance.grid_hash));
    s.push_str(&format!(
        "omega = {}, lambda = {:.6}, N = {}, Gamma = {:.6e}\n\n",
        r.spectrum.omega, r.spectrum.lambda, r.spectrum.resonance, r.fgr.gamma_resolvent
    ));
    s.push_str("| row | verdict | measured | requirement |\n|---|---|---|---|\n");
    for row in &r.rows {
        s.push_str(&format!("| {} | {} | {} | {} |\n", row.id, pf(row.pass), row.measured.replace('|', "\\|"), row.requirement.replace('|', "\\|")));
    }
    s
}
