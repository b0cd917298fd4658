//! Run configuration: a complete TOML file, dotted `key=value` overrides and hashes.
//!
//! Every field is required. [`RunConfig::reference`] is the shipped example and is what
//! the `defaults` command prints.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use solfgr_core::dynamics::{EvolutionConfig, Scheme};
use solfgr_core::fgr::FgrOptions;
use solfgr_core::linearization::SpectrumOptions;
use solfgr_core::model::{Nonlinearity, RadialGrid};
use solfgr_core::modulation_tracker::{DecomposeOptions, FitOptions, TrackerOptions};
use solfgr_core::normal_form::NormalFormOptions;
use solfgr_core::resolvent::{OutgoingMethod, ResolventOptions};
use solfgr_core::C64;

use crate::error::{LabError, LabResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    PurePower { p: f64 },
    CubicQuintic { a: f64, b: f64 },
    Saturable { kappa: f64 },
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dim: usize,
    /// Bound states and dynamics.
    pub radius: f64,
    pub intervals: usize,
    /// Outer radius of the grid for resonant continuum solves (same spacing).
    pub continuum_radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundStateSection {
    pub omega: f64,
    pub branch_min: f64,
    pub branch_max: f64,
    pub branch_samples: usize,
    /// `L₊` kernel gap must exceed ten times this.
    pub h5_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSection {
    pub krylov_dim: usize,
    pub shifts: usize,
    pub kernel_tol: f64,
    pub threshold_tol: f64,
    pub resonance_margin: f64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Auto {
    Auto,
}

/// `"auto"` or a fixed resonance index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResonanceChoice {
    Fixed(usize),
    Auto(Auto),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    OutgoingBc,
    EpsExtrapolation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgrSection {
    pub resonance: ResonanceChoice,
    pub method: MethodName,
    pub threshold: f64,
    pub noise_factor: f64,
    pub method_tolerance: f64,
    pub eps_factor: f64,
    pub decay: f64,
    pub singular_tol: f64,
    pub resonance_tol: f64,
    /// `Γ` scan over `[branch_min, branch_max]` with this many points; `0` skips it.
    pub scan_points: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    CrankNicolson,
    StrangSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    pub z0_re: f64,
    pub z0_im: f64,
    pub dt: f64,
    pub t_final: f64,
    pub scheme: SchemeName,
    pub absorber_width: f64,
    pub absorber_strength: f64,
    pub fixed_point_tol: f64,
    pub max_sweeps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerSection {
    /// Evolution steps between snapshots (and decompositions).
    pub stride: usize,
    pub weight_exponent: f64,
    /// Lattice spacing of the ground-state family, relative to `ω`.
    pub family_spacing: f64,
    pub tube_radius: f64,
    pub smoothness_factor: f64,
    pub smoothing_passes: usize,
    pub fit_min_samples: usize,
    pub fit_max_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Repeat the run at `z0/2` for the amplitude-bias check.
    pub half_amplitude: bool,
    /// Run the unperturbed standing wave.
    pub standing_wave: bool,
    pub mass_drift: f64,
    pub energy_drift: f64,
    pub standing_amplitude: f64,
    pub gamma_agreement: f64,
    pub exponent_agreement: f64,
    pub integral_ratio: f64,
    pub radiation_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    pub ground_state: GroundStateSection,
    pub spectrum: SpectrumSection,
    pub fgr: FgrSection,
    pub dynamics: DynamicsSection,
    pub tracker: TrackerSection,
    pub report: ReportSection,
    pub output: OutputSection,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunConfig {
    /// The shipped cubic-quintic configuration.
    pub fn reference() -> Self {
        let sp = SpectrumOptions::default();
        RunConfig {
            model: ModelSection::CubicQuintic { a: 1.0, b: 0.1 },
            grid: GridSection { dim: 3, radius: 200.0, intervals: 2000, continuum_radius: 200.0 },
            ground_state: GroundStateSection {
                omega: 0.29,
                branch_min: 0.27,
                branch_max: 0.34,
                branch_samples: 8,
                h5_tol: 1e-8,
            },
            spectrum: SpectrumSection {
                krylov_dim: sp.krylov_dim,
                shifts: sp.shifts,
                kernel_tol: sp.kernel_tol,
                threshold_tol: sp.threshold_tol,
                resonance_margin: sp.resonance_margin,
                seed: sp.seed,
            },
            fgr: FgrSection {
                resonance: ResonanceChoice::Auto(Auto::Auto),
                method: MethodName::OutgoingBc,
                threshold: 0.0,
                noise_factor: 1e-3,
                method_tolerance: 0.05,
                eps_factor: 0.05,
                decay: 23.0,
                singular_tol: 1e-6,
                resonance_tol: 1e-6,
                scan_points: 0,
            },
            dynamics: DynamicsSection {
                z0_re: 0.05,
                z0_im: 0.0,
                dt: 0.2,
                t_final: 2000.0,
                scheme: SchemeName::CrankNicolson,
                absorber_width: 0.25,
                absorber_strength: 0.4,
                fixed_point_tol: 1e-13,
                max_sweeps: 30,
            },
            tracker: TrackerSection {
                stride: 10,
                weight_exponent: 3.0,
                family_spacing: 2e-3,
                tube_radius: 0.5,
                smoothness_factor: 10.0,
                smoothing_passes: 3,
                fit_min_samples: 50,
                fit_max_residual: 0.2,
            },
            report: ReportSection {
                half_amplitude: true,
                standing_wave: true,
                mass_drift: 1e-8,
                energy_drift: 1e-6,
                standing_amplitude: 1e-6,
                gamma_agreement: 0.25,
                exponent_agreement: 0.3,
                integral_ratio: 0.05,
                radiation_ratio: 0.2,
            },
            output: OutputSection { dir: "out".into() },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses a complete config; a missing or unknown field is an error naming it.
    pub fn from_toml(text: &str) -> LabResult<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text` after applying `section.key=value` overrides.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> LabResult<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| LabError::Config(e.message().to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| LabError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> LabResult<()> {
        let bad = |m: String| Err(LabError::Config(m));
        let g = &self.grid;
        if g.continuum_radius < g.radius {
            return bad(format!("grid.continuum_radius = {} is below grid.radius = {}", g.continuum_radius, g.radius));
        }
        let gs = &self.ground_state;
        if !(gs.omega > 0.0) {
            return bad("ground_state.omega must be positive".into());
        }
        if gs.branch_samples > 0 && !(gs.branch_min > 0.0 && gs.branch_min < gs.branch_max) {
            return bad("ground_state.branch_min must be in (0, branch_max)".into());
        }
        let tr = &self.tracker;
        if tr.stride == 0 {
            return bad("tracker.stride must be at least 1".into());
        }
        let positive = [
            ("ground_state.h5_tol", gs.h5_tol),
            ("spectrum.kernel_tol", self.spectrum.kernel_tol),
            ("spectrum.threshold_tol", self.spectrum.threshold_tol),
            ("spectrum.resonance_margin", self.spectrum.resonance_margin),
            ("fgr.noise_factor", self.fgr.noise_factor),
            ("fgr.method_tolerance", self.fgr.method_tolerance),
            ("fgr.eps_factor", self.fgr.eps_factor),
            ("fgr.decay", self.fgr.decay),
            ("fgr.singular_tol", self.fgr.singular_tol),
            ("fgr.resonance_tol", self.fgr.resonance_tol),
            ("dynamics.dt", self.dynamics.dt),
            ("dynamics.fixed_point_tol", self.dynamics.fixed_point_tol),
            ("tracker.family_spacing", tr.family_spacing),
            ("tracker.tube_radius", tr.tube_radius),
            ("tracker.smoothness_factor", tr.smoothness_factor),
            ("tracker.fit_max_residual", tr.fit_max_residual),
            ("report.mass_drift", self.report.mass_drift),
            ("report.energy_drift", self.report.energy_drift),
            ("report.standing_amplitude", self.report.standing_amplitude),
            ("report.gamma_agreement", self.report.gamma_agreement),
            ("report.exponent_agreement", self.report.exponent_agreement),
            ("report.integral_ratio", self.report.integral_ratio),
            ("report.radiation_ratio", self.report.radiation_ratio),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        self.model().validate(self.grid.dim).map_err(|e| LabError::Config(e.to_string()))?;
        self.grid().map_err(|e| LabError::Config(e.to_string()))?;
        self.evolution(0.0).validate().map_err(|e| LabError::Config(e.to_string()))?;
        Ok(())
    }

    /// Hash of everything but the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir.clear();
        hex(&Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn grid_hash(&self) -> String {
        grid_hash(&self.grid().expect("validated grid"))
    }

    pub fn model(&self) -> Nonlinearity {
        match self.model {
            ModelSection::PurePower { p } => Nonlinearity::PurePower { p },
            ModelSection::CubicQuintic { a, b } => Nonlinearity::CubicQuintic { a, b },
            ModelSection::Saturable { kappa } => Nonlinearity::Saturable { kappa },
            ModelSection::Linear => Nonlinearity::Linear,
        }
    }

    pub fn grid(&self) -> solfgr_core::Result<RadialGrid> {
        RadialGrid::new(self.grid.dim, self.grid.radius, self.grid.intervals)
    }

    pub fn spectrum_options(&self) -> SpectrumOptions {
        let s = &self.spectrum;
        SpectrumOptions {
            krylov_dim: s.krylov_dim,
            shifts: s.shifts,
            kernel_tol: s.kernel_tol,
            threshold_tol: s.threshold_tol,
            resonance_margin: s.resonance_margin,
            seed: s.seed,
        }
    }

    pub fn fgr_options(&self) -> FgrOptions {
        let f = &self.fgr;
        let method = match f.method {
            MethodName::OutgoingBc => OutgoingMethod::OutgoingBc,
            MethodName::EpsExtrapolation => OutgoingMethod::EpsExtrapolation,
        };
        FgrOptions {
            normal_form: NormalFormOptions {
                method,
                continuum_radius: self.grid.continuum_radius,
                resolvent: ResolventOptions { eps_factor: f.eps_factor, decay: f.decay, singular_tol: f.singular_tol },
                resonance_tol: f.resonance_tol,
            },
            threshold: f.threshold,
            noise_factor: f.noise_factor,
            method_tolerance: f.method_tolerance,
        }
    }

    pub fn z0(&self) -> C64 {
        C64::new(self.dynamics.z0_re, self.dynamics.z0_im)
    }

    pub fn evolution(&self, t_final: f64) -> EvolutionConfig {
        let d = &self.dynamics;
        EvolutionConfig {
            dt: d.dt,
            t_final,
            stride: self.tracker.stride,
            scheme: match d.scheme {
                SchemeName::CrankNicolson => Scheme::CrankNicolson,
                SchemeName::StrangSplit => Scheme::StrangSplit,
            },
            absorber_width: d.absorber_width,
            absorber_strength: d.absorber_strength,
            fixed_point_tol: d.fixed_point_tol,
            max_sweeps: d.max_sweeps,
            ..EvolutionConfig::default()
        }
    }

    pub fn tracker_options(&self, resonance: usize) -> TrackerOptions {
        let t = &self.tracker;
        TrackerOptions {
            resonance,
            weight_exponent: t.weight_exponent,
            smoothness_factor: t.smoothness_factor,
            decompose: DecomposeOptions { tube_radius: t.tube_radius, ..DecomposeOptions::default() },
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            min_samples: self.tracker.fit_min_samples,
            max_residual: self.tracker.fit_max_residual,
            smoothing_passes: self.tracker.smoothing_passes,
            ..FitOptions::default()
        }
    }

    /// End of the window in which no resonant radiation has reached the absorber.
    pub fn trusted_time(&self, omega: f64, lambda: f64, resonance: usize) -> f64 {
        let k2 = (resonance as f64 + 1.0) * lambda - omega;
        let inner = self.grid.radius * (1.0 - self.dynamics.absorber_width);
        if k2 > 0.0 {
            inner / (2.0 * k2.sqrt())
        } else {
            self.dynamics.t_final
        }
    }
}

pub fn grid_hash(grid: &RadialGrid) -> String {
    let key = format!("d={};R={:?};M={}", grid.dim(), grid.radius(), grid.intervals());
    hex(&Sha256::digest(key.as_bytes()))
}

fn apply_override(table: &mut toml::Table, spec: &str) -> LabResult<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| LabError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let keys: Vec<&str> = path.split('.').collect();
    let (last, sections) = keys.split_last().expect("split yields one item");
    let mut cur = table;
    for k in sections {
        cur = cur
            .get_mut(*k)
            .and_then(|v| v.as_table_mut())
            .ok_or_else(|| LabError::Config(format!("override `{path}`: no section `{k}`")))?;
    }
    if !cur.contains_key(*last) {
        return Err(LabError::Config(format!("override `{path}`: unknown field `{last}`")));
    }
    cur.insert((*last).to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_round_trips() {
        let c = RunConfig::reference();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
    }

    #[test]
    fn missing_field_is_named() {
        let text = RunConfig::reference().to_toml().replace("intervals = 2000\n", "");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("intervals"), "{err}");
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let c = RunConfig::reference();
        let text = c.to_toml();
        let o = RunConfig::from_toml_with(&text, &["ground_state.omega=0.3".into(), "fgr.resonance=2".into()]).unwrap();
        assert_eq!(o.ground_state.omega, 0.3);
        assert_eq!(o.fgr.resonance, ResonanceChoice::Fixed(2));
        assert_ne!(o.config_hash(), c.config_hash());
        let m = RunConfig::from_toml_with(&text, &["model.kind=saturable".into()]);
        assert!(m.is_err());
        assert!(RunConfig::from_toml_with(&text, &["grid.nope=1".into()]).is_err());
        let out = RunConfig::from_toml_with(&text, &["output.dir=elsewhere".into()]).unwrap();
        assert_eq!(out.config_hash(), c.config_hash());
    }

    #[test]
    fn pure_power_parses() {
        let text = RunConfig::reference().to_toml().replace("kind = \"cubic_quintic\"\na = 1.0\nb = 0.1", "kind = \"pure_power\"\np = 3.0");
        let c = RunConfig::from_toml(&text).unwrap();
        assert_eq!(c.model, ModelSection::PurePower { p: 3.0 });
    }
}
