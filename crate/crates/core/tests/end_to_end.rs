//! Ground state to tracked trajectory through the public API, on a small saturable grid.

use solfgr_core::dynamics::{evolve, make_initial_data, EvolutionConfig};
use solfgr_core::fgr::gamma_at;
use solfgr_core::fgr::FgrOptions;
use solfgr_core::ground_state::GroundState;
use solfgr_core::linearization::{LinearizedSystem, SpectrumOptions};
use solfgr_core::model::{Nonlinearity, RadialGrid};
use solfgr_core::modulation_tracker::{track, SystemFamily, TrackerOptions};
use solfgr_core::C64;

fn system() -> LinearizedSystem {
    let spec = Nonlinearity::Saturable { kappa: 1.0 };
    let grid = RadialGrid::new(3, 40.0, 800).unwrap();
    let gs = GroundState::compute(&spec, &grid, 0.72, None).unwrap();
    LinearizedSystem::build(&spec, gs, &SpectrumOptions::default()).unwrap()
}

#[test]
fn short_trajectory_stays_in_the_tube() {
    let sys = system();
    assert_eq!(sys.resonance, 1);
    let (k, c) = sys.kernel_residuals();
    assert!(k < 1e-9 && c < 1e-9, "{k} {c}");

    let z0 = C64::new(0.02, 0.01);
    let data = make_initial_data(&sys, z0, None).unwrap();
    let cfg = EvolutionConfig { dt: 0.1, t_final: 30.0, stride: 5, ..EvolutionConfig::default() };
    let traj = evolve(&sys.spec, sys.grid(), &data.u, &cfg).unwrap();
    let d0 = &traj.diagnostics[0];
    for d in &traj.diagnostics {
        assert!(((d.mass + d.absorbed) - d0.mass).abs() < 1e-9 * d0.mass);
    }

    let omega = sys.omega();
    let mut family = SystemFamily::around(sys.clone()).unwrap();
    let snapshots = traj.times.iter().copied().zip(traj.fields.iter().map(|u| u.as_slice()));
    let diag = track(snapshots, &mut family, TrackerOptions::default());
    assert!(diag.tube_exit.is_none(), "{:?}", diag.tube_exit);
    assert_eq!(diag.samples.len(), traj.times.len());
    assert!((diag.samples[0].z - z0).norm() < 1e-8);
    for s in &diag.samples {
        // Γ is tiny here: the amplitude only rotates over this horizon
        assert!((s.z.norm() - z0.norm()).abs() < 0.1 * z0.norm(), "t = {}: |z| = {}", s.t, s.z.norm());
        assert!((s.omega - omega).abs() < 1e-2 * omega);
    }
    let rate = {
        let a = &diag.samples[diag.samples.len() / 2];
        let b = &diag.samples[diag.samples.len() / 2 + 1];
        let mut dphi = (b.z / a.z).arg();
        if dphi > 0.0 {
            dphi -= 2.0 * std::f64::consts::PI;
        }
        -dphi / (b.t - a.t)
    };
    assert!((rate - sys.lambda).abs() < 0.05 * sys.lambda, "rotation {rate} vs lambda {}", sys.lambda);
}

#[test]
fn gamma_is_damping_and_method_independent() {
    let sys = system();
    let (_, r) = gamma_at(&sys, &FgrOptions::default()).unwrap();
    assert!(r.gamma_resolvent > 0.0);
    assert!(r.cross_error() < 0.05, "{r:?}");
    assert_eq!(r.sign(), 1);
}
