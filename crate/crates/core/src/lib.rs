//! Numerical core for the asymptotic stability laboratory of radial NLS ground states.
//!
//! Everything here is `no_std` with `alloc`: grids and nonlinearities ([`model`]),
//! ground-state continuation ([`ground_state`]), the linearized operator and its gap
//! spectrum ([`linearization`]), gap and limiting-absorption resolvents ([`resolvent`]),
//! normal-form sources ([`normal_form`]), Fermi golden rule coefficients ([`fgr`]),
//! time evolution ([`dynamics`]) and the modulation decomposition ([`modulation_tracker`]).
#![no_std]
extern crate alloc;

pub mod banded;
pub mod dynamics;
pub mod error;
pub mod fgr;
pub mod ground_state;
pub mod linearization;
pub mod math;
pub mod model;
pub mod modulation_tracker;
pub mod normal_form;
pub mod resolvent;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
