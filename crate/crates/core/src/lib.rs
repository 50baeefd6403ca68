//! Thermoacoustic tomography with circular integrating detectors over a
//! variable wave speed: forward simulation, adjoint-based reconstruction and
//! ray-based visibility prediction.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod detector;
pub mod error;
pub mod field;
pub mod interp;
pub mod rays;
pub mod recon;
pub mod wave;

pub use error::{Error, Result};
pub use field::{
    make_grid, make_phantom, phantom_edges, sample_speed, Component, Covector, Cutoff, Grid2D, Phantom, PhantomSpec,
    SpeedField, SpeedSpec, Vec2, DEFAULT_ETA,
};
pub use interp::Interp;
pub use wave::{pml_profile, solve_forward, solve_with_sources, PmlProfile, Propagator, WaveState};
