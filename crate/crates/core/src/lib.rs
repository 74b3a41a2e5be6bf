//! Finite-volume solver for incompressible Navier-Stokes flow on unstructured
//! polyhedral meshes.
//!
//! The crate is organised bottom-up:
//!
//! * [`mesh`]: polyhedral mesh topology and geometry.
//! * [`sparse`]: the hybrid ELL + CRS matrix format with the `J` transpose map.
//! * [`linsolve`]: Jacobi-preconditioned CG and BiCGStab.
//! * [`fvm`]: discretisation operators and boundary conditions.
//! * [`coupling`]: SIMPLE and PISO pressure-velocity coupling.
//! * [`cases`]: generators for the cavity, channel and skewed-duct problems.
//! * [`io`]: mesh files, legacy VTK output and line sampling.
//! * [`config`]: the case configuration file.
//! * [`profile`]: run timing report.

pub mod cases;
pub mod config;
pub mod coupling;
pub mod fvm;
pub mod io;
pub mod linsolve;
pub mod mesh;
pub mod profile;
pub mod sparse;

mod error;

pub use error::{Error, Result};

/// Three-component vector used for points, area vectors and velocities.
pub type Vec3 = nalgebra::Vector3<f64>;
