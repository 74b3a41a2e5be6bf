//! Generators for the benchmark problems: the lid-driven cavity, the 2D
//! channel with an oscillating inlet, and a sheared (nonorthogonal) duct.
//!
//! All meshes are structured hexahedral lattices stored in the general
//! owner/neighbour form. Cell `(i, j, k)` has index `i + nx (j + ny k)`;
//! internal faces are ordered by owner, then neighbour.

use crate::config::{BoundarySpec, CaseConfig, Physics, PressureSpec, SolverSettings, VelocitySpec};
use crate::coupling::{Algorithm, CouplingConfig};
use crate::fvm::SchemeConfig;
use crate::mesh::{Mesh, MeshError, Patch, PatchKind};
use crate::Vec3;

pub const CAVITY_SIZE: f64 = 0.1;
pub const CAVITY_LID_SPEED: f64 = 1.0;
pub const CAVITY_NU: f64 = 0.01;

pub const CHANNEL_LENGTH: f64 = 0.16;
pub const CHANNEL_HEIGHT: f64 = 0.02;
pub const CHANNEL_NU: f64 = 3.3e-6;
pub const CHANNEL_U0: f64 = 0.01;
pub const CHANNEL_FREQUENCY: f64 = 0.5;
pub const CHANNEL_DT: f64 = 1e-4;
pub const CHANNEL_END_TIME: f64 = 0.5;

pub const DUCT_LENGTH: f64 = 0.08;
pub const DUCT_HEIGHT: f64 = 0.02;
pub const DUCT_INLET_SPEED: f64 = 0.01;
pub const DUCT_NU: f64 = 1e-4;
pub const MAX_SKEW_DEG: f64 = 45.0;

pub const DEFAULT_RHO: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CaseError {
    #[error("invalid case parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// A generated mesh with its preset configuration.
#[derive(Debug, Clone)]
pub struct Case {
    pub mesh: Mesh,
    pub config: CaseConfig,
}

/// Side of a structured block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    XMin,
    XMax,
    YMin,
    YMax,
    ZMin,
    ZMax,
}

/// Boundary patch of a structured block: a name, a kind and the block sides it covers.
#[derive(Debug, Clone)]
pub struct BlockPatch {
    pub name: String,
    pub kind: PatchKind,
    pub sides: Vec<Side>,
}

impl BlockPatch {
    pub fn new(name: &str, kind: PatchKind, sides: &[Side]) -> Self {
        Self { name: name.to_string(), kind, sides: sides.to_vec() }
    }
}

/// Cell and face counts of an `n^3` cavity.
pub fn cavity_counts(n: usize) -> (usize, usize) {
    (n * n * n, 3 * n * n * (n + 1))
}

/// Cell and face counts of a one-cell-thick `nx x ny` channel.
pub fn channel_counts(nx: usize, ny: usize) -> (usize, usize) {
    (nx * ny, (nx + 1) * ny + nx * (ny + 1) + 2 * nx * ny)
}

/// Builds an `nx x ny x nz` hexahedral block whose lattice point `(i, j, k)`
/// sits at `point(i, j, k)`. Every block side must belong to exactly one patch.
pub fn structured_mesh(
    nx: usize,
    ny: usize,
    nz: usize,
    point: impl Fn(usize, usize, usize) -> Vec3,
    patches: &[BlockPatch],
) -> Result<Mesh, CaseError> {
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(CaseError::InvalidParameter(format!("block size {nx}x{ny}x{nz} has no cells")));
    }
    let all = [Side::XMin, Side::XMax, Side::YMin, Side::YMax, Side::ZMin, Side::ZMax];
    for side in all {
        let owners = patches.iter().filter(|p| p.sides.contains(&side)).count();
        if owners != 1 {
            return Err(CaseError::InvalidParameter(format!("side {side:?} is covered by {owners} patches")));
        }
    }

    let pid = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let cid = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let mut points = Vec::with_capacity((nx + 1) * (ny + 1) * (nz + 1));
    for k in 0..=nz {
        for j in 0..=ny {
            for i in 0..=nx {
                points.push(point(i, j, k));
            }
        }
    }
    // Quads whose right-hand normal points along +x, +y and +z.
    let xface = |i, j, k| vec![pid(i, j, k), pid(i, j + 1, k), pid(i, j + 1, k + 1), pid(i, j, k + 1)];
    let yface = |i, j, k| vec![pid(i, j, k), pid(i, j, k + 1), pid(i + 1, j, k + 1), pid(i + 1, j, k)];
    let zface = |i, j, k| vec![pid(i, j, k), pid(i + 1, j, k), pid(i + 1, j + 1, k), pid(i, j + 1, k)];

    let n_internal = (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1);
    let mut faces = Vec::with_capacity(n_internal + 2 * (nx * ny + ny * nz + nx * nz));
    let mut owner = Vec::with_capacity(faces.capacity());
    let mut neighbour = Vec::with_capacity(n_internal);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let c = cid(i, j, k);
                if i + 1 < nx {
                    faces.push(xface(i + 1, j, k));
                    owner.push(c);
                    neighbour.push(cid(i + 1, j, k));
                }
                if j + 1 < ny {
                    faces.push(yface(i, j + 1, k));
                    owner.push(c);
                    neighbour.push(cid(i, j + 1, k));
                }
                if k + 1 < nz {
                    faces.push(zface(i, j, k + 1));
                    owner.push(c);
                    neighbour.push(cid(i, j, k + 1));
                }
            }
        }
    }

    let mut mesh_patches = Vec::with_capacity(patches.len());
    for patch in patches {
        let start = faces.len();
        for &side in &patch.sides {
            match side {
                Side::XMin | Side::XMax => {
                    let (i_pt, i_cell) = if side == Side::XMin { (0, 0) } else { (nx, nx - 1) };
                    for k in 0..nz {
                        for j in 0..ny {
                            let mut f = xface(i_pt, j, k);
                            if side == Side::XMin {
                                f.reverse();
                            }
                            faces.push(f);
                            owner.push(cid(i_cell, j, k));
                        }
                    }
                }
                Side::YMin | Side::YMax => {
                    let (j_pt, j_cell) = if side == Side::YMin { (0, 0) } else { (ny, ny - 1) };
                    for k in 0..nz {
                        for i in 0..nx {
                            let mut f = yface(i, j_pt, k);
                            if side == Side::YMin {
                                f.reverse();
                            }
                            faces.push(f);
                            owner.push(cid(i, j_cell, k));
                        }
                    }
                }
                Side::ZMin | Side::ZMax => {
                    let (k_pt, k_cell) = if side == Side::ZMin { (0, 0) } else { (nz, nz - 1) };
                    for j in 0..ny {
                        for i in 0..nx {
                            let mut f = zface(i, j, k_pt);
                            if side == Side::ZMin {
                                f.reverse();
                            }
                            faces.push(f);
                            owner.push(cid(i, j, k_cell));
                        }
                    }
                }
            }
        }
        mesh_patches.push(Patch::new(patch.name.clone(), patch.kind, start, faces.len() - start));
    }
    Ok(Mesh::new(points, faces, owner, neighbour, mesh_patches)?)
}

fn boundary(patch: &str, velocity: VelocitySpec, pressure: PressureSpec) -> BoundarySpec {
    BoundarySpec { patch: patch.to_string(), velocity, pressure }
}

/// `n^3` cube of side 0.1 m with the lid (`y = L`) moving at 1 m/s along `x`.
pub fn gen_cavity(n: usize) -> Result<Case, CaseError> {
    if n == 0 {
        return Err(CaseError::InvalidParameter("cavity needs at least one cell per edge".into()));
    }
    let h = CAVITY_SIZE / n as f64;
    let patches = [
        BlockPatch::new("lid", PatchKind::Wall, &[Side::YMax]),
        BlockPatch::new("walls", PatchKind::Wall, &[Side::XMin, Side::XMax, Side::YMin, Side::ZMin, Side::ZMax]),
    ];
    let mesh = structured_mesh(n, n, n, |i, j, k| Vec3::new(i as f64, j as f64, k as f64) * h, &patches)?;
    let config = CaseConfig {
        name: format!("cavity{n}"),
        physics: Physics { nu: CAVITY_NU, rho: DEFAULT_RHO },
        scheme: SchemeConfig { nonorth_correction: false, ..SchemeConfig::default() },
        solvers: SolverSettings::default(),
        coupling: CouplingConfig {
            algorithm: Algorithm::Simple,
            outer_tol: 1e-5,
            max_outer: 2000,
            ..Default::default()
        },
        io: Default::default(),
        boundary: vec![
            boundary(
                "lid",
                VelocitySpec::FixedValue { value: [CAVITY_LID_SPEED, 0.0, 0.0] },
                PressureSpec::ZeroGradient,
            ),
            boundary("walls", VelocitySpec::NoSlip, PressureSpec::ZeroGradient),
        ],
    };
    Ok(Case { mesh, config })
}

fn flat_block(nx: usize, ny: usize, length: f64, height: f64, shear: f64) -> Result<Mesh, CaseError> {
    if nx == 0 || ny == 0 {
        return Err(CaseError::InvalidParameter(format!("channel size {nx}x{ny} has no cells")));
    }
    if !(length > 0.0 && height > 0.0) {
        return Err(CaseError::InvalidParameter(format!("channel extent {length}x{height} must be positive")));
    }
    let (dx, dy) = (length / nx as f64, height / ny as f64);
    let dz = dy;
    let patches = [
        BlockPatch::new("inlet", PatchKind::Inlet, &[Side::XMin]),
        BlockPatch::new("outlet", PatchKind::Outlet, &[Side::XMax]),
        BlockPatch::new("walls", PatchKind::Wall, &[Side::YMin, Side::YMax]),
        BlockPatch::new("frontAndBack", PatchKind::Empty, &[Side::ZMin, Side::ZMax]),
    ];
    structured_mesh(
        nx,
        ny,
        1,
        |i, j, k| {
            let y = j as f64 * dy;
            Vec3::new(i as f64 * dx + y * shear, y, k as f64 * dz)
        },
        &patches,
    )
}

/// One-cell-thick 2D channel with a sinusoidal inlet, zero outlet pressure and
/// no-slip walls, run with PISO.
pub fn gen_channel(nx: usize, ny: usize, length: f64, height: f64) -> Result<Case, CaseError> {
    let mesh = flat_block(nx, ny, length, height, 0.0)?;
    let config = CaseConfig {
        name: format!("channel{nx}x{ny}"),
        physics: Physics { nu: CHANNEL_NU, rho: DEFAULT_RHO },
        scheme: SchemeConfig { nonorth_correction: false, ..SchemeConfig::default() },
        solvers: SolverSettings::default(),
        coupling: CouplingConfig {
            algorithm: Algorithm::Piso,
            dt: CHANNEL_DT,
            end_time: Some(CHANNEL_END_TIME),
            max_outer: (CHANNEL_END_TIME / CHANNEL_DT).round() as usize,
            ..Default::default()
        },
        io: Default::default(),
        boundary: vec![
            boundary(
                "inlet",
                VelocitySpec::TimedInlet { u0: CHANNEL_U0, frequency: CHANNEL_FREQUENCY },
                PressureSpec::ZeroGradient,
            ),
            boundary("outlet", VelocitySpec::ZeroGradient, PressureSpec::FixedValue { value: 0.0 }),
            boundary("walls", VelocitySpec::NoSlip, PressureSpec::ZeroGradient),
        ],
    };
    Ok(Case { mesh, config })
}

/// Channel lattice sheared by `x' = x + y tan(skew)`, giving internal faces
/// whose nonorthogonality equals the skew angle.
pub fn gen_skewed_duct(nx: usize, ny: usize, skew_deg: f64) -> Result<Case, CaseError> {
    gen_skewed_duct_sized(nx, ny, skew_deg, DUCT_LENGTH, DUCT_HEIGHT)
}

pub fn gen_skewed_duct_sized(nx: usize, ny: usize, skew_deg: f64, length: f64, height: f64) -> Result<Case, CaseError> {
    if !(0.0..=MAX_SKEW_DEG).contains(&skew_deg) {
        return Err(CaseError::InvalidParameter(format!(
            "skew angle must be in [0, {MAX_SKEW_DEG}] degrees, got {skew_deg}"
        )));
    }
    let mesh = flat_block(nx, ny, length, height, skew_deg.to_radians().tan())?;
    let config = CaseConfig {
        name: format!("duct{nx}x{ny}_skew{skew_deg}"),
        physics: Physics { nu: DUCT_NU, rho: DEFAULT_RHO },
        scheme: SchemeConfig::default(),
        solvers: SolverSettings::default(),
        coupling: CouplingConfig {
            algorithm: Algorithm::Simple,
            n_nonorth_correctors: if skew_deg > 0.0 { 1 } else { 0 },
            outer_tol: 1e-5,
            max_outer: 3000,
            ..Default::default()
        },
        io: Default::default(),
        boundary: vec![
            boundary(
                "inlet",
                VelocitySpec::FixedValue { value: [DUCT_INLET_SPEED, 0.0, 0.0] },
                PressureSpec::ZeroGradient,
            ),
            boundary("outlet", VelocitySpec::ZeroGradient, PressureSpec::FixedValue { value: 0.0 }),
            boundary("walls", VelocitySpec::NoSlip, PressureSpec::ZeroGradient),
        ],
    };
    Ok(Case { mesh, config })
}
