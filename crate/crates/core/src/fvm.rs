//! Finite-volume discretisation: fields, boundary conditions and the
//! gradient, interpolation, Laplacian, convection and time-derivative
//! operators.
//!
//! Every operator integrates over cell volumes. An assembled [`FvMatrix`]
//! represents the discrete operator `L(phi) ~ A phi - source`, so the equation
//! `L(phi) = r` is solved as `A phi = source + r`.
//!
//! Face quantities are oriented out of the owner cell. The Laplacian splits each
//! area vector as `S = Delta + k` with `Delta` parallel to the centroid vector
//! `d` (over-relaxed decomposition); the `Delta` part is implicit and the `k`
//! part is an explicit correction built from interpolated cell gradients.

use std::fmt::{self, Debug};
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::sync::Arc;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linsolve::{self, SolveConfig, SolveReport, SolverError};
use crate::mesh::{self, CellFaceAdjacency, Mesh, MeshError, MeshGeometry, PatchKind};
use crate::sparse::{self, HybridMatrix, SparseError, SparsityPattern};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FvmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("field `{field}`: {reason}")]
    BoundaryCoverage { field: String, reason: String },
    #[error("field `{field}`: {bc} is not valid on patch `{patch}`")]
    IncompatibleBoundary { field: String, patch: String, bc: &'static str },
    #[error("patch `{patch}` has zero area")]
    ZeroAreaPatch { patch: String },
    #[error("zero or non-finite diagonal coefficient in cell {cell}")]
    ZeroDiagonal { cell: usize },
    #[error("field `{0}` has no face flux")]
    MissingFlux(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// Tensor rank of a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rank {
    Scalar,
    Vector,
}

impl fmt::Display for Rank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rank::Scalar => "scalar",
            Rank::Vector => "vector",
        })
    }
}

/// Cell value types: `f64` for scalars, [`Vec3`] for vectors.
pub trait FieldValue:
    Copy
    + Debug
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<f64, Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
{
    /// Gradient type: a vector for scalars, `grad[i][j] = d phi_j / d x_i` for vectors.
    type Grad: Copy + Debug + Send + Sync + Add<Output = Self::Grad> + Mul<f64, Output = Self::Grad> + AddAssign;

    const RANK: Rank;
    const COMPONENTS: usize;

    fn zero() -> Self;
    fn grad_zero() -> Self::Grad;
    fn component(&self, c: usize) -> f64;
    fn set_component(&mut self, c: usize, value: f64);
    /// `s (x) v`, the face contribution to a Gauss gradient.
    fn outer(s: &Vec3, v: &Self) -> Self::Grad;
    /// Directional derivative `(d . grad) phi`.
    fn dot_grad(d: &Vec3, g: &Self::Grad) -> Self;
    fn magnitude(&self) -> f64;
}

impl FieldValue for f64 {
    type Grad = Vec3;
    const RANK: Rank = Rank::Scalar;
    const COMPONENTS: usize = 1;

    fn zero() -> Self {
        0.0
    }
    fn grad_zero() -> Vec3 {
        Vec3::zeros()
    }
    fn component(&self, _c: usize) -> f64 {
        *self
    }
    fn set_component(&mut self, _c: usize, value: f64) {
        *self = value;
    }
    fn outer(s: &Vec3, v: &Self) -> Vec3 {
        s * *v
    }
    fn dot_grad(d: &Vec3, g: &Vec3) -> Self {
        d.dot(g)
    }
    fn magnitude(&self) -> f64 {
        self.abs()
    }
}

impl FieldValue for Vec3 {
    type Grad = Matrix3<f64>;
    const RANK: Rank = Rank::Vector;
    const COMPONENTS: usize = 3;

    fn zero() -> Self {
        Vec3::zeros()
    }
    fn grad_zero() -> Matrix3<f64> {
        Matrix3::zeros()
    }
    fn component(&self, c: usize) -> f64 {
        self[c]
    }
    fn set_component(&mut self, c: usize, value: f64) {
        self[c] = value;
    }
    fn outer(s: &Vec3, v: &Self) -> Matrix3<f64> {
        s * v.transpose()
    }
    fn dot_grad(d: &Vec3, g: &Matrix3<f64>) -> Self {
        g.tr_mul(d)
    }
    fn magnitude(&self) -> f64 {
        self.norm()
    }
}

/// Boundary condition of one patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryCondition<T> {
    FixedValue(T),
    /// Inflow along the inward normal with speed `u0 sin(2 pi f t)`.
    TimedInlet {
        u0: f64,
        frequency: f64,
    },
    ZeroGradient,
    NoSlip,
    /// Uniform inflow carrying `mass_flow` kg/s at density `rho`.
    FixedMassFlow {
        mass_flow: f64,
        rho: f64,
    },
    FixedPressure(f64),
    Empty,
}

impl<T> BoundaryCondition<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::FixedValue(_) => "fixed_value",
            Self::TimedInlet { .. } => "timed_inlet",
            Self::ZeroGradient => "zero_gradient",
            Self::NoSlip => "no_slip",
            Self::FixedMassFlow { .. } => "fixed_mass_flow",
            Self::FixedPressure(_) => "fixed_pressure",
            Self::Empty => "empty",
        }
    }

    /// Whether the boundary value is prescribed (Dirichlet).
    pub fn is_fixed(&self) -> bool {
        !matches!(self, Self::ZeroGradient | Self::Empty)
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Self::Empty)
    }

    fn valid_for(&self, rank: Rank) -> bool {
        match self {
            Self::FixedValue(_) | Self::ZeroGradient | Self::Empty => true,
            Self::TimedInlet { .. } | Self::NoSlip | Self::FixedMassFlow { .. } => rank == Rank::Vector,
            Self::FixedPressure(_) => rank == Rank::Scalar,
        }
    }
}

/// Inlet speed `u0 sin(2 pi f t)`.
pub fn timed_inlet_speed(u0: f64, frequency: f64, t: f64) -> f64 {
    u0 * (2.0 * std::f64::consts::PI * frequency * t).sin()
}

/// Normal inflow speed `mass_flow / (rho area)`.
pub fn mass_flow_speed(mass_flow: f64, rho: f64, area: f64) -> f64 {
    mass_flow / (rho * area)
}

/// A mesh with everything the operators need precomputed.
#[derive(Debug, Clone)]
pub struct FvMesh {
    pub mesh: Mesh,
    pub geometry: MeshGeometry,
    pub adjacency: CellFaceAdjacency,
    pub pattern: Arc<SparsityPattern>,
    /// `|Delta_f| / |d_f| = (S . S) / (d . S)` for every face.
    pub delta_coeff: Vec<f64>,
    /// Nonorthogonal remainder `k_f = S_f - Delta_f`; exactly zero when `d` is
    /// parallel to `S`.
    pub k: Vec<Vec3>,
}

impl FvMesh {
    /// Uses an ELL width equal to the longest matrix row, so the CRS part is
    /// empty.
    pub fn new(mesh: Mesh) -> Result<Self, FvmError> {
        let width = mesh::max_neighbours(&mesh) + 1;
        Self::with_ell_width(mesh, width)
    }

    pub fn with_ell_width(mesh: Mesh, k_cap: usize) -> Result<Self, FvmError> {
        let geometry = mesh::compute_geometry(&mesh)?;
        let adjacency = mesh::cell_face_adjacency(&mesh);
        let pattern = Arc::new(sparse::build_pattern(&mesh, k_cap)?);
        let (delta_coeff, k) = (0..mesh.n_faces())
            .into_par_iter()
            .map(|f| {
                let s = geometry.face_area[f];
                let d = geometry.delta[f];
                let ds = d.dot(&s);
                if ds <= 0.0 {
                    return Err(FvmError::Mesh(MeshError::CoincidentCentroids { face: f }));
                }
                let ss = s.dot(&s);
                let k =
                    if d.cross(&s).norm() <= 1e-12 * d.norm() * s.norm() { Vec3::zeros() } else { s - d * (ss / ds) };
                Ok((ss / ds, k))
            })
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .unzip();
        Ok(Self { mesh, geometry, adjacency, pattern, delta_coeff, k })
    }

    pub fn n_cells(&self) -> usize {
        self.mesh.n_cells()
    }

    pub fn n_internal_faces(&self) -> usize {
        self.mesh.n_internal_faces()
    }

    pub fn patch_area(&self, patch: usize) -> f64 {
        self.mesh.patches()[patch].faces().map(|f| self.geometry.face_magnitude(f)).sum()
    }

    /// Orthogonal part `Delta_f` of the area vector.
    pub fn delta_vector(&self, f: usize) -> Vec3 {
        self.geometry.face_area[f] - self.k[f]
    }
}

/// A cell-centred field with one boundary condition per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Field<T> {
    pub name: String,
    pub values: Vec<T>,
    /// Boundary face values, indexed by `face - n_internal_faces`.
    pub boundary: Vec<T>,
    bcs: Vec<BoundaryCondition<T>>,
    /// Face volume flux in m^3/s, oriented out of the owner.
    pub face_flux: Option<Vec<f64>>,
    time: f64,
}

impl<T: FieldValue> Field<T> {
    /// Creates a uniform field and applies its boundary conditions at `t = 0`.
    pub fn new(
        name: impl Into<String>,
        fv: &FvMesh,
        bcs: Vec<BoundaryCondition<T>>,
        initial: T,
    ) -> Result<Self, FvmError> {
        let name = name.into();
        let patches = fv.mesh.patches();
        if bcs.len() != patches.len() {
            return Err(FvmError::BoundaryCoverage {
                field: name,
                reason: format!("{} boundary conditions for {} patches", bcs.len(), patches.len()),
            });
        }
        for (bc, patch) in bcs.iter().zip(patches) {
            let empty_patch = patch.kind == PatchKind::Empty;
            if !bc.valid_for(T::RANK) || bc.is_empty() != empty_patch {
                return Err(FvmError::IncompatibleBoundary { field: name, patch: patch.name.clone(), bc: bc.name() });
            }
            match *bc {
                BoundaryCondition::FixedMassFlow { rho, mass_flow } if !(rho > 0.0) || !mass_flow.is_finite() => {
                    return Err(FvmError::InvalidArgument(format!(
                        "patch `{}`: mass flow needs rho > 0, got {rho}",
                        patch.name
                    )));
                }
                BoundaryCondition::TimedInlet { u0, frequency } if !u0.is_finite() || !frequency.is_finite() => {
                    return Err(FvmError::InvalidArgument(format!("patch `{}`: non-finite inlet", patch.name)));
                }
                _ => {}
            }
        }
        let mut field = Self {
            name,
            values: vec![initial; fv.n_cells()],
            boundary: vec![T::zero(); fv.mesh.n_boundary_faces()],
            bcs,
            face_flux: None,
            time: 0.0,
        };
        field.apply_bcs(fv, 0.0)?;
        Ok(field)
    }

    pub fn bcs(&self) -> &[BoundaryCondition<T>] {
        &self.bcs
    }

    pub fn bc(&self, patch: usize) -> &BoundaryCondition<T> {
        &self.bcs[patch]
    }

    /// Time of the last [`Field::apply_bcs`].
    pub fn time(&self) -> f64 {
        self.time
    }

    /// Refreshes all boundary face values for time `t`.
    pub fn apply_bcs(&mut self, fv: &FvMesh, t: f64) -> Result<(), FvmError> {
        self.time = t;
        let n_int = fv.n_internal_faces();
        for (pi, patch) in fv.mesh.patches().iter().enumerate() {
            let bc = self.bcs[pi];
            let speed = match bc {
                BoundaryCondition::TimedInlet { u0, frequency } => timed_inlet_speed(u0, frequency, t),
                BoundaryCondition::FixedMassFlow { mass_flow, rho } => {
                    let area = fv.patch_area(pi);
                    if !(area > 0.0) {
                        return Err(FvmError::ZeroAreaPatch { patch: patch.name.clone() });
                    }
                    mass_flow_speed(mass_flow, rho, area)
                }
                _ => 0.0,
            };
            for f in patch.faces() {
                let owner_value = self.values[fv.mesh.owner()[f]];
                self.boundary[f - n_int] = match bc {
                    BoundaryCondition::FixedValue(v) => v,
                    BoundaryCondition::FixedPressure(p) => scalar_as::<T>(p),
                    BoundaryCondition::NoSlip => T::zero(),
                    BoundaryCondition::ZeroGradient | BoundaryCondition::Empty => owner_value,
                    BoundaryCondition::TimedInlet { .. } | BoundaryCondition::FixedMassFlow { .. } => {
                        let s = fv.geometry.face_area[f];
                        inward_velocity::<T>(&(s / s.norm()), speed)
                    }
                };
            }
        }
        Ok(())
    }

    /// Re-evaluates boundary values after the cell values changed.
    pub fn correct_boundary(&mut self, fv: &FvMesh) {
        let n_int = fv.n_internal_faces();
        for (pi, patch) in fv.mesh.patches().iter().enumerate() {
            if !self.bcs[pi].is_fixed() {
                for f in patch.faces() {
                    self.boundary[f - n_int] = self.values[fv.mesh.owner()[f]];
                }
            }
        }
    }

    /// Value on face `f`: interpolated on internal faces, the boundary value otherwise.
    pub fn face_value(&self, fv: &FvMesh, f: usize) -> T {
        let n_int = fv.n_internal_faces();
        if f < n_int {
            let w = fv.geometry.weight[f];
            self.values[fv.mesh.owner()[f]] * w + self.values[fv.mesh.neighbour()[f]] * (1.0 - w)
        } else {
            self.boundary[f - n_int]
        }
    }

    pub fn boundary_value(&self, fv: &FvMesh, f: usize) -> T {
        self.boundary[f - fv.n_internal_faces()]
    }

    /// Patch index of boundary face `f` together with its condition.
    fn face_bc(&self, fv: &FvMesh, f: usize) -> &BoundaryCondition<T> {
        &self.bcs[fv.mesh.patch_of(f).expect("boundary face")]
    }
}

fn scalar_as<T: FieldValue>(p: f64) -> T {
    let mut v = T::zero();
    v.set_component(0, p);
    v
}

fn inward_velocity<T: FieldValue>(unit_normal: &Vec3, speed: f64) -> T {
    let mut v = T::zero();
    for c in 0..T::COMPONENTS {
        v.set_component(c, -unit_normal[c] * speed);
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvectionScheme {
    #[default]
    Upwind,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    pub convection: ConvectionScheme,
    pub nonorth_correction: bool,
    /// Limiter `psi` in `[0, 1]`: 1 leaves the correction unlimited, 0 removes it.
    pub limiter: f64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self { convection: ConvectionScheme::Upwind, nonorth_correction: true, limiter: 1.0 }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<(), FvmError> {
        if !(0.0..=1.0).contains(&self.limiter) {
            return Err(FvmError::InvalidArgument(format!("limiter must be in [0, 1], got {}", self.limiter)));
        }
        Ok(())
    }
}

/// Assembled operator `A phi - source`.
#[derive(Debug, Clone)]
pub struct FvMatrix<T> {
    pub matrix: HybridMatrix,
    pub source: Vec<T>,
}

/// Krylov method used for a component solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Krylov {
    Cg,
    BiCgStab,
}

impl<T: FieldValue> FvMatrix<T> {
    pub fn zeros(pattern: &Arc<SparsityPattern>) -> Self {
        Self { matrix: HybridMatrix::zeros(Arc::clone(pattern)), source: vec![T::zero(); pattern.n()] }
    }

    pub fn n(&self) -> usize {
        self.matrix.n()
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, factor: f64, other: &FvMatrix<T>) -> Result<(), FvmError> {
        self.matrix.axpy(factor, &other.matrix)?;
        for (s, o) in self.source.iter_mut().zip(&other.source) {
            *s += *o * factor;
        }
        Ok(())
    }

    pub fn negate(&mut self) {
        self.matrix.scale(-1.0);
        for s in &mut self.source {
            *s = -*s;
        }
    }

    /// `A x` evaluated component by component.
    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); x.len()];
        for c in 0..T::COMPONENTS {
            let xc = component(x, c);
            let y = self.matrix.smvp(&xc).expect("field sized to matrix");
            for (o, y) in out.iter_mut().zip(y) {
                o.set_component(c, y);
            }
        }
        out
    }

    /// `source - A x`.
    pub fn residual(&self, x: &[T]) -> Vec<T> {
        let ax = self.apply(x);
        self.source.iter().zip(ax).map(|(s, a)| *s - a).collect()
    }

    /// `source - (A - diag(A)) x`, the numerator of a Jacobi sweep.
    pub fn h_operator(&self, x: &[T]) -> Vec<T> {
        let mut out = self.source.clone();
        for c in 0..T::COMPONENTS {
            let xc = component(x, c);
            for (i, o) in out.iter_mut().enumerate() {
                let v = o.component(c) - self.matrix.offdiag_row_product(i, &xc);
                o.set_component(c, v);
            }
        }
        out
    }

    /// Implicit under-relaxation towards `previous` with factor `alpha`.
    pub fn relax(&mut self, alpha: f64, previous: &[T]) -> Result<(), FvmError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(FvmError::InvalidArgument(format!("relaxation factor must be in (0, 1], got {alpha}")));
        }
        if alpha == 1.0 {
            return Ok(());
        }
        for i in 0..self.n() {
            let d = self.matrix.diag(i);
            self.matrix.set_diag(i, d / alpha);
            self.source[i] += previous[i] * (d * (1.0 - alpha) / alpha);
        }
        Ok(())
    }

    /// Solves `A x = source + extra` component by component from `x0`.
    pub fn solve(
        &self,
        x0: &[T],
        extra: Option<&[T]>,
        method: Krylov,
        cfg: &SolveConfig,
    ) -> Result<(Vec<T>, Vec<SolveReport>), FvmError> {
        let mut x = x0.to_vec();
        let mut reports = Vec::with_capacity(T::COMPONENTS);
        for c in 0..T::COMPONENTS {
            let mut b = component(&self.source, c);
            if let Some(extra) = extra {
                for (b, e) in b.iter_mut().zip(extra) {
                    *b += e.component(c);
                }
            }
            let xc = component(x0, c);
            let (sol, report) = match method {
                Krylov::Cg => linsolve::cg(&self.matrix, &b, &xc, cfg)?,
                Krylov::BiCgStab => linsolve::bicgstab(&self.matrix, &b, &xc, cfg)?,
            };
            for (x, v) in x.iter_mut().zip(sol) {
                x.set_component(c, v);
            }
            reports.push(report);
        }
        Ok((x, reports))
    }
}

/// Component `c` of every value.
pub fn component<T: FieldValue>(values: &[T], c: usize) -> Vec<f64> {
    values.iter().map(|v| v.component(c)).collect()
}

/// Face values of a field: linear interpolation inside, boundary values on
/// boundary faces.
pub fn interpolate_to_faces<T: FieldValue>(fv: &FvMesh, field: &Field<T>) -> Vec<T> {
    (0..fv.mesh.n_faces()).into_par_iter().map(|f| field.face_value(fv, f)).collect()
}

/// Linear interpolation of cell values; boundary faces take the owner value.
pub fn interpolate_cells<T: FieldValue>(fv: &FvMesh, values: &[T]) -> Vec<T> {
    let n_int = fv.n_internal_faces();
    let (own, nei) = (fv.mesh.owner(), fv.mesh.neighbour());
    (0..fv.mesh.n_faces())
        .into_par_iter()
        .map(|f| {
            if f < n_int {
                let w = fv.geometry.weight[f];
                values[own[f]] * w + values[nei[f]] * (1.0 - w)
            } else {
                values[own[f]]
            }
        })
        .collect()
}

/// Gauss gradient `(1/V) sum_f S_f (x) phi_f`.
pub fn gauss_gradient<T: FieldValue>(fv: &FvMesh, field: &Field<T>) -> Vec<T::Grad> {
    let faces = interpolate_to_faces(fv, field);
    (0..fv.n_cells())
        .into_par_iter()
        .map(|c| {
            let mut g = T::grad_zero();
            for cf in fv.adjacency.faces_of(c) {
                g += T::outer(&(fv.geometry.face_area[cf.face] * cf.sign()), &faces[cf.face]);
            }
            g * (1.0 / fv.geometry.cell_volume[c])
        })
        .collect()
}

/// Net outflow `sum_f sign phi_f` of every cell.
pub fn flux_divergence(fv: &FvMesh, flux: &[f64]) -> Vec<f64> {
    (0..fv.n_cells())
        .into_par_iter()
        .map(|c| fv.adjacency.faces_of(c).iter().map(|cf| cf.sign() * flux[cf.face]).sum())
        .collect()
}

/// `max_cell |net outflow| / max_face |flux|`, or 0 for a zero flux field.
pub fn continuity_error(fv: &FvMesh, flux: &[f64]) -> f64 {
    let max_flux = flux.iter().fold(0.0_f64, |m, f| m.max(f.abs()));
    if max_flux == 0.0 {
        return 0.0;
    }
    flux_divergence(fv, flux).iter().fold(0.0_f64, |m, d| m.max(d.abs())) / max_flux
}

/// Explicit nonorthogonal correction `gamma_f k_f . (grad phi)_f` of face `f`,
/// limited against the orthogonal part `orth`.
fn correction<T: FieldValue>(fv: &FvMesh, f: usize, gamma: f64, grad: &[T::Grad], orth: T, limiter: f64) -> T {
    let k = fv.k[f];
    if k == Vec3::zeros() || limiter == 0.0 {
        return T::zero();
    }
    let own = fv.mesh.owner()[f];
    let g = if f < fv.n_internal_faces() {
        let w = fv.geometry.weight[f];
        grad[own] * w + grad[fv.mesh.neighbour()[f]] * (1.0 - w)
    } else {
        grad[own]
    };
    let corr = T::dot_grad(&k, &g) * gamma;
    if limiter < 1.0 {
        let mag = corr.magnitude();
        if mag > 0.0 {
            let lim = (limiter / (1.0 - limiter) * orth.magnitude() / mag).min(1.0);
            return corr * lim;
        }
    }
    corr
}

fn check_gamma(fv: &FvMesh, gamma: &[f64]) {
    assert_eq!(gamma.len(), fv.mesh.n_faces(), "face diffusivity must cover every face");
}

/// `div(gamma grad phi)`, with the nonorthogonal correction computed from the
/// field's current Gauss gradient when the scheme enables it.
pub fn laplacian<T: FieldValue>(fv: &FvMesh, gamma: &[f64], field: &Field<T>, scheme: &SchemeConfig) -> FvMatrix<T> {
    let grad = scheme.nonorth_correction.then(|| gauss_gradient(fv, field));
    laplacian_with_gradient(fv, gamma, field, grad.as_deref(), scheme)
}

/// `div(gamma grad phi)` with a caller-supplied gradient for the explicit
/// correction. `None` disables the correction.
pub fn laplacian_with_gradient<T: FieldValue>(
    fv: &FvMesh,
    gamma: &[f64],
    field: &Field<T>,
    grad: Option<&[T::Grad]>,
    scheme: &SchemeConfig,
) -> FvMatrix<T> {
    check_gamma(fv, gamma);
    let grad = grad.filter(|_| scheme.nonorth_correction);
    let mut m = FvMatrix::zeros(&fv.pattern);
    let (own, nei) = (fv.mesh.owner(), fv.mesh.neighbour());
    let slots = fv.pattern.face_slots();
    for f in 0..fv.n_internal_faces() {
        let c = gamma[f] * fv.delta_coeff[f];
        let (o, n) = (own[f], nei[f]);
        m.matrix.add(slots[f].upper, c);
        m.matrix.add(slots[f].lower, c);
        m.matrix.add_diag(o, -c);
        m.matrix.add_diag(n, -c);
        if let Some(grad) = grad {
            let orth = (field.values[n] - field.values[o]) * c;
            let corr = correction(fv, f, gamma[f], grad, orth, scheme.limiter);
            m.source[o] -= corr;
            m.source[n] += corr;
        }
    }
    for f in fv.n_internal_faces()..fv.mesh.n_faces() {
        if !field.face_bc(fv, f).is_fixed() {
            continue;
        }
        let o = own[f];
        let c = gamma[f] * fv.delta_coeff[f];
        let phi_b = field.boundary_value(fv, f);
        m.matrix.add_diag(o, -c);
        m.source[o] -= phi_b * c;
        if let Some(grad) = grad {
            let orth = (phi_b - field.values[o]) * c;
            m.source[o] -= correction(fv, f, gamma[f], grad, orth, scheme.limiter);
        }
    }
    m
}

/// Face fluxes `gamma_f (grad phi)_f . S_f` consistent with
/// [`laplacian_with_gradient`]: summing them per cell reproduces the assembled
/// operator applied to the field.
pub fn laplacian_flux<T: FieldValue>(
    fv: &FvMesh,
    gamma: &[f64],
    field: &Field<T>,
    grad: Option<&[T::Grad]>,
    scheme: &SchemeConfig,
) -> Vec<T> {
    check_gamma(fv, gamma);
    let grad = grad.filter(|_| scheme.nonorth_correction);
    let n_int = fv.n_internal_faces();
    let (own, nei) = (fv.mesh.owner(), fv.mesh.neighbour());
    (0..fv.mesh.n_faces())
        .into_par_iter()
        .map(|f| {
            let o = own[f];
            let other = if f < n_int {
                field.values[nei[f]]
            } else if field.face_bc(fv, f).is_fixed() {
                field.boundary_value(fv, f)
            } else {
                return T::zero();
            };
            let orth = (other - field.values[o]) * (gamma[f] * fv.delta_coeff[f]);
            match grad {
                Some(grad) => orth + correction(fv, f, gamma[f], grad, orth, scheme.limiter),
                None => orth,
            }
        })
        .collect()
}

/// Linear interpolation of a cell diffusivity to faces.
pub fn face_gamma(fv: &FvMesh, cell_gamma: &[f64]) -> Vec<f64> {
    interpolate_cells(fv, cell_gamma)
}

/// Implicit convection `div(F phi)` for face fluxes `F` out of the owner.
pub fn divergence_convection<T: FieldValue>(
    fv: &FvMesh,
    flux: &[f64],
    field: &Field<T>,
    scheme: &SchemeConfig,
) -> FvMatrix<T> {
    assert_eq!(flux.len(), fv.mesh.n_faces(), "flux must cover every face");
    let mut m = FvMatrix::zeros(&fv.pattern);
    let (own, nei) = (fv.mesh.owner(), fv.mesh.neighbour());
    let slots = fv.pattern.face_slots();
    for f in 0..fv.n_internal_faces() {
        let flux_f = flux[f];
        let (o, n) = (own[f], nei[f]);
        match scheme.convection {
            ConvectionScheme::Upwind => {
                m.matrix.add_diag(o, flux_f.max(0.0));
                m.matrix.add(slots[f].upper, flux_f.min(0.0));
                m.matrix.add_diag(n, (-flux_f).max(0.0));
                m.matrix.add(slots[f].lower, -flux_f.max(0.0));
            }
            ConvectionScheme::Linear => {
                let w = fv.geometry.weight[f];
                m.matrix.add_diag(o, flux_f * w);
                m.matrix.add(slots[f].upper, flux_f * (1.0 - w));
                m.matrix.add_diag(n, -flux_f * (1.0 - w));
                m.matrix.add(slots[f].lower, -flux_f * w);
            }
        }
    }
    for f in fv.n_internal_faces()..fv.mesh.n_faces() {
        let bc = field.face_bc(fv, f);
        if bc.is_empty() {
            continue;
        }
        if bc.is_fixed() {
            m.source[own[f]] -= field.boundary_value(fv, f) * flux[f];
        } else {
            m.matrix.add_diag(own[f], flux[f]);
        }
    }
    m
}

/// Implicit Euler `d phi / dt` integrated over each cell.
pub fn ddt_euler<T: FieldValue>(fv: &FvMesh, old: &[T], dt: f64) -> Result<FvMatrix<T>, FvmError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(FvmError::InvalidArgument(format!("time step must be positive and finite, got {dt}")));
    }
    let mut m = FvMatrix::zeros(&fv.pattern);
    for (i, &v) in fv.geometry.cell_volume.iter().enumerate() {
        m.matrix.add_diag(i, v / dt);
        m.source[i] = old[i] * (v / dt);
    }
    Ok(m)
}

/// Rhie-Chow face flux
/// `phi_f = u_f . S_f - D_f [ |Delta|/|d| (p_N - p_P) - (grad p)_f . Delta ]`
/// with `D = V / a_P` interpolated to the face. The bracket vanishes for
/// pressure fields whose gradient is reproduced exactly by the cell gradients,
/// leaving only the damping of odd-even pressure modes.
pub fn rhie_chow_flux(
    fv: &FvMesh,
    u: &Field<Vec3>,
    p: &Field<f64>,
    a_p: &[f64],
    grad_p: &[Vec3],
) -> Result<Vec<f64>, FvmError> {
    if let Some(cell) = a_p.iter().position(|a| *a == 0.0 || !a.is_finite()) {
        return Err(FvmError::ZeroDiagonal { cell });
    }
    let d_cell: Vec<f64> = fv.geometry.cell_volume.iter().zip(a_p).map(|(v, a)| v / a).collect();
    let n_int = fv.n_internal_faces();
    let (own, nei) = (fv.mesh.owner(), fv.mesh.neighbour());
    Ok((0..fv.mesh.n_faces())
        .into_par_iter()
        .map(|f| {
            let s = fv.geometry.face_area[f];
            let o = own[f];
            if f < n_int {
                let n = nei[f];
                let w = fv.geometry.weight[f];
                let u_f = u.values[o] * w + u.values[n] * (1.0 - w);
                let d_f = d_cell[o] * w + d_cell[n] * (1.0 - w);
                let g_f = grad_p[o] * w + grad_p[n] * (1.0 - w);
                let bracket = fv.delta_coeff[f] * (p.values[n] - p.values[o]) - g_f.dot(&fv.delta_vector(f));
                u_f.dot(&s) - d_f * bracket
            } else {
                let patch = fv.mesh.patch_of(f).expect("boundary face");
                let (ubc, pbc) = (u.bc(patch), p.bc(patch));
                if ubc.is_empty() {
                    return 0.0;
                }
                let plain = u.boundary_value(fv, f).dot(&s);
                if ubc.is_fixed() || !pbc.is_fixed() {
                    return plain;
                }
                let bracket =
                    fv.delta_coeff[f] * (p.boundary_value(fv, f) - p.values[o]) - grad_p[o].dot(&fv.delta_vector(f));
                plain - d_cell[o] * bracket
            }
        })
        .collect())
}

/// Time-derivative flux correction `c_f (phi_old - u_old_f . S_f)` on
/// internal faces, with the cell coefficient `c = V / (dt a_P)` interpolated to
/// the face. Added to the transient Rhie-Chow flux it makes the steady state
/// independent of the time step.
pub fn ddt_flux_correction(fv: &FvMesh, u_old: &[Vec3], flux_old: &[f64], coeff: &[f64]) -> Result<Vec<f64>, FvmError> {
    let n_faces = fv.mesh.n_faces();
    if flux_old.len() != n_faces || u_old.len() != fv.mesh.n_cells() || coeff.len() != fv.mesh.n_cells() {
        return Err(FvmError::InvalidArgument("ddt flux correction: size mismatch".into()));
    }
    let n_int = fv.n_internal_faces();
    let (own, nei) = (fv.mesh.owner(), fv.mesh.neighbour());
    Ok((0..n_faces)
        .into_par_iter()
        .map(|f| {
            if f >= n_int {
                return 0.0;
            }
            let (o, n) = (own[f], nei[f]);
            let w = fv.geometry.weight[f];
            let u_f = u_old[o] * w + u_old[n] * (1.0 - w);
            let c_f = coeff[o] * w + coeff[n] * (1.0 - w);
            c_f * (flux_old[f] - u_f.dot(&fv.geometry.face_area[f]))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::mesh::fixtures;

    fn two_cubes() -> FvMesh {
        FvMesh::new(fixtures::two_cubes()).unwrap()
    }

    fn zero_gradient<T>(fv: &FvMesh) -> Vec<BoundaryCondition<T>> {
        fv.mesh
            .patches()
            .iter()
            .map(
                |p| if p.kind == PatchKind::Empty { BoundaryCondition::Empty } else { BoundaryCondition::ZeroGradient },
            )
            .collect()
    }

    fn cavity(n: usize) -> FvMesh {
        FvMesh::new(cases::gen_cavity(n).unwrap().mesh).unwrap()
    }

    #[test]
    fn interpolation_of_two_cubes() {
        let fv = two_cubes();
        let mut phi = Field::new("phi", &fv, zero_gradient(&fv), 0.0).unwrap();
        phi.values = vec![0.0, 2.0];
        phi.correct_boundary(&fv);
        assert!((interpolate_to_faces(&fv, &phi)[0] - 1.0).abs() < 1e-15);
        phi.values = vec![3.5, 3.5];
        phi.correct_boundary(&fv);
        assert!(interpolate_to_faces(&fv, &phi).iter().all(|&v| v == 3.5));
    }

    #[test]
    fn gradient_of_constant_and_linear_fields() {
        let fv = cavity(4);
        let mut phi = Field::new("phi", &fv, zero_gradient(&fv), 2.0).unwrap();
        for g in gauss_gradient(&fv, &phi) {
            assert!(g.norm() < 1e-12);
        }
        phi.values = fv.geometry.cell_centroid.iter().map(|c| c.x).collect();
        phi.correct_boundary(&fv);
        let grad = gauss_gradient(&fv, &phi);
        for c in 0..fv.n_cells() {
            let interior = fv.adjacency.faces_of(c).iter().all(|cf| matches!(cf.across, mesh::Across::Cell(_)));
            if interior {
                assert!((grad[c] - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12, "{}", grad[c]);
            }
        }
    }

    #[test]
    fn vector_gradient_matches_component_gradients() {
        let fv = cavity(3);
        let mut u = Field::new("u", &fv, zero_gradient(&fv), Vec3::zeros()).unwrap();
        u.values = fv.geometry.cell_centroid.iter().map(|c| Vec3::new(c.y, 2.0 * c.x, c.z * c.z)).collect();
        u.correct_boundary(&fv);
        let g = gauss_gradient(&fv, &u);
        for comp in 0..3 {
            let mut s = Field::new("s", &fv, zero_gradient(&fv), 0.0).unwrap();
            s.values = component(&u.values, comp);
            s.correct_boundary(&fv);
            let gs = gauss_gradient(&fv, &s);
            for c in 0..fv.n_cells() {
                for i in 0..3 {
                    assert!((g[c][(i, comp)] - gs[c][i]).abs() < 1e-14);
                }
            }
        }
        let d = Vec3::new(0.3, -1.0, 2.0);
        assert!((Vec3::dot_grad(&d, &g[5]) - g[5].transpose() * d).norm() < 1e-15);
    }

    #[test]
    fn laplacian_on_uniform_cubes() {
        let fv = cavity(3);
        let h = 0.1 / 3.0;
        let phi = Field::new("phi", &fv, zero_gradient(&fv), 0.0).unwrap();
        let gamma = vec![1.0; fv.mesh.n_faces()];
        let m = laplacian(&fv, &gamma, &phi, &SchemeConfig::default());
        let slots = fv.pattern.face_slots();
        for (f, s) in slots.iter().enumerate() {
            assert!((m.matrix.get(s.upper) - h).abs() < 1e-14, "face {f}");
            assert_eq!(m.matrix.get(s.upper), m.matrix.get(s.lower));
        }
        // Centre cell of 3x3x3 is the only interior cell.
        assert!((m.matrix.diag(13) + 6.0 * h).abs() < 1e-14);
        assert!(fv.k.iter().all(|k| *k == Vec3::zeros()));
        assert!(m.source.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn fixed_value_boundary_contributes_source() {
        let fv = two_cubes();
        let bcs = vec![BoundaryCondition::FixedValue(4.0)];
        let phi = Field::new("phi", &fv, bcs, 0.0).unwrap();
        let gamma = vec![1.0; fv.mesh.n_faces()];
        let m = laplacian(&fv, &gamma, &phi, &SchemeConfig::default());
        // Uniform boundary value 4 makes phi = 4 the exact discrete solution.
        let r = m.residual(&[4.0, 4.0]);
        assert!(r.iter().all(|r| r.abs() < 1e-13));
    }

    #[test]
    fn laplacian_flux_sums_to_operator() {
        let case = cases::gen_skewed_duct(6, 4, 30.0).unwrap();
        let fv = FvMesh::new(case.mesh).unwrap();
        let bcs = fv
            .mesh
            .patches()
            .iter()
            .map(|p| match p.kind {
                PatchKind::Empty => BoundaryCondition::Empty,
                PatchKind::Inlet => BoundaryCondition::FixedValue(1.0),
                _ => BoundaryCondition::ZeroGradient,
            })
            .collect();
        let mut phi = Field::new("phi", &fv, bcs, 0.0).unwrap();
        phi.values = fv.geometry.cell_centroid.iter().map(|c| (3.0 * c.x).sin() + c.y * c.y).collect();
        phi.correct_boundary(&fv);
        let gamma: Vec<f64> = (0..fv.mesh.n_faces()).map(|f| 1.0 + 0.1 * (f % 7) as f64).collect();
        let scheme = SchemeConfig { limiter: 0.6, ..SchemeConfig::default() };
        let grad = gauss_gradient(&fv, &phi);
        let m = laplacian_with_gradient(&fv, &gamma, &phi, Some(&grad), &scheme);
        let flux = laplacian_flux(&fv, &gamma, &phi, Some(&grad), &scheme);
        let div = flux_divergence(&fv, &flux);
        let r = m.residual(&phi.values);
        for c in 0..fv.n_cells() {
            assert!((div[c] + r[c]).abs() < 1e-12 * (1.0 + div[c].abs()), "cell {c}");
        }
    }

    #[test]
    fn upwind_single_face() {
        let fv = two_cubes();
        let phi = Field::new("phi", &fv, vec![BoundaryCondition::ZeroGradient], 0.0).unwrap();
        let mut flux = vec![0.0; fv.mesh.n_faces()];
        let m = divergence_convection(&fv, &flux, &phi, &SchemeConfig::default());
        assert!(m.matrix.ell_values().iter().all(|&v| v == 0.0));
        flux[0] = 2.5;
        let m = divergence_convection(&fv, &flux, &phi, &SchemeConfig::default());
        let s = fv.pattern.face_slots()[0];
        assert_eq!(m.matrix.diag(0), 2.5);
        assert_eq!(m.matrix.get(s.upper), 0.0);
        assert_eq!(m.matrix.get(s.lower), -2.5);
        assert_eq!(m.matrix.diag(1), 0.0);
    }

    #[test]
    fn ddt_arithmetic_and_limits() {
        let fv = FvMesh::new(fixtures::single_cube(fixtures::cube_points(Vec3::zeros(), 1.0))).unwrap();
        let m = ddt_euler(&fv, &[2.0], 0.1).unwrap();
        assert!((m.matrix.diag(0) - 10.0).abs() < 1e-12);
        assert!((m.source[0] - 20.0).abs() < 1e-12);
        let m = ddt_euler(&fv, &[2.0], 1e300).unwrap();
        assert!(m.matrix.diag(0) < 1e-299 && m.source[0] < 1e-299);
        assert!(ddt_euler(&fv, &[2.0], 0.0).is_err());
        assert!(ddt_euler(&fv, &[2.0], -1.0).is_err());
    }

    #[test]
    fn implicit_euler_decay() {
        let fv = FvMesh::new(fixtures::single_cube(fixtures::cube_points(Vec3::zeros(), 1.0))).unwrap();
        let dt = 0.1;
        let mut phi = 1.0;
        for _ in 0..10 {
            let mut m = ddt_euler(&fv, &[phi], dt).unwrap();
            m.matrix.add_diag(0, 1.0);
            let (x, _) =
                m.solve(&[phi], None, Krylov::Cg, &SolveConfig { tolerance: 1e-15, ..Default::default() }).unwrap();
            phi = x[0];
        }
        let mut oracle = 1.0;
        for _ in 0..10 {
            oracle /= 1.0 + dt;
        }
        assert!((phi - oracle).abs() <= 1e-15 * oracle);
    }

    #[test]
    fn timed_inlet_values() {
        assert_eq!(timed_inlet_speed(0.01, 0.5, 0.0), 0.0);
        assert!((timed_inlet_speed(0.01, 0.5, 0.5) - 0.01).abs() < 1e-18);
        let a = 2.0;
        assert!((mass_flow_speed(9.975e-4, 1000.0, a) - 9.975e-7 / a).abs() < 1e-20);
    }

    #[test]
    fn inlet_velocity_points_inward() {
        let case = cases::gen_channel(4, 2, 0.16, 0.02).unwrap();
        let fv = FvMesh::new(case.mesh).unwrap();
        let inlet = fv.mesh.patch_by_name("inlet").unwrap();
        let mut bcs: Vec<BoundaryCondition<Vec3>> = zero_gradient(&fv);
        bcs[inlet] = BoundaryCondition::TimedInlet { u0: 0.01, frequency: 0.5 };
        let mut u = Field::new("u", &fv, bcs.clone(), Vec3::zeros()).unwrap();
        u.apply_bcs(&fv, 0.5).unwrap();
        for f in fv.mesh.patches()[inlet].faces() {
            assert!((u.boundary_value(&fv, f) - Vec3::new(0.01, 0.0, 0.0)).norm() < 1e-15);
        }
        bcs[inlet] = BoundaryCondition::FixedMassFlow { mass_flow: 9.975e-4, rho: 1000.0 };
        let u = Field::new("u", &fv, bcs, Vec3::zeros()).unwrap();
        let area = fv.patch_area(inlet);
        let f = fv.mesh.patches()[inlet].start;
        assert!((u.boundary_value(&fv, f).x - 9.975e-7 / area).abs() < 1e-15);
    }

    #[test]
    fn invalid_boundary_conditions() {
        let fv = two_cubes();
        assert!(Field::new("p", &fv, vec![BoundaryCondition::NoSlip], 0.0).is_err());
        assert!(Field::new("u", &fv, vec![BoundaryCondition::FixedPressure(0.0)], Vec3::zeros()).is_err());
        assert!(Field::new("p", &fv, vec![BoundaryCondition::Empty], 0.0).is_err());
        assert!(Field::<f64>::new("p", &fv, vec![], 0.0).is_err());
        let bad = BoundaryCondition::FixedMassFlow { mass_flow: 1.0, rho: 0.0 };
        assert!(Field::new("u", &fv, vec![bad], Vec3::zeros()).is_err());
    }

    #[test]
    fn ddt_correction_vanishes_for_interpolated_flux() {
        let fv = FvMesh::new(cases::gen_cavity(3).unwrap().mesh).unwrap();
        let u: Vec<Vec3> = fv.geometry.cell_centroid.iter().map(|c| Vec3::new(c.y, -c.x, 2.0 * c.z)).collect();
        let flux: Vec<f64> = (0..fv.mesh.n_faces())
            .map(|f| {
                if f < fv.n_internal_faces() {
                    let w = fv.geometry.weight[f];
                    let (o, n) = (fv.mesh.owner()[f], fv.mesh.neighbour()[f]);
                    (u[o] * w + u[n] * (1.0 - w)).dot(&fv.geometry.face_area[f])
                } else {
                    1.0
                }
            })
            .collect();
        let coeff = vec![0.5; fv.mesh.n_cells()];
        let corr = ddt_flux_correction(&fv, &u, &flux, &coeff).unwrap();
        assert!(corr.iter().all(|c| c.abs() < 1e-15));
        let mut shifted = flux.clone();
        shifted[0] += 2.0;
        let corr = ddt_flux_correction(&fv, &u, &shifted, &coeff).unwrap();
        assert!((corr[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rhie_chow_consistency() {
        let fv = cavity(4);
        let u_bcs = vec![BoundaryCondition::FixedValue(Vec3::new(1.0, 0.0, 0.0)), BoundaryCondition::NoSlip];
        let mut u = Field::new("u", &fv, u_bcs.clone(), Vec3::zeros()).unwrap();
        u.values = fv.geometry.cell_centroid.iter().map(|c| Vec3::new(c.y, -c.x, 0.5)).collect();
        let mut p = Field::new("p", &fv, zero_gradient(&fv), 1.0).unwrap();
        let a_p = vec![3.0; fv.n_cells()];
        let grad = gauss_gradient(&fv, &p);
        let flux = rhie_chow_flux(&fv, &u, &p, &a_p, &grad).unwrap();
        let plain = interpolate_to_faces(&fv, &u);
        for f in 0..fv.mesh.n_faces() {
            assert!((flux[f] - plain[f].dot(&fv.geometry.face_area[f])).abs() < 1e-15);
        }
        // Linear pressure, zero velocity: correction cancels on internal faces.
        let u0 = Field::new("u", &fv, u_bcs, Vec3::zeros()).unwrap();
        p.values = fv.geometry.cell_centroid.iter().map(|c| 2.0 * c.x - c.y + 0.5 * c.z).collect();
        p.correct_boundary(&fv);
        let exact = vec![Vec3::new(2.0, -1.0, 0.5); fv.n_cells()];
        let flux = rhie_chow_flux(&fv, &u0, &p, &a_p, &exact).unwrap();
        for f in 0..fv.n_internal_faces() {
            assert!(flux[f].abs() < 1e-15, "face {f}: {}", flux[f]);
        }
        assert_eq!(
            rhie_chow_flux(&fv, &u0, &p, &vec![0.0; fv.n_cells()], &exact),
            Err(FvmError::ZeroDiagonal { cell: 0 })
        );
    }

    #[test]
    fn relaxation_preserves_fixed_point() {
        let fv = cavity(3);
        let phi =
            Field::new("phi", &fv, vec![BoundaryCondition::FixedValue(1.0), BoundaryCondition::FixedValue(0.0)], 0.0)
                .unwrap();
        let gamma = vec![1.0; fv.mesh.n_faces()];
        let mut m = laplacian(&fv, &gamma, &phi, &SchemeConfig::default());
        m.negate();
        let cfg = SolveConfig { tolerance: 1e-14, ..Default::default() };
        let (x, _) = m.solve(&phi.values, None, Krylov::Cg, &cfg).unwrap();
        let mut relaxed = m.clone();
        relaxed.relax(0.5, &x).unwrap();
        let r = relaxed.residual(&x);
        assert!(r.iter().all(|r| r.abs() < 1e-12));
        assert!(m.clone().relax(0.0, &x).is_err());
    }

    #[test]
    fn h_operator_is_source_minus_offdiagonal() {
        let fv = cavity(2);
        let phi =
            Field::new("phi", &fv, vec![BoundaryCondition::FixedValue(1.0), BoundaryCondition::FixedValue(0.0)], 0.0)
                .unwrap();
        let gamma = vec![2.0; fv.mesh.n_faces()];
        let m = laplacian(&fv, &gamma, &phi, &SchemeConfig::default());
        let x: Vec<f64> = (0..fv.n_cells()).map(|i| i as f64).collect();
        let h = m.h_operator(&x);
        let r = m.residual(&x);
        for i in 0..fv.n_cells() {
            assert!((h[i] - m.matrix.diag(i) * x[i] - r[i]).abs() < 1e-13);
        }
    }
}
