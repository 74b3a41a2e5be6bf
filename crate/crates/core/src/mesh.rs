//! Unstructured polyhedral meshes in owner/neighbour face addressing.
//!
//! Faces are stored internal-first. Internal faces carry an owner and a
//! neighbour cell with `owner < neighbour`; boundary faces follow, grouped in
//! contiguous patch ranges. The face point loop is oriented so that its
//! right-hand normal points out of the owner cell.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::Vec3;

/// Meshes with any internal face more nonorthogonal than this are rejected.
pub const MAX_NONORTHOGONALITY_DEG: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeshError {
    #[error("invalid mesh topology: {0}")]
    Topology(String),
    #[error("face {face} has zero area")]
    DegenerateFace { face: usize },
    #[error("cell {cell} has non-positive volume {volume:e}")]
    NegativeVolume { cell: usize, volume: f64 },
    #[error("face {face} has coincident owner/neighbour centroids")]
    CoincidentCentroids { face: usize },
    #[error("face {face} nonorthogonality {angle:.2} deg exceeds {MAX_NONORTHOGONALITY_DEG} deg")]
    Nonorthogonal { face: usize, angle: f64 },
}

/// Physical role of a boundary patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchKind {
    Wall,
    Inlet,
    Outlet,
    /// Front and back planes of one-cell-thick 2D meshes. Excluded from the
    /// discretisation.
    Empty,
}

impl PatchKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PatchKind::Wall => "wall",
            PatchKind::Inlet => "inlet",
            PatchKind::Outlet => "outlet",
            PatchKind::Empty => "empty",
        }
    }
}

impl fmt::Display for PatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatchKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "wall" => Ok(PatchKind::Wall),
            "inlet" => Ok(PatchKind::Inlet),
            "outlet" => Ok(PatchKind::Outlet),
            "empty" => Ok(PatchKind::Empty),
            other => Err(format!("unknown patch kind '{other}'")),
        }
    }
}

/// A named contiguous range of boundary faces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub name: String,
    pub kind: PatchKind,
    pub start: usize,
    pub count: usize,
}

impl Patch {
    pub fn new(name: impl Into<String>, kind: PatchKind, start: usize, count: usize) -> Self {
        Self { name: name.into(), kind, start, count }
    }

    pub fn faces(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.count
    }
}

/// Polyhedral mesh topology. Immutable once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    points: Vec<Vec3>,
    face_offsets: Vec<usize>,
    face_points: Vec<usize>,
    owner: Vec<usize>,
    neighbour: Vec<usize>,
    patches: Vec<Patch>,
    boundary_patch: Vec<usize>,
    n_cells: usize,
}

impl Mesh {
    /// Builds and validates a mesh from per-face point loops.
    pub fn new(
        points: Vec<Vec3>,
        faces: Vec<Vec<usize>>,
        owner: Vec<usize>,
        neighbour: Vec<usize>,
        patches: Vec<Patch>,
    ) -> Result<Self, MeshError> {
        let mut face_offsets = Vec::with_capacity(faces.len() + 1);
        let mut face_points = Vec::with_capacity(faces.iter().map(Vec::len).sum());
        face_offsets.push(0);
        for f in &faces {
            face_points.extend_from_slice(f);
            face_offsets.push(face_points.len());
        }
        Self::from_flat(points, face_offsets, face_points, owner, neighbour, patches)
    }

    /// Builds and validates a mesh from a flattened face list: the points of
    /// face `f` are `face_points[face_offsets[f]..face_offsets[f + 1]]`.
    pub fn from_flat(
        points: Vec<Vec3>,
        face_offsets: Vec<usize>,
        face_points: Vec<usize>,
        owner: Vec<usize>,
        neighbour: Vec<usize>,
        patches: Vec<Patch>,
    ) -> Result<Self, MeshError> {
        let topo = |msg: String| MeshError::Topology(msg);
        if face_offsets.is_empty() || face_offsets[0] != 0 {
            return Err(topo("face offsets must start at 0".into()));
        }
        let n_faces = face_offsets.len() - 1;
        if *face_offsets.last().unwrap() != face_points.len() {
            return Err(topo("face offsets do not cover the point list".into()));
        }
        if owner.len() != n_faces {
            return Err(topo(format!("{} owners for {} faces", owner.len(), n_faces)));
        }
        let n_internal = neighbour.len();
        if n_internal > n_faces {
            return Err(topo(format!("{n_internal} neighbours for {n_faces} faces")));
        }

        for f in 0..n_faces {
            let loop_ = &face_points[face_offsets[f]..face_offsets[f + 1]];
            if loop_.len() < 3 {
                return Err(topo(format!("face {f} has {} points, need at least 3", loop_.len())));
            }
            for (a, &p) in loop_.iter().enumerate() {
                if p >= points.len() {
                    return Err(topo(format!("face {f} references missing point {p}")));
                }
                if loop_[..a].contains(&p) {
                    return Err(topo(format!("face {f} repeats point {p}")));
                }
            }
        }

        for f in 0..n_internal {
            if owner[f] >= neighbour[f] {
                return Err(topo(format!(
                    "internal face {f}: owner {} must be below neighbour {}",
                    owner[f], neighbour[f]
                )));
            }
        }

        let mut next = n_internal;
        for p in &patches {
            if p.start != next {
                return Err(topo(format!(
                    "patch '{}' starts at face {} but boundary faces continue at {next}",
                    p.name, p.start
                )));
            }
            next += p.count;
        }
        if next != n_faces {
            return Err(topo(format!("patches cover boundary faces up to {next}, mesh has {n_faces} faces")));
        }
        let mut boundary_patch = Vec::with_capacity(n_faces - n_internal);
        for (pi, p) in patches.iter().enumerate() {
            boundary_patch.extend(std::iter::repeat_n(pi, p.count));
        }

        let n_cells = owner.iter().chain(&neighbour).map(|&c| c + 1).max().unwrap_or(0);
        let mut faces_per_cell = vec![0usize; n_cells];
        for &c in owner.iter().chain(&neighbour) {
            faces_per_cell[c] += 1;
        }
        if let Some(c) = faces_per_cell.iter().position(|&n| n < 4) {
            return Err(topo(format!("cell {c} has {} faces, a polyhedron needs at least 4", faces_per_cell[c])));
        }

        Ok(Self { points, face_offsets, face_points, owner, neighbour, patches, boundary_patch, n_cells })
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn n_faces(&self) -> usize {
        self.owner.len()
    }

    pub fn n_internal_faces(&self) -> usize {
        self.neighbour.len()
    }

    pub fn n_boundary_faces(&self) -> usize {
        self.n_faces() - self.n_internal_faces()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn face(&self, f: usize) -> &[usize] {
        &self.face_points[self.face_offsets[f]..self.face_offsets[f + 1]]
    }

    pub fn faces(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.n_faces()).map(move |f| self.face(f))
    }

    pub fn owner(&self) -> &[usize] {
        &self.owner
    }

    pub fn neighbour(&self) -> &[usize] {
        &self.neighbour
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }

    pub fn is_internal(&self, f: usize) -> bool {
        f < self.neighbour.len()
    }

    /// Patch index of a boundary face.
    pub fn patch_of(&self, f: usize) -> Option<usize> {
        f.checked_sub(self.n_internal_faces()).map(|b| self.boundary_patch[b])
    }

    pub fn patch_by_name(&self, name: &str) -> Option<usize> {
        self.patches.iter().position(|p| p.name == name)
    }
}

/// Geometric quantities derived from a [`Mesh`].
#[derive(Debug, Clone)]
pub struct MeshGeometry {
    pub cell_volume: Vec<f64>,
    pub cell_centroid: Vec<Vec3>,
    /// Area vector per face, oriented out of the owner cell.
    pub face_area: Vec<Vec3>,
    pub face_centroid: Vec<Vec3>,
    /// Per face: `C_N - C_O` on internal faces, `C_f - C_O` on boundary faces.
    pub delta: Vec<Vec3>,
    /// Owner-side linear interpolation weight per internal face.
    pub weight: Vec<f64>,
    /// Angle between `delta` and the area vector per internal face, degrees.
    pub nonorth_angle: Vec<f64>,
}

impl MeshGeometry {
    pub fn max_nonorthogonality(&self) -> f64 {
        self.nonorth_angle.iter().copied().fold(0.0, f64::max)
    }

    pub fn total_volume(&self) -> f64 {
        self.cell_volume.iter().sum()
    }

    pub fn face_magnitude(&self, f: usize) -> f64 {
        self.face_area[f].norm()
    }

    /// Largest per-cell `|sum of outward area vectors| / sum of face areas`.
    pub fn closedness_error(&self, adjacency: &CellFaceAdjacency) -> f64 {
        (0..adjacency.n_cells())
            .map(|c| {
                let mut sum = Vec3::zeros();
                let mut total = 0.0;
                for cf in adjacency.faces_of(c) {
                    sum += self.face_area[cf.face] * cf.sign();
                    total += self.face_area[cf.face].norm();
                }
                sum.norm() / total
            })
            .fold(0.0, f64::max)
    }
}

/// Area vector and centroid of a planar-ish polygon by triangulation about
/// the arithmetic mean of its points.
fn polygon_geometry(points: &[Vec3], loop_: &[usize]) -> (Vec3, Vec3) {
    if loop_.len() == 3 {
        let (a, b, c) = (points[loop_[0]], points[loop_[1]], points[loop_[2]]);
        return (0.5 * (b - a).cross(&(c - a)), (a + b + c) / 3.0);
    }
    let seed = loop_.iter().map(|&p| points[p]).sum::<Vec3>() / loop_.len() as f64;
    let mut area = Vec3::zeros();
    let mut weighted = Vec3::zeros();
    let mut total = 0.0;
    for (k, &p) in loop_.iter().enumerate() {
        let a = points[p];
        let b = points[loop_[(k + 1) % loop_.len()]];
        let tri = 0.5 * (a - seed).cross(&(b - seed));
        let mag = tri.norm();
        area += tri;
        weighted += mag * (a + b + seed) / 3.0;
        total += mag;
    }
    let centroid = if total > 0.0 { weighted / total } else { seed };
    (area, centroid)
}

/// Computes volumes, centroids, area vectors, interpolation weights and
/// nonorthogonality for every cell and face.
pub fn compute_geometry(mesh: &Mesh) -> Result<MeshGeometry, MeshError> {
    let n_faces = mesh.n_faces();
    let face_geo: Vec<(Vec3, Vec3)> =
        (0..n_faces).into_par_iter().map(|f| polygon_geometry(mesh.points(), mesh.face(f))).collect();

    let mut face_area = Vec::with_capacity(n_faces);
    let mut face_centroid = Vec::with_capacity(n_faces);
    for (f, (s, c)) in face_geo.into_iter().enumerate() {
        let scale: f64 = mesh.face(f).iter().map(|&p| (mesh.points()[p] - c).norm_squared()).fold(0.0, f64::max);
        if !(s.norm() > 1e-14 * scale) {
            return Err(MeshError::DegenerateFace { face: f });
        }
        face_area.push(s);
        face_centroid.push(c);
    }

    let adjacency = cell_face_adjacency(mesh);
    let cell_geo: Vec<(f64, Vec3)> = (0..mesh.n_cells())
        .into_par_iter()
        .map(|c| {
            let faces = adjacency.faces_of(c);
            let seed = faces.iter().map(|cf| face_centroid[cf.face]).sum::<Vec3>() / faces.len() as f64;
            let mut volume = 0.0;
            let mut moment = Vec3::zeros();
            for cf in faces {
                let s_out = face_area[cf.face] * cf.sign();
                let fc = face_centroid[cf.face];
                let pyr_vol = s_out.dot(&(fc - seed)) / 3.0;
                volume += pyr_vol;
                moment += pyr_vol * (0.75 * fc + 0.25 * seed);
            }
            let centroid = if volume > 0.0 { moment / volume } else { seed };
            (volume, centroid)
        })
        .collect();

    let mut cell_volume = Vec::with_capacity(mesh.n_cells());
    let mut cell_centroid = Vec::with_capacity(mesh.n_cells());
    for (c, (v, x)) in cell_geo.into_iter().enumerate() {
        if !(v > 0.0) {
            return Err(MeshError::NegativeVolume { cell: c, volume: v });
        }
        cell_volume.push(v);
        cell_centroid.push(x);
    }

    let n_internal = mesh.n_internal_faces();
    let mut delta = Vec::with_capacity(n_faces);
    let mut weight = Vec::with_capacity(n_internal);
    let mut nonorth_angle = Vec::with_capacity(n_internal);
    for f in 0..n_faces {
        let own = mesh.owner()[f];
        let s = face_area[f];
        if f < n_internal {
            let nei = mesh.neighbour()[f];
            let d = cell_centroid[nei] - cell_centroid[own];
            if d.norm() == 0.0 {
                return Err(MeshError::CoincidentCentroids { face: f });
            }
            let to_owner = s.dot(&(face_centroid[f] - cell_centroid[own])).abs();
            let to_neigh = s.dot(&(cell_centroid[nei] - face_centroid[f])).abs();
            if !(to_owner + to_neigh > 0.0) {
                return Err(MeshError::CoincidentCentroids { face: f });
            }
            let angle = angle_between(&d, &s);
            if angle > MAX_NONORTHOGONALITY_DEG {
                return Err(MeshError::Nonorthogonal { face: f, angle });
            }
            delta.push(d);
            weight.push(to_neigh / (to_owner + to_neigh));
            nonorth_angle.push(angle);
        } else {
            let d = face_centroid[f] - cell_centroid[own];
            if !(d.dot(&s) > 0.0) {
                return Err(MeshError::CoincidentCentroids { face: f });
            }
            delta.push(d);
        }
    }

    Ok(MeshGeometry { cell_volume, cell_centroid, face_area, face_centroid, delta, weight, nonorth_angle })
}

/// Angle between two vectors in degrees. Exactly zero for parallel vectors.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    if a.cross(b) == Vec3::zeros() && a.dot(b) > 0.0 {
        return 0.0;
    }
    let cos = (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

/// What lies on the other side of a cell face.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Across {
    Cell(usize),
    Patch(usize),
}

/// One face incident to a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellFace {
    pub face: usize,
    /// `true` when the cell owns the face (`sign = +1`).
    pub owned: bool,
    pub across: Across,
}

impl CellFace {
    pub fn sign(&self) -> f64 {
        if self.owned {
            1.0
        } else {
            -1.0
        }
    }
}

/// Per-cell lists of incident faces, ordered by face index.
#[derive(Debug, Clone)]
pub struct CellFaceAdjacency {
    offsets: Vec<usize>,
    entries: Vec<CellFace>,
}

impl CellFaceAdjacency {
    pub fn n_cells(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn faces_of(&self, cell: usize) -> &[CellFace] {
        &self.entries[self.offsets[cell]..self.offsets[cell + 1]]
    }

    /// Neighbouring cells across internal faces.
    pub fn neighbours_of(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        self.faces_of(cell).iter().filter_map(|cf| match cf.across {
            Across::Cell(c) => Some(c),
            Across::Patch(_) => None,
        })
    }
}

pub fn cell_face_adjacency(mesh: &Mesh) -> CellFaceAdjacency {
    let n = mesh.n_cells();
    let mut counts = vec![0usize; n + 1];
    for &c in mesh.owner().iter().chain(mesh.neighbour()) {
        counts[c + 1] += 1;
    }
    for i in 0..n {
        counts[i + 1] += counts[i];
    }
    let offsets = counts.clone();
    let mut fill = counts;
    let placeholder = CellFace { face: 0, owned: true, across: Across::Cell(0) };
    let mut entries = vec![placeholder; *offsets.last().unwrap()];
    // Visiting faces in index order keeps each cell's list sorted.
    for f in 0..mesh.n_faces() {
        let own = mesh.owner()[f];
        let across = match mesh.patch_of(f) {
            Some(p) => Across::Patch(p),
            None => Across::Cell(mesh.neighbour()[f]),
        };
        entries[fill[own]] = CellFace { face: f, owned: true, across };
        fill[own] += 1;
        if let Some(&nei) = mesh.neighbour().get(f) {
            entries[fill[nei]] = CellFace { face: f, owned: false, across: Across::Cell(own) };
            fill[nei] += 1;
        }
    }
    CellFaceAdjacency { offsets, entries }
}

/// Largest number of internal-face neighbours over all cells.
pub fn max_neighbours(mesh: &Mesh) -> usize {
    let mut counts = vec![0usize; mesh.n_cells()];
    for f in 0..mesh.n_internal_faces() {
        counts[mesh.owner()[f]] += 1;
        counts[mesh.neighbour()[f]] += 1;
    }
    counts.into_iter().max().unwrap_or(0)
}

/// Unique points of a cell in order of first appearance over its faces.
pub fn cell_points(mesh: &Mesh, adjacency: &CellFaceAdjacency, cell: usize) -> Vec<usize> {
    let mut pts = Vec::new();
    for cf in adjacency.faces_of(cell) {
        for &p in mesh.face(cf.face) {
            if !pts.contains(&p) {
                pts.push(p);
            }
        }
    }
    pts
}
