//! Text mesh files, legacy VTK output, field CSV and line sampling.
//!
//! Mesh file layout (blank lines and `#` comments are ignored):
//!
//! ```text
//! POINTS <n>
//! <x> <y> <z>            n lines
//! FACES <n>
//! <k> <p0> ... <pk-1>    n lines
//! OWNER <n>
//! <cell>                 n lines
//! NEIGHBOUR <n>
//! <cell>                 n lines, one per internal face
//! PATCHES <n>
//! <name> <kind> <start> <count>
//! ```
//!
//! Floats are written in shortest round-trip form, so a write/read cycle
//! reproduces the mesh exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::fvm::{FieldValue, FvMesh};
use crate::mesh::{self, CellFaceAdjacency, Mesh, Patch, PatchKind};
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("line {line}: {section}: {message}")]
    Parse { line: usize, section: String, message: String },
}

fn parse_err(line: usize, section: &str, message: impl Into<String>) -> FormatError {
    FormatError::Parse { line, section: section.to_string(), message: message.into() }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self { inner: text.lines().enumerate(), last: 0 }
    }

    /// Next non-blank, non-comment line with its 1-based number.
    fn next(&mut self, section: &str) -> Result<(usize, Vec<&'a str>), FormatError> {
        for (i, line) in self.inner.by_ref() {
            self.last = i + 1;
            let content = line.split('#').next().unwrap_or("").trim();
            if !content.is_empty() {
                return Ok((i + 1, content.split_whitespace().collect()));
            }
        }
        Err(parse_err(self.last + 1, section, "unexpected end of file"))
    }

    fn header(&mut self, name: &str) -> Result<usize, FormatError> {
        let (line, tokens) = self.next(name)?;
        if tokens.len() != 2 || tokens[0] != name {
            return Err(parse_err(line, name, format!("expected `{name} <count>`, found `{}`", tokens.join(" "))));
        }
        tokens[1].parse().map_err(|_| parse_err(line, name, format!("invalid count `{}`", tokens[1])))
    }
}

fn number<T: std::str::FromStr>(token: &str, line: usize, section: &str) -> Result<T, FormatError> {
    token.parse().map_err(|_| parse_err(line, section, format!("invalid number `{token}`")))
}

/// Parses a mesh file's contents and validates the mesh.
pub fn parse_mesh(text: &str) -> crate::Result<Mesh> {
    let mut lines = Lines::new(text);

    let n_points = lines.header("POINTS")?;
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let (line, t) = lines.next("POINTS")?;
        if t.len() != 3 {
            return Err(parse_err(line, "POINTS", format!("expected 3 coordinates, found {}", t.len())).into());
        }
        points.push(Vec3::new(
            number(t[0], line, "POINTS")?,
            number(t[1], line, "POINTS")?,
            number(t[2], line, "POINTS")?,
        ));
    }

    let n_faces = lines.header("FACES")?;
    let mut offsets = Vec::with_capacity(n_faces + 1);
    let mut face_points = Vec::new();
    offsets.push(0);
    for _ in 0..n_faces {
        let (line, t) = lines.next("FACES")?;
        let k: usize = number(t[0], line, "FACES")?;
        if t.len() != k + 1 {
            return Err(parse_err(line, "FACES", format!("face declares {k} points but lists {}", t.len() - 1)).into());
        }
        for tok in &t[1..] {
            let p: usize = number(tok, line, "FACES")?;
            if p >= n_points {
                return Err(parse_err(line, "FACES", format!("point index {p} out of range (0..{n_points})")).into());
            }
            face_points.push(p);
        }
        offsets.push(face_points.len());
    }

    let read_cells = |lines: &mut Lines, name: &str| -> Result<Vec<usize>, FormatError> {
        let n = lines.header(name)?;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let (line, t) = lines.next(name)?;
            if t.len() != 1 {
                return Err(parse_err(line, name, format!("expected one cell index, found `{}`", t.join(" "))));
            }
            out.push(number(t[0], line, name)?);
        }
        Ok(out)
    };
    let owner = read_cells(&mut lines, "OWNER")?;
    if owner.len() != n_faces {
        return Err(parse_err(lines.last, "OWNER", format!("{} entries for {n_faces} faces", owner.len())).into());
    }
    let neighbour_line = lines.last + 1;
    let neighbour = read_cells(&mut lines, "NEIGHBOUR")?;

    let n_patches = lines.header("PATCHES")?;
    let mut patches = Vec::with_capacity(n_patches);
    for _ in 0..n_patches {
        let (line, t) = lines.next("PATCHES")?;
        if t.len() != 4 {
            return Err(parse_err(line, "PATCHES", "expected `<name> <kind> <start> <count>`").into());
        }
        let kind: PatchKind = t[1].parse().map_err(|e: String| parse_err(line, "PATCHES", e))?;
        patches.push(Patch::new(t[0], kind, number(t[2], line, "PATCHES")?, number(t[3], line, "PATCHES")?));
    }
    if let Some(first) = patches.first() {
        if first.start != neighbour.len() {
            return Err(parse_err(
                neighbour_line,
                "NEIGHBOUR",
                format!("{} entries but the boundary starts at face {}", neighbour.len(), first.start),
            )
            .into());
        }
    }
    if let Ok((line, t)) = lines.next("end") {
        return Err(parse_err(line, "end", format!("trailing content `{}`", t.join(" "))).into());
    }
    Ok(Mesh::from_flat(points, offsets, face_points, owner, neighbour, patches)?)
}

pub fn read_mesh(path: &Path) -> crate::Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
    parse_mesh(&text).map_err(|e| e.context(path.display().to_string()))
}

pub fn mesh_to_string(mesh: &Mesh) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "POINTS {}", mesh.n_points());
    for p in mesh.points() {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    let _ = writeln!(out, "FACES {}", mesh.n_faces());
    for face in mesh.faces() {
        let _ = write!(out, "{}", face.len());
        for p in face {
            let _ = write!(out, " {p}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "OWNER {}", mesh.n_faces());
    for o in mesh.owner() {
        let _ = writeln!(out, "{o}");
    }
    let _ = writeln!(out, "NEIGHBOUR {}", mesh.n_internal_faces());
    for n in mesh.neighbour() {
        let _ = writeln!(out, "{n}");
    }
    let _ = writeln!(out, "PATCHES {}", mesh.patches().len());
    for p in mesh.patches() {
        let _ = writeln!(out, "{} {} {} {}", p.name, p.kind, p.start, p.count);
    }
    out
}

pub fn write_mesh(mesh: &Mesh, path: &Path) -> crate::Result<()> {
    std::fs::write(path, mesh_to_string(mesh)).map_err(|e| crate::Error::io(path, e))
}

/// Cell data written to a VTK file.
#[derive(Debug, Clone, Copy)]
pub enum VtkField<'a> {
    Scalar(&'a str, &'a [f64]),
    Vector(&'a str, &'a [Vec3]),
}

pub const VTK_HEXAHEDRON: u8 = 12;
pub const VTK_POLYHEDRON: u8 = 42;

/// Point order of a hexahedral cell in VTK convention, or `None` if the cell
/// is not a hexahedron.
fn hex_points(mesh: &Mesh, adjacency: &CellFaceAdjacency, cell: usize) -> Option<[usize; 8]> {
    let faces = adjacency.faces_of(cell);
    if faces.len() != 6 || faces.iter().any(|cf| mesh.face(cf.face).len() != 4) {
        return None;
    }
    if mesh::cell_points(mesh, adjacency, cell).len() != 8 {
        return None;
    }
    // Bottom face oriented so its normal points into the cell.
    let first = faces[0];
    let mut bottom: Vec<usize> = mesh.face(first.face).to_vec();
    if first.owned {
        bottom.reverse();
    }
    let mut out = [0; 8];
    out[..4].copy_from_slice(&bottom);
    for (i, &b) in bottom.iter().enumerate() {
        let mut across = None;
        for cf in faces {
            let f = mesh.face(cf.face);
            for e in 0..4 {
                let (a, c) = (f[e], f[(e + 1) % 4]);
                let other = if a == b {
                    c
                } else if c == b {
                    a
                } else {
                    continue;
                };
                if !bottom.contains(&other) {
                    across = Some(other);
                }
            }
        }
        out[4 + i] = across?;
    }
    Some(out)
}

/// Legacy ASCII VTK unstructured grid with cell data.
pub fn vtk_to_string(mesh: &Mesh, fields: &[VtkField]) -> Result<String, FormatError> {
    let n = mesh.n_cells();
    for field in fields {
        let (name, len) = match field {
            VtkField::Scalar(name, v) => (name, v.len()),
            VtkField::Vector(name, v) => (name, v.len()),
        };
        if len != n {
            return Err(parse_err(0, "CELL_DATA", format!("field `{name}` has {len} values for {n} cells")));
        }
    }
    let adjacency = mesh::cell_face_adjacency(mesh);
    let mut cells = Vec::with_capacity(n);
    let mut size = 0;
    for c in 0..n {
        let entry = match hex_points(mesh, &adjacency, c) {
            Some(pts) => (VTK_HEXAHEDRON, pts.to_vec()),
            None => {
                let faces = adjacency.faces_of(c);
                let mut stream = vec![faces.len()];
                for cf in faces {
                    let mut f = mesh.face(cf.face).to_vec();
                    if !cf.owned {
                        f.reverse();
                    }
                    stream.push(f.len());
                    stream.extend(f);
                }
                (VTK_POLYHEDRON, stream)
            }
        };
        size += entry.1.len() + 1;
        cells.push(entry);
    }

    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\nfvflow\nASCII\nDATASET UNSTRUCTURED_GRID\n");
    let _ = writeln!(out, "POINTS {} double", mesh.n_points());
    for p in mesh.points() {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    let _ = writeln!(out, "CELLS {n} {size}");
    for (_, conn) in &cells {
        let _ = write!(out, "{}", conn.len());
        for i in conn {
            let _ = write!(out, " {i}");
        }
        out.push('\n');
    }
    let _ = writeln!(out, "CELL_TYPES {n}");
    for (t, _) in &cells {
        let _ = writeln!(out, "{t}");
    }
    if !fields.is_empty() {
        let _ = writeln!(out, "CELL_DATA {n}");
    }
    for field in fields {
        match field {
            VtkField::Scalar(name, values) => {
                let _ = writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default");
                for v in *values {
                    let _ = writeln!(out, "{v}");
                }
            }
            VtkField::Vector(name, values) => {
                let _ = writeln!(out, "VECTORS {name} double");
                for v in *values {
                    let _ = writeln!(out, "{} {} {}", v.x, v.y, v.z);
                }
            }
        }
    }
    Ok(out)
}

pub fn write_vtk(mesh: &Mesh, fields: &[VtkField], path: &Path) -> crate::Result<()> {
    let text = vtk_to_string(mesh, fields)?;
    std::fs::write(path, text).map_err(|e| crate::Error::io(path, e))
}

/// Samples along a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSample<T> {
    /// `(arc length, cell, value)` for every sample inside the mesh, by arc length.
    pub rows: Vec<(f64, usize, T)>,
    /// Number of sample points that fell outside every cell.
    pub outside: usize,
}

impl<T> LineSample<T> {
    /// No sample point lies inside the mesh.
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Whether `x` lies inside (or on the boundary of) convex cell `cell`.
pub fn cell_contains(fv: &FvMesh, cell: usize, x: &Vec3) -> bool {
    let geo = &fv.geometry;
    let scale = geo.cell_volume[cell].cbrt();
    fv.adjacency.faces_of(cell).iter().all(|cf| {
        let s = geo.face_area[cf.face] * cf.sign();
        (x - geo.face_centroid[cf.face]).dot(&s) <= 1e-9 * scale * s.norm()
    })
}

/// Cell containing `x`: the nearest centroid, or one of its face neighbours.
pub fn locate_cell(fv: &FvMesh, x: &Vec3) -> Option<usize> {
    let nearest = fv
        .geometry
        .cell_centroid
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - x).norm_squared().total_cmp(&(b.1 - x).norm_squared()))?
        .0;
    if cell_contains(fv, nearest, x) {
        return Some(nearest);
    }
    fv.adjacency.neighbours_of(nearest).find(|&c| cell_contains(fv, c, x))
}

/// Nearest-cell values at `n` equally spaced points from `p0` to `p1`.
pub fn sample_line<T: FieldValue>(fv: &FvMesh, values: &[T], p0: Vec3, p1: Vec3, n: usize) -> LineSample<T> {
    let length = (p1 - p0).norm();
    let mut rows = Vec::with_capacity(n);
    let mut outside = 0;
    for i in 0..n {
        let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        let x = p0 + (p1 - p0) * t;
        match locate_cell(fv, &x) {
            Some(c) => rows.push((t * length, c, values[c])),
            None => outside += 1,
        }
    }
    LineSample { rows, outside }
}

/// Numbers in CSV output use 17 significant digits.
pub fn csv_number(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn line_sample_csv<T: FieldValue>(sample: &LineSample<T>, value_names: &[&str]) -> String {
    let mut out = String::from("s");
    for name in value_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (s, _, v) in &sample.rows {
        out.push_str(&csv_number(*s));
        for c in 0..T::COMPONENTS {
            out.push(',');
            out.push_str(&csv_number(v.component(c)));
        }
        out.push('\n');
    }
    out
}

/// One row per cell: centroid, velocity and pressure.
pub fn fields_csv(fv: &FvMesh, u: &[Vec3], p: &[f64]) -> String {
    let mut out = String::from("cell,x,y,z,Ux,Uy,Uz,p\n");
    for (c, x) in fv.geometry.cell_centroid.iter().enumerate() {
        let _ = writeln!(
            out,
            "{c},{},{},{},{},{},{},{}",
            csv_number(x.x),
            csv_number(x.y),
            csv_number(x.z),
            csv_number(u[c].x),
            csv_number(u[c].y),
            csv_number(u[c].z),
            csv_number(p[c])
        );
    }
    out
}

/// Reads the velocity and pressure columns written by [`fields_csv`].
pub fn parse_fields_csv(text: &str) -> Result<(Vec<Vec3>, Vec<f64>), FormatError> {
    const SECTION: &str = "fields";
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "cell,x,y,z,Ux,Uy,Uz,p" => {}
        _ => return Err(parse_err(1, SECTION, "expected header `cell,x,y,z,Ux,Uy,Uz,p`")),
    }
    let (mut u, mut p) = (Vec::new(), Vec::new());
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 8 {
            return Err(parse_err(line_no, SECTION, format!("expected 8 columns, found {}", cols.len())));
        }
        let cell: usize = number(cols[0], line_no, SECTION)?;
        if cell != u.len() {
            return Err(parse_err(line_no, SECTION, format!("expected cell {}, found {cell}", u.len())));
        }
        let v: Vec<f64> = cols[4..].iter().map(|c| number(c, line_no, SECTION)).collect::<Result<_, _>>()?;
        u.push(Vec3::new(v[0], v[1], v[2]));
        p.push(v[3]);
    }
    Ok((u, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;

    const SINGLE_CUBE: &str = "\
# unit cube
POINTS 8
0 0 0
1 0 0
1 1 0
0 1 0
0 0 1
1 0 1
1 1 1
0 1 1
FACES 6
4 0 3 2 1
4 4 5 6 7
4 0 1 5 4
4 3 7 6 2
4 0 4 7 3
4 1 2 6 5
OWNER 6
0
0
0
0
0
0
NEIGHBOUR 0
PATCHES 1
walls wall 0 6
";

    #[test]
    fn hand_written_single_cube() {
        let mesh = parse_mesh(SINGLE_CUBE).unwrap();
        assert_eq!((mesh.n_cells(), mesh.n_faces(), mesh.n_points()), (1, 6, 8));
        let geo = mesh::compute_geometry(&mesh).unwrap();
        assert!((geo.cell_volume[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn round_trip_is_exact() {
        let case = cases::gen_skewed_duct(5, 3, 20.0).unwrap();
        let text = mesh_to_string(&case.mesh);
        let back = parse_mesh(&text).unwrap();
        assert_eq!(back, case.mesh);
        assert_eq!(mesh_to_string(&back), text);
    }

    #[test]
    fn short_neighbour_section_is_named() {
        let case = cases::gen_cavity(2).unwrap();
        let text = mesh_to_string(&case.mesh);
        let mut lines: Vec<&str> = text.lines().collect();
        let at = lines.iter().position(|l| l.starts_with("NEIGHBOUR")).unwrap();
        let n: usize = lines[at][10..].parse().unwrap();
        let header = format!("NEIGHBOUR {}", n - 1);
        lines[at] = &header;
        lines.remove(at + 1);
        let err = parse_mesh(&lines.join("\n")).unwrap_err().to_string();
        assert!(err.contains("NEIGHBOUR"), "{err}");
    }

    #[test]
    fn malformed_input_reports_line() {
        let bad = SINGLE_CUBE.replace("1 1 0\n0 1 0", "1 1 0\n0 x 0");
        match parse_mesh(&bad).unwrap_err() {
            crate::Error::Format(FormatError::Parse { line, section, .. }) => {
                assert_eq!((line, section.as_str()), (6, "POINTS"));
            }
            e => panic!("{e}"),
        }
        let dangling = SINGLE_CUBE.replace("4 1 2 6 5", "4 1 2 6 9");
        assert!(parse_mesh(&dangling).unwrap_err().to_string().contains("out of range"));
        let count = SINGLE_CUBE.replace("4 0 3 2 1", "3 0 3 2 1");
        assert!(parse_mesh(&count).is_err());
    }

    #[test]
    fn vtk_single_cube() {
        let mesh = parse_mesh(SINGLE_CUBE).unwrap();
        let text = vtk_to_string(&mesh, &[VtkField::Scalar("p", &[0.0])]).unwrap();
        assert!(text.starts_with("# vtk DataFile Version 3.0\n"));
        assert!(text.contains("DATASET UNSTRUCTURED_GRID"));
        assert!(text.contains("POINTS 8 double"));
        assert!(text.contains("CELLS 1 9\n"));
        assert!(text.contains("CELL_TYPES 1\n12\n"));
        assert!(text.contains("CELL_DATA 1\nSCALARS p double 1\nLOOKUP_TABLE default\n0\n"));
    }

    #[test]
    fn vtk_hex_order_has_positive_volume() {
        let case = cases::gen_skewed_duct(3, 2, 30.0).unwrap();
        let mesh = case.mesh;
        let adj = mesh::cell_face_adjacency(&mesh);
        let p = mesh.points();
        for c in 0..mesh.n_cells() {
            let h = hex_points(&mesh, &adj, c).unwrap();
            // Bottom normal must point toward the top face.
            let n = (p[h[1]] - p[h[0]]).cross(&(p[h[3]] - p[h[0]]));
            assert!(n.dot(&(p[h[4]] - p[h[0]])) > 0.0);
            for i in 0..4 {
                let e = p[h[4 + i]] - p[h[i]];
                assert!(e.norm() > 0.0);
            }
        }
    }

    #[test]
    fn vtk_is_deterministic_and_checks_sizes() {
        let mesh = cases::gen_cavity(2).unwrap().mesh;
        let v = vec![Vec3::new(1.0, 2.0, 3.0); 8];
        let a = vtk_to_string(&mesh, &[VtkField::Vector("U", &v)]).unwrap();
        let b = vtk_to_string(&mesh, &[VtkField::Vector("U", &v)]).unwrap();
        assert_eq!(a, b);
        assert!(vtk_to_string(&mesh, &[VtkField::Scalar("p", &[0.0])]).is_err());
    }

    #[test]
    fn sampling() {
        let fv = FvMesh::new(cases::gen_cavity(4).unwrap().mesh).unwrap();
        let x: Vec<f64> = fv.geometry.cell_centroid.iter().map(|c| c.x).collect();
        let s = sample_line(&fv, &x, Vec3::new(0.0, 0.05, 0.05), Vec3::new(0.1, 0.05, 0.05), 11);
        assert_eq!((s.rows.len(), s.outside), (11, 0));
        assert!(s.rows.windows(2).all(|w| w[0].2 <= w[1].2 && w[0].0 < w[1].0));
        let ones = vec![1.0; fv.n_cells()];
        let s = sample_line(&fv, &ones, Vec3::new(0.01, 0.0, 0.02), Vec3::new(0.09, 0.1, 0.07), 7);
        assert!(s.rows.iter().all(|r| r.2 == 1.0));
        let s = sample_line(&fv, &ones, Vec3::new(1.0, 1.0, 1.0), Vec3::new(2.0, 1.0, 1.0), 5);
        assert!(s.is_empty());
        assert_eq!(s.outside, 5);
    }

    #[test]
    fn csv_formatting() {
        assert_eq!(csv_number(0.1), "1.0000000000000001e-1");
        assert_eq!("1.0000000000000001e-1".parse::<f64>().unwrap(), 0.1);
    }

    #[test]
    fn fields_csv_round_trip() {
        let fv = FvMesh::new(cases::gen_cavity(2).unwrap().mesh).unwrap();
        let u: Vec<Vec3> = (0..8).map(|i| Vec3::new(0.1 * i as f64, -1.0 / 3.0, 1e-300)).collect();
        let p: Vec<f64> = (0..8).map(|i| (i as f64).sqrt()).collect();
        let (u2, p2) = parse_fields_csv(&fields_csv(&fv, &u, &p)).unwrap();
        assert_eq!((u2, p2), (u, p));
        let err = parse_fields_csv("cell,x,y,z,Ux,Uy,Uz,p\n0,0,0,0,1,2,3\n").unwrap_err();
        assert!(err.to_string().starts_with("line 2"));
    }
}
