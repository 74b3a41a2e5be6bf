//! Hybrid ELL + CRS storage for structurally symmetric face-addressed matrices.
//!
//! A matrix `A = B + C` keeps most entries in the ELL part `B` (arrays `V`
//! and `I`, `N x K`, row-major) and the few rows that do not fit in a CRS
//! overflow part `C`. Structural symmetry lets a second `N x K` integer array
//! `J` record, for each ELL slot `(i, k)` holding `A_ij`, the ELL slot of row
//! `j` that holds the transposed entry `A_ji`. With `I` and `J` a column of the
//! matrix can be walked without ever forming the transpose.
//!
//! Slot conventions:
//! * padding slots have `I = -1`, `J = -1` and value `0.0`;
//! * an ELL slot whose transposed entry lives in the CRS part has a valid `I`
//!   and `J = -1`;
//! * each CRS entry carries a back-reference to the location of its transpose.
//!
//! The sparsity pattern is built once per mesh and shared (via [`Arc`]) by
//! every matrix assembled on that mesh.

use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

use crate::mesh::Mesh;

/// Index value marking a padding slot or a CRS-resident transpose.
pub const SENTINEL: i32 = -1;

/// Rows at or above this count use a parallel row loop in the products.
const PARALLEL_ROWS: usize = 32_768;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SparseError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("pattern is not structurally symmetric: ({row}, {col}) has no transpose")]
    NotStructurallySymmetric { row: usize, col: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("slot ({row}, {slot}) is padding")]
    SentinelAddress { row: usize, slot: usize },
    #[error("matrices do not share a sparsity pattern")]
    PatternMismatch,
    #[error("pattern has {n} rows, dumps are limited to 16")]
    TooLargeForDump { n: usize },
}

/// Storage location of one matrix entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryAddr {
    Ell { row: usize, slot: usize },
    Crs(usize),
}

/// Locations of the two off-diagonal coefficients coupling the cells of an
/// internal face.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceSlots {
    /// `A[owner][neighbour]`.
    pub upper: EntryAddr,
    /// `A[neighbour][owner]`.
    pub lower: EntryAddr,
}

/// Target of [`HybridMatrix::coeff_accumulate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffAddr {
    Diag(usize),
    Entry(EntryAddr),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    n: usize,
    k: usize,
    cols: Vec<i32>,
    twins: Vec<i32>,
    diag_slot: Vec<usize>,
    crs_row_ptr: Vec<usize>,
    crs_col: Vec<usize>,
    crs_twin: Vec<EntryAddr>,
    face_slots: Vec<FaceSlots>,
}

impl SparsityPattern {
    /// Builds a pattern from per-row off-diagonal column sets. The diagonal is
    /// always present and always stored in the ELL part.
    pub fn from_rows(offdiag: &[Vec<usize>], k_cap: usize) -> Result<Self, SparseError> {
        if k_cap < 1 {
            return Err(SparseError::InvalidArgument("ELL width cap must be at least 1".into()));
        }
        let n = offdiag.len();
        let rows: Vec<Vec<usize>> = offdiag
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut r: Vec<usize> = r.iter().copied().filter(|&j| j != i).collect();
                r.sort_unstable();
                r.dedup();
                r
            })
            .collect();
        for (i, r) in rows.iter().enumerate() {
            for &j in r {
                if j >= n {
                    return Err(SparseError::InvalidArgument(format!("column {j} out of range in row {i}")));
                }
                if rows[j].binary_search(&i).is_err() {
                    return Err(SparseError::NotStructurallySymmetric { row: i, col: j });
                }
            }
        }

        let max_offdiag = rows.iter().map(Vec::len).max().unwrap_or(0);
        let k = (1 + max_offdiag).min(k_cap);

        let mut cols = vec![SENTINEL; n * k];
        let mut diag_slot = vec![0usize; n];
        let mut crs_row_ptr = Vec::with_capacity(n + 1);
        let mut crs_col = Vec::new();
        crs_row_ptr.push(0);
        for (i, r) in rows.iter().enumerate() {
            let (ell_part, overflow) = r.split_at(r.len().min(k - 1));
            let mut ell_row: Vec<usize> = ell_part.to_vec();
            ell_row.push(i);
            ell_row.sort_unstable();
            for (s, &j) in ell_row.iter().enumerate() {
                cols[i * k + s] = j as i32;
                if j == i {
                    diag_slot[i] = s;
                }
            }
            crs_col.extend_from_slice(overflow);
            crs_row_ptr.push(crs_col.len());
        }

        let mut pattern = Self {
            n,
            k,
            cols,
            twins: vec![SENTINEL; n * k],
            diag_slot,
            crs_row_ptr,
            crs_col,
            crs_twin: Vec::new(),
            face_slots: Vec::new(),
        };

        let mut twins = vec![SENTINEL; n * k];
        for i in 0..n {
            for s in 0..k {
                if let Some(j) = pattern.col(i, s) {
                    if let Some(EntryAddr::Ell { slot, .. }) = pattern.locate(j, i) {
                        twins[i * k + s] = slot as i32;
                    }
                }
            }
        }
        let mut crs_twin = Vec::with_capacity(pattern.crs_col.len());
        for i in 0..n {
            for p in pattern.crs_row_ptr[i]..pattern.crs_row_ptr[i + 1] {
                let j = pattern.crs_col[p];
                crs_twin.push(pattern.locate(j, i).expect("structural symmetry checked above"));
            }
        }
        pattern.twins = twins;
        pattern.crs_twin = crs_twin;
        Ok(pattern)
    }

    /// The 4x4, `K = 3` example: rows `{0,1,3}`, `{0,1,2}`, `{1,2,3}`,
    /// `{0,2,3}`.
    pub fn example() -> Self {
        Self::from_rows(&[vec![1, 3], vec![0, 2], vec![1, 3], vec![0, 2]], 3).expect("fixture is symmetric")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// ELL width `K`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Column-index array `I`, row-major `N x K`.
    pub fn i_array(&self) -> &[i32] {
        &self.cols
    }

    /// Transpose-slot array `J`, row-major `N x K`.
    pub fn j_array(&self) -> &[i32] {
        &self.twins
    }

    pub fn col(&self, row: usize, slot: usize) -> Option<usize> {
        let c = self.cols[row * self.k + slot];
        (c >= 0).then_some(c as usize)
    }

    pub fn twin_slot(&self, row: usize, slot: usize) -> Option<usize> {
        let t = self.twins[row * self.k + slot];
        (t >= 0).then_some(t as usize)
    }

    pub fn diag_slot(&self, row: usize) -> usize {
        self.diag_slot[row]
    }

    pub fn crs_row_ptr(&self) -> &[usize] {
        &self.crs_row_ptr
    }

    pub fn crs_col(&self) -> &[usize] {
        &self.crs_col
    }

    /// Location of the transpose of each CRS entry.
    pub fn crs_twin(&self) -> &[EntryAddr] {
        &self.crs_twin
    }

    pub fn crs_len(&self) -> usize {
        self.crs_col.len()
    }

    /// Per internal face, the addresses of its two off-diagonal coefficients.
    /// Empty for patterns not built from a mesh.
    pub fn face_slots(&self) -> &[FaceSlots] {
        &self.face_slots
    }

    /// Number of stored (non-padding) entries.
    pub fn nnz(&self) -> usize {
        self.cols.iter().filter(|&&c| c >= 0).count() + self.crs_len()
    }

    fn ell_row(&self, row: usize) -> &[i32] {
        &self.cols[row * self.k..(row + 1) * self.k]
    }

    /// Finds where `A[row][col]` is stored, if it is part of the pattern.
    pub fn locate(&self, row: usize, col: usize) -> Option<EntryAddr> {
        let ell = self.ell_row(row);
        let valid = ell.iter().take_while(|&&c| c >= 0).count();
        if let Ok(slot) = ell[..valid].binary_search(&(col as i32)) {
            return Some(EntryAddr::Ell { row, slot });
        }
        let (lo, hi) = (self.crs_row_ptr[row], self.crs_row_ptr[row + 1]);
        self.crs_col[lo..hi].binary_search(&col).ok().map(|p| EntryAddr::Crs(lo + p))
    }

    /// All stored `(row, col)` pairs, ELL part first.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let ell = (0..self.n).flat_map(move |i| (0..self.k).filter_map(move |s| self.col(i, s).map(|j| (i, j))));
        let crs = (0..self.n)
            .flat_map(move |i| (self.crs_row_ptr[i]..self.crs_row_ptr[i + 1]).map(move |p| (i, self.crs_col[p])));
        ell.chain(crs)
    }

    /// Exhaustive scan of every structural invariant. Returns a description of
    /// the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let (n, k) = (self.n, self.k);
        if self.cols.len() != n * k || self.twins.len() != n * k {
            return Err("I/J dimensions do not match N x K".into());
        }
        for i in 0..n {
            let row = self.ell_row(i);
            let valid = row.iter().take_while(|&&c| c >= 0).count();
            if row[valid..].iter().any(|&c| c != SENTINEL) {
                return Err(format!("row {i}: padding is not trailing"));
            }
            if row[..valid].windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("row {i}: ELL columns not strictly increasing"));
            }
            if self.col(i, self.diag_slot[i]) != Some(i) {
                return Err(format!("row {i}: diag_slot does not hold the diagonal"));
            }
            for s in 0..k {
                let t = self.twins[i * k + s];
                match self.col(i, s) {
                    None if t != SENTINEL => return Err(format!("J[{i}][{s}] set on padding")),
                    None => {}
                    Some(j) if t >= 0 => {
                        if self.col(j, t as usize) != Some(i) {
                            return Err(format!("J[{i}][{s}] = {t} but I[{j}][{t}] != {i}"));
                        }
                    }
                    Some(j) => match self.locate(j, i) {
                        Some(EntryAddr::Crs(_)) => {}
                        _ => return Err(format!("J[{i}][{s}] = -1 but ({j}, {i}) is not in CRS")),
                    },
                }
            }
            let crs = &self.crs_col[self.crs_row_ptr[i]..self.crs_row_ptr[i + 1]];
            if crs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("row {i}: CRS columns not strictly increasing"));
            }
            for &j in crs {
                if row[..valid].contains(&(j as i32)) {
                    return Err(format!("({i}, {j}) stored in both ELL and CRS"));
                }
            }
        }
        for (i, j) in self.entries() {
            if self.locate(j, i).is_none() {
                return Err(format!("({i}, {j}) present but ({j}, {i}) missing"));
            }
        }
        for i in 0..n {
            for p in self.crs_row_ptr[i]..self.crs_row_ptr[i + 1] {
                let j = self.crs_col[p];
                if Some(self.crs_twin[p]) != self.locate(j, i) {
                    return Err(format!("CRS twin of ({i}, {j}) is wrong"));
                }
            }
        }
        Ok(())
    }

    /// Packs `I` and `J` into a single integer array.
    pub fn pack_q(&self, mode: QMode) -> Vec<i64> {
        let radix = mode.radix(self.n, self.k);
        self.cols
            .iter()
            .zip(&self.twins)
            .map(|(&i, &j)| match (i, j) {
                (SENTINEL, _) => Q_PADDING,
                (i, SENTINEL) => -2 - i as i64,
                (i, j) => radix * i as i64 + j as i64,
            })
            .collect()
    }

    pub fn debug_dump(&self) -> Result<String, SparseError> {
        if self.n > 16 {
            return Err(SparseError::TooLargeForDump { n: self.n });
        }
        let mut out = String::new();
        let table = |out: &mut String, name: &str, data: &[i32]| {
            let _ = writeln!(out, "{name}:");
            for row in data.chunks(self.k) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:>3}")).collect();
                let _ = writeln!(out, "  |{}|", cells.join("|"));
            }
        };
        let _ = writeln!(out, "N = {}, K = {}, CRS entries = {}", self.n, self.k, self.crs_len());
        table(&mut out, "I", &self.cols);
        table(&mut out, "J", &self.twins);
        for i in 0..self.n {
            for p in self.crs_row_ptr[i]..self.crs_row_ptr[i + 1] {
                let _ = writeln!(out, "  C({i}, {}) twin {:?}", self.crs_col[p], self.crs_twin[p]);
            }
        }
        Ok(out)
    }
}

/// Reserved `Q` code for padding slots. CRS-resident transposes encode as
/// `-2 - I`.
pub const Q_PADDING: i64 = -1;

/// Radix used when packing `I` and `J` into `Q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QMode {
    /// `Q = N * I + J`.
    ByN,
    /// `Q = K * I + J`.
    ByK,
}

impl QMode {
    fn radix(self, n: usize, k: usize) -> i64 {
        match self {
            QMode::ByN => n as i64,
            QMode::ByK => k as i64,
        }
    }
}

/// Inverse of [`SparsityPattern::pack_q`]: returns `(I, J)`.
pub fn unpack_q(q: &[i64], n: usize, k: usize, mode: QMode) -> (Vec<i32>, Vec<i32>) {
    let radix = mode.radix(n, k);
    q.iter()
        .map(|&v| match v {
            Q_PADDING => (SENTINEL, SENTINEL),
            v if v < 0 => ((-2 - v) as i32, SENTINEL),
            v => ((v / radix) as i32, (v % radix) as i32),
        })
        .unzip()
}

/// Builds the shared pattern for a mesh: one row per cell, the diagonal plus
/// one entry per internal-face neighbour.
pub fn build_pattern(mesh: &Mesh, k_cap: usize) -> Result<SparsityPattern, SparseError> {
    let mut rows = vec![Vec::new(); mesh.n_cells()];
    for (f, &nei) in mesh.neighbour().iter().enumerate() {
        let own = mesh.owner()[f];
        rows[own].push(nei);
        rows[nei].push(own);
    }
    let mut pattern = SparsityPattern::from_rows(&rows, k_cap)?;
    pattern.face_slots = mesh
        .neighbour()
        .iter()
        .enumerate()
        .map(|(f, &nei)| {
            let own = mesh.owner()[f];
            FaceSlots {
                upper: pattern.locate(own, nei).expect("face entry in pattern"),
                lower: pattern.locate(nei, own).expect("face entry in pattern"),
            }
        })
        .collect();
    Ok(pattern)
}

/// Matrix values over a shared [`SparsityPattern`].
#[derive(Debug, Clone)]
pub struct HybridMatrix {
    pattern: Arc<SparsityPattern>,
    ell: Vec<f64>,
    crs: Vec<f64>,
}

impl HybridMatrix {
    pub fn zeros(pattern: Arc<SparsityPattern>) -> Self {
        let ell = vec![0.0; pattern.n * pattern.k];
        let crs = vec![0.0; pattern.crs_len()];
        Self { pattern, ell, crs }
    }

    /// Identity over a diagonal-only pattern of size `n`.
    pub fn identity(n: usize) -> Self {
        let pattern = SparsityPattern::from_rows(&vec![Vec::new(); n], 1).expect("diagonal pattern");
        let mut m = Self::zeros(Arc::new(pattern));
        m.ell.fill(1.0);
        m
    }

    /// Builds a matrix from `(row, col, value)` triples, summing duplicates.
    pub fn from_triples(pattern: Arc<SparsityPattern>, triples: &[(usize, usize, f64)]) -> Result<Self, SparseError> {
        let mut m = Self::zeros(pattern);
        for &(i, j, v) in triples {
            let addr = m
                .pattern
                .locate(i, j)
                .ok_or_else(|| SparseError::InvalidArgument(format!("({i}, {j}) not in pattern")))?;
            m.add(addr, v);
        }
        Ok(m)
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    /// ELL value array `V`, row-major `N x K`.
    pub fn ell_values(&self) -> &[f64] {
        &self.ell
    }

    pub fn crs_values(&self) -> &[f64] {
        &self.crs
    }

    pub fn get(&self, addr: EntryAddr) -> f64 {
        match addr {
            EntryAddr::Ell { row, slot } => self.ell[row * self.pattern.k + slot],
            EntryAddr::Crs(p) => self.crs[p],
        }
    }

    fn slot_mut(&mut self, addr: EntryAddr) -> &mut f64 {
        match addr {
            EntryAddr::Ell { row, slot } => &mut self.ell[row * self.pattern.k + slot],
            EntryAddr::Crs(p) => &mut self.crs[p],
        }
    }

    /// Unchecked accumulation for assembly loops whose addresses come from the
    /// pattern itself.
    #[inline]
    pub fn add(&mut self, addr: EntryAddr, value: f64) {
        *self.slot_mut(addr) += value;
    }

    #[inline]
    pub fn add_diag(&mut self, row: usize, value: f64) {
        let k = self.pattern.k;
        self.ell[row * k + self.pattern.diag_slot[row]] += value;
    }

    #[inline]
    pub fn diag(&self, row: usize) -> f64 {
        self.ell[row * self.pattern.k + self.pattern.diag_slot[row]]
    }

    #[inline]
    pub fn set_diag(&mut self, row: usize, value: f64) {
        let k = self.pattern.k;
        self.ell[row * k + self.pattern.diag_slot[row]] = value;
    }

    /// Sets or increments one entry. Padding addresses are rejected.
    pub fn coeff_accumulate(&mut self, addr: CoeffAddr, value: f64, add: bool) -> Result<(), SparseError> {
        let target = match addr {
            CoeffAddr::Diag(row) => {
                if row >= self.n() {
                    return Err(SparseError::DimensionMismatch { expected: self.n(), found: row });
                }
                EntryAddr::Ell { row, slot: self.pattern.diag_slot[row] }
            }
            CoeffAddr::Entry(EntryAddr::Ell { row, slot }) => {
                if row >= self.n() || slot >= self.pattern.k || self.pattern.col(row, slot).is_none() {
                    return Err(SparseError::SentinelAddress { row, slot });
                }
                EntryAddr::Ell { row, slot }
            }
            CoeffAddr::Entry(EntryAddr::Crs(p)) => {
                if p >= self.crs.len() {
                    return Err(SparseError::DimensionMismatch { expected: self.crs.len(), found: p });
                }
                EntryAddr::Crs(p)
            }
        };
        let slot = self.slot_mut(target);
        if add {
            *slot += value;
        } else {
            *slot = value;
        }
        Ok(())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.diag(i)).collect()
    }

    /// Sum of the off-diagonal entries of `row` multiplied by `x`.
    pub fn offdiag_row_product(&self, row: usize, x: &[f64]) -> f64 {
        self.row_product(row, x) - self.diag(row) * x[row]
    }

    #[inline]
    fn row_product(&self, i: usize, x: &[f64]) -> f64 {
        let k = self.pattern.k;
        let cols = &self.pattern.cols[i * k..(i + 1) * k];
        let vals = &self.ell[i * k..(i + 1) * k];
        let mut sum = 0.0;
        for (&c, &v) in cols.iter().zip(vals) {
            if c >= 0 {
                sum += v * x[c as usize];
            }
        }
        let (lo, hi) = (self.pattern.crs_row_ptr[i], self.pattern.crs_row_ptr[i + 1]);
        for p in lo..hi {
            sum += self.crs[p] * x[self.pattern.crs_col[p]];
        }
        sum
    }

    #[inline]
    fn column_product(&self, j: usize, x: &[f64]) -> f64 {
        let pat = &*self.pattern;
        let k = pat.k;
        let mut sum = 0.0;
        for s in 0..k {
            let c = pat.cols[j * k + s];
            if c < 0 {
                break;
            }
            let i = c as usize;
            let t = pat.twins[j * k + s];
            let a_ij = if t >= 0 {
                self.ell[i * k + t as usize]
            } else {
                let (lo, hi) = (pat.crs_row_ptr[i], pat.crs_row_ptr[i + 1]);
                let p = lo + pat.crs_col[lo..hi].binary_search(&j).expect("CRS twin present");
                self.crs[p]
            };
            sum += a_ij * x[i];
        }
        for p in pat.crs_row_ptr[j]..pat.crs_row_ptr[j + 1] {
            let i = pat.crs_col[p];
            sum += self.get(pat.crs_twin[p]) * x[i];
        }
        sum
    }

    fn check_len(&self, len: usize) -> Result<(), SparseError> {
        if len != self.n() {
            return Err(SparseError::DimensionMismatch { expected: self.n(), found: len });
        }
        Ok(())
    }

    /// `y = A x`.
    pub fn smvp(&self, x: &[f64]) -> Result<Vec<f64>, SparseError> {
        let mut y = vec![0.0; self.n()];
        self.smvp_into(x, &mut y)?;
        Ok(y)
    }

    pub fn smvp_into(&self, x: &[f64], y: &mut [f64]) -> Result<(), SparseError> {
        self.check_len(x.len())?;
        self.check_len(y.len())?;
        if self.n() >= PARALLEL_ROWS {
            y.par_iter_mut().enumerate().for_each(|(i, yi)| *yi = self.row_product(i, x));
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = self.row_product(i, x);
            }
        }
        Ok(())
    }

    /// `y = A^T x`, gathered column by column through `I`/`J` and the CRS
    /// back-references.
    pub fn stmvp(&self, x: &[f64]) -> Result<Vec<f64>, SparseError> {
        self.check_len(x.len())?;
        let mut y = vec![0.0; self.n()];
        if self.n() >= PARALLEL_ROWS {
            y.par_iter_mut().enumerate().for_each(|(j, yj)| *yj = self.column_product(j, x));
        } else {
            for (j, yj) in y.iter_mut().enumerate() {
                *yj = self.column_product(j, x);
            }
        }
        Ok(y)
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &HybridMatrix) -> Result<(), SparseError> {
        if !Arc::ptr_eq(&self.pattern, &other.pattern) && self.pattern != other.pattern {
            return Err(SparseError::PatternMismatch);
        }
        for (a, b) in self.ell.iter_mut().zip(&other.ell) {
            *a += factor * b;
        }
        for (a, b) in self.crs.iter_mut().zip(&other.crs) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.ell.iter_mut().chain(self.crs.iter_mut()).for_each(|v| *v *= factor);
    }

    /// Dense row-major copy, for tests and debugging.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for s in 0..self.pattern.k {
                if let Some(j) = self.pattern.col(i, s) {
                    dense[i][j] += self.ell[i * self.pattern.k + s];
                }
            }
            for p in self.pattern.crs_row_ptr[i]..self.pattern.crs_row_ptr[i + 1] {
                dense[i][self.pattern.crs_col[p]] += self.crs[p];
            }
        }
        dense
    }

    /// Dense rendering followed by the `V` table, for `N <= 16`.
    pub fn debug_dump(&self) -> Result<String, SparseError> {
        let mut out = self.pattern.debug_dump()?;
        let _ = writeln!(out, "dense:");
        for row in self.to_dense() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>10.3e}")).collect();
            let _ = writeln!(out, "  [{}]", cells.join(" "));
        }
        let _ = writeln!(out, "V:");
        for row in self.ell.chunks(self.pattern.k) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:>10.3e}")).collect();
            let _ = writeln!(out, "  |{}|", cells.join("|"));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures;
    use crate::Vec3;

    #[test]
    fn example_fixture_arrays() {
        let p = SparsityPattern::example();
        assert_eq!((p.n(), p.k()), (4, 3));
        assert_eq!(p.i_array(), &[0, 1, 3, 0, 1, 2, 1, 2, 3, 0, 2, 3]);
        assert_eq!(p.j_array(), &[0, 0, 0, 1, 1, 0, 2, 1, 1, 2, 2, 2]);
        // B_12 sits in V[1][2]; its transpose B_21 is in column 0 of row 2.
        assert_eq!(p.col(1, 2), Some(2));
        assert_eq!(p.twin_slot(1, 2), Some(0));
        assert_eq!(p.crs_len(), 0);
        p.check_invariants().unwrap();
    }

    #[test]
    fn single_cell_pattern() {
        let mesh = fixtures::single_cube(fixtures::cube_points(Vec3::zeros(), 1.0));
        let p = build_pattern(&mesh, 7).unwrap();
        assert_eq!((p.n(), p.k()), (1, 1));
        assert_eq!(p.i_array(), &[0]);
        assert_eq!(p.j_array(), &[0]);
        assert_eq!(p.crs_len(), 0);
    }

    #[test]
    fn zero_width_cap_is_rejected() {
        let mesh = fixtures::two_cubes();
        assert!(matches!(build_pattern(&mesh, 0), Err(SparseError::InvalidArgument(_))));
    }

    #[test]
    fn asymmetric_rows_are_rejected() {
        let err = SparsityPattern::from_rows(&[vec![1], vec![]], 3).unwrap_err();
        assert_eq!(err, SparseError::NotStructurallySymmetric { row: 0, col: 1 });
    }

    #[test]
    fn width_one_sends_all_offdiagonals_to_crs() {
        let p = SparsityPattern::from_rows(&[vec![1, 3], vec![0, 2], vec![1, 3], vec![0, 2]], 1).unwrap();
        assert_eq!(p.k(), 1);
        assert_eq!(p.crs_len(), 8);
        p.check_invariants().unwrap();
        assert!(p.crs_twin().iter().all(|t| matches!(t, EntryAddr::Crs(_))));
    }

    #[test]
    fn pack_q_examples() {
        let p = SparsityPattern::example();
        let q = p.pack_q(QMode::ByN);
        // Row 0 slot 2: I = 3, J = 0.  Row 3 slot 2: I = 3, J = 2 -> 4*3+2.
        assert_eq!(q[2], 12);
        assert_eq!(q[3 * 3 + 2], 14);
        assert_eq!(q[0], 0);
        assert_eq!(p.pack_q(QMode::ByK)[0], 0);
        for mode in [QMode::ByN, QMode::ByK] {
            let (i, j) = unpack_q(&p.pack_q(mode), p.n(), p.k(), mode);
            assert_eq!(i, p.i_array());
            assert_eq!(j, p.j_array());
        }
    }

    #[test]
    fn pack_q_keeps_sentinels_and_crs_twins() {
        // Row 0 has three neighbours, capped at K = 2: two CRS overflows.
        // Row 4 is isolated and carries one padding slot.
        let rows = vec![vec![1, 2, 3], vec![0], vec![0], vec![0], vec![]];
        let p = SparsityPattern::from_rows(&rows, 2).unwrap();
        p.check_invariants().unwrap();
        assert!(p.i_array().contains(&SENTINEL));
        assert!(p.i_array().iter().zip(p.j_array()).any(|(&i, &j)| i >= 0 && j == SENTINEL));
        for mode in [QMode::ByN, QMode::ByK] {
            let q = p.pack_q(mode);
            assert!(q.contains(&Q_PADDING));
            let (i, j) = unpack_q(&q, p.n(), p.k(), mode);
            assert_eq!((i.as_slice(), j.as_slice()), (p.i_array(), p.j_array()));
        }
    }

    #[test]
    fn identity_products() {
        let a = HybridMatrix::identity(5);
        let x = vec![1.0, -2.0, 3.5, 0.0, 7.0];
        assert_eq!(a.smvp(&x).unwrap(), x);
        assert_eq!(a.stmvp(&x).unwrap(), x);
        assert_eq!(a.diagonal(), vec![1.0; 5]);
    }

    #[test]
    fn example_filled_row_sums() {
        let p = Arc::new(SparsityPattern::example());
        let mut a = HybridMatrix::zeros(p);
        for (s, v) in a.ell.iter_mut().enumerate() {
            *v = (s + 1) as f64;
        }
        let y = a.smvp(&[1.0; 4]).unwrap();
        let dense_sums: Vec<f64> = a.to_dense().iter().map(|r| r.iter().sum()).collect();
        assert_eq!(y, dense_sums);
        assert_eq!(y, vec![6.0, 15.0, 24.0, 33.0]);
        // Diagonal slots: B00 at slot 0, B11 slot 1, B22 slot 1, B33 slot 2.
        assert_eq!(a.diagonal(), vec![1.0, 5.0, 8.0, 12.0]);
    }

    #[test]
    fn stmvp_of_mirrored_values_equals_smvp() {
        let p = Arc::new(SparsityPattern::example());
        let triples: Vec<(usize, usize, f64)> =
            p.entries().map(|(i, j)| (i, j, 1.0 + (i.min(j) * 7 + i.max(j) * 3) as f64)).collect();
        let a = HybridMatrix::from_triples(p, &triples).unwrap();
        let x = [0.3, -1.2, 2.5, 4.0];
        assert_eq!(a.smvp(&x).unwrap(), a.stmvp(&x).unwrap());
    }

    #[test]
    fn stmvp_matches_dense_transpose_on_example() {
        let p = Arc::new(SparsityPattern::example());
        let triples: Vec<_> = p.entries().enumerate().map(|(n, (i, j))| (i, j, (n as f64 * 1.7).sin())).collect();
        let a = HybridMatrix::from_triples(p, &triples).unwrap();
        let dense = a.to_dense();
        let x = [1.0, 2.0, -3.0, 0.5];
        let y = a.stmvp(&x).unwrap();
        for j in 0..4 {
            let oracle: f64 = (0..4).map(|i| dense[i][j] * x[i]).sum();
            assert!((y[j] - oracle).abs() <= 1e-14 * oracle.abs().max(1.0));
        }
    }

    #[test]
    fn coeff_accumulate_targets_one_entry() {
        let p = Arc::new(SparsityPattern::example());
        let mut a = HybridMatrix::zeros(p.clone());
        a.coeff_accumulate(CoeffAddr::Diag(2), 5.0, false).unwrap();
        assert_eq!(a.ell[2 * 3 + p.diag_slot(2)], 5.0);
        let addr = CoeffAddr::Entry(p.locate(0, 3).unwrap());
        a.coeff_accumulate(addr, 1.0, true).unwrap();
        a.coeff_accumulate(addr, 1.0, true).unwrap();
        assert_eq!(a.get(p.locate(0, 3).unwrap()), 2.0);
        let nonzero = a.ell.iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn coeff_accumulate_rejects_padding() {
        let rows = vec![vec![1, 2], vec![0], vec![0]];
        let p = Arc::new(SparsityPattern::from_rows(&rows, 3).unwrap());
        let mut a = HybridMatrix::zeros(p);
        let err = a.coeff_accumulate(CoeffAddr::Entry(EntryAddr::Ell { row: 1, slot: 2 }), 1.0, true);
        assert_eq!(err, Err(SparseError::SentinelAddress { row: 1, slot: 2 }));
    }

    #[test]
    fn dimension_mismatch() {
        let a = HybridMatrix::identity(3);
        assert!(matches!(a.smvp(&[1.0]), Err(SparseError::DimensionMismatch { expected: 3, found: 1 })));
        assert!(a.stmvp(&[1.0; 4]).is_err());
    }

    #[test]
    fn debug_dump_small_only() {
        let a = HybridMatrix::zeros(Arc::new(SparsityPattern::example()));
        let text = a.debug_dump().unwrap();
        assert!(text.contains("N = 4, K = 3"));
        assert!(HybridMatrix::identity(17).debug_dump().is_err());
    }

    #[test]
    fn two_cube_face_slots() {
        let mesh = fixtures::two_cubes();
        let p = build_pattern(&mesh, 7).unwrap();
        assert_eq!(p.face_slots().len(), 1);
        assert_eq!(p.face_slots()[0].upper, EntryAddr::Ell { row: 0, slot: 1 });
        assert_eq!(p.face_slots()[0].lower, EntryAddr::Ell { row: 1, slot: 0 });
    }
}
