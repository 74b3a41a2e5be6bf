//! Oracles shared by the integration tests.

#![allow(dead_code)]

use std::f64::consts::PI;
use std::sync::Arc;

use fvflow::cases;
use fvflow::fvm::{self, BoundaryCondition, Field, FvMesh, Krylov, SchemeConfig};
use fvflow::linsolve::SolveConfig;
use fvflow::mesh::PatchKind;
use fvflow::sparse::{unpack_q, HybridMatrix, QMode, SparsityPattern, SENTINEL};
use fvflow::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Off-diagonal rows and `(i, j, value)` triples of a random structurally
/// symmetric `n x n` matrix.
pub fn random_pattern(n: usize, density: f64, seed: u64) -> (Vec<Vec<usize>>, Vec<(usize, usize, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = vec![Vec::new(); n];
    let mut triples = Vec::new();
    for i in 0..n {
        triples.push((i, i, rng.gen_range(-4.0..4.0)));
        for j in i + 1..n {
            if rng.gen_bool(density) {
                rows[i].push(j);
                rows[j].push(i);
                // Values differ across the diagonal so transposition errors show.
                triples.push((i, j, rng.gen_range(-1.0..1.0)));
                triples.push((j, i, rng.gen_range(-1.0..1.0)));
            }
        }
    }
    (rows, triples)
}

pub fn dense(n: usize, triples: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; n]; n];
    for &(i, j, v) in triples {
        a[i][j] += v;
    }
    a
}

fn assert_close(got: &[f64], want: &[f64], scale: f64) {
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= 1e-13 * scale.max(1.0), "got {g}, want {w}");
    }
}

/// `smvp` and `stmvp` against dense products.
pub fn check_products(n: usize, rows: &[Vec<usize>], triples: &[(usize, usize, f64)], k_cap: usize, seed: u64) {
    let pattern = Arc::new(SparsityPattern::from_rows(rows, k_cap).unwrap());
    let a = HybridMatrix::from_triples(pattern, triples).unwrap();
    let d = dense(n, triples);
    let x: Vec<f64> = (0..n).map(|i| ((i as u64 * 7919 + seed) % 97) as f64 / 13.0 - 3.0).collect();
    let y: Vec<f64> = (0..n).map(|i| (0..n).map(|j| d[i][j] * x[j]).sum()).collect();
    let yt: Vec<f64> = (0..n).map(|j| (0..n).map(|i| d[i][j] * x[i]).sum()).collect();
    // Scale of the largest possible partial sum.
    let scale = (0..n)
        .map(|i| (0..n).map(|j| (d[i][j] * x[j]).abs() + (d[j][i] * x[j]).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    assert_close(&a.smvp(&x).unwrap(), &y, scale);
    assert_close(&a.stmvp(&x).unwrap(), &yt, scale);
}

/// Independent reading of the arrays: every stored `(i, j)` sits either in ELL
/// row `i` or in the CRS part, and every ELL twin index points back at row `i`.
pub fn check_arrays(p: &SparsityPattern, rows: &[Vec<usize>]) {
    let (n, k) = (p.n(), p.k());
    let (ia, ja) = (p.i_array(), p.j_array());
    let mut seen = vec![Vec::new(); n];
    for i in 0..n {
        for s in 0..k {
            let c = ia[i * k + s];
            if c == SENTINEL {
                assert_eq!(ja[i * k + s], SENTINEL);
                continue;
            }
            let j = c as usize;
            seen[i].push(j);
            let t = ja[i * k + s];
            if t != SENTINEL {
                assert_eq!(ia[j * k + t as usize], i as i32, "J[{i}][{s}] does not point back");
            }
        }
        let ptr = p.crs_row_ptr();
        seen[i].extend(p.crs_col()[ptr[i]..ptr[i + 1]].iter().copied());
        seen[i].sort_unstable();
        let mut want = rows[i].clone();
        want.push(i);
        want.sort_unstable();
        want.dedup();
        assert_eq!(seen[i], want, "row {i}");
    }
    p.check_invariants().unwrap();
    for mode in [QMode::ByN, QMode::ByK] {
        let (i2, j2) = unpack_q(&p.pack_q(mode), n, k, mode);
        assert_eq!((i2.as_slice(), j2.as_slice()), (ia, ja));
    }
}

/// Gaussian elimination with partial pivoting.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Random sparse system; symmetric positive definite when `spd`, otherwise
/// nonsymmetric and strictly diagonally dominant.
pub fn random_system(n: usize, seed: u64, spd: bool) -> (HybridMatrix, Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = vec![vec![0.0; n]; n];
    let mut rows = vec![Vec::new(); n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(0.2) {
                rows[i].push(j);
                rows[j].push(i);
                let v: f64 = rng.gen_range(-1.0..1.0);
                d[i][j] = v;
                d[j][i] = if spd { v } else { rng.gen_range(-1.0..1.0) };
            }
        }
    }
    for i in 0..n {
        let off: f64 = (0..n).map(|j| d[i][j].abs()).sum::<f64>().max((0..n).map(|j| d[j][i].abs()).sum());
        d[i][i] = off + rng.gen_range(0.1..2.0);
    }
    let triples: Vec<_> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| d[i][j] != 0.0)
        .map(|(i, j)| (i, j, d[i][j]))
        .collect();
    let k = rows.iter().map(Vec::len).max().unwrap_or(0) + 1;
    let pattern = Arc::new(SparsityPattern::from_rows(&rows, k.min(4)).unwrap());
    let a = HybridMatrix::from_triples(pattern, &triples).unwrap();
    let b = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (a, d, b)
}

pub fn max_rel_diff(x: &[f64], y: &[f64]) -> f64 {
    let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    x.iter().zip(y).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

pub fn scalar_bcs(fv: &FvMesh, value: f64) -> Vec<BoundaryCondition<f64>> {
    fv.mesh
        .patches()
        .iter()
        .map(
            |p| {
                if p.kind == PatchKind::Empty {
                    BoundaryCondition::Empty
                } else {
                    BoundaryCondition::FixedValue(value)
                }
            },
        )
        .collect()
}

/// L2 error of `-lap(phi) = f` for `phi = sin(pi (x - y tan a)) sin(pi y)`,
/// which vanishes on every side of the sheared unit square.
pub fn manufactured_error(n: usize, skew_deg: f64, correct: bool) -> f64 {
    let fv = FvMesh::new(cases::gen_skewed_duct_sized(n, n, skew_deg, 1.0, 1.0).unwrap().mesh).unwrap();
    let t = skew_deg.to_radians().tan();
    let exact = |x: &Vec3| (PI * (x.x - t * x.y)).sin() * (PI * x.y).sin();
    let source = |x: &Vec3| {
        let (a, b) = (PI * (x.x - t * x.y), PI * x.y);
        PI * PI * ((2.0 + t * t) * a.sin() * b.sin() + 2.0 * t * a.cos() * b.cos())
    };
    let g = &fv.geometry;
    let rhs: Vec<f64> = g.cell_centroid.iter().zip(&g.cell_volume).map(|(c, v)| source(c) * v).collect();
    let mut phi = Field::new("phi", &fv, scalar_bcs(&fv, 0.0), 0.0).unwrap();
    let scheme = SchemeConfig { nonorth_correction: correct, ..SchemeConfig::default() };
    let gamma = vec![1.0; fv.mesh.n_faces()];
    let cfg = SolveConfig { tolerance: 1e-12, max_iters: 10_000, ..SolveConfig::default() };
    let mut grad = None;
    for _ in 0..200 {
        let mut m = fvm::laplacian_with_gradient(&fv, &gamma, &phi, grad.as_deref(), &scheme);
        m.negate();
        let (x, _) = m.solve(&phi.values, Some(&rhs), Krylov::Cg, &cfg).unwrap();
        let change = x.iter().zip(&phi.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        phi.values = x;
        phi.correct_boundary(&fv);
        if !correct || change < 1e-11 {
            break;
        }
        grad = Some(fvm::gauss_gradient(&fv, &phi));
    }
    let err: f64 =
        g.cell_centroid.iter().zip(&g.cell_volume).zip(&phi.values).map(|((c, v), p)| (p - exact(c)).powi(2) * v).sum();
    (err / g.total_volume()).sqrt()
}
