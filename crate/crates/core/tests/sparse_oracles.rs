//! Hybrid ELL+CRS storage checked against dense products and an independent
//! reading of the `I`/`J` arrays.

mod common;

use common::{check_arrays, check_products, random_pattern};
use fvflow::cases;
use fvflow::fvm::FvMesh;
use fvflow::sparse::{self, SparsityPattern};
use proptest::prelude::*;

/// Random structurally symmetric matrix: `(n, off-diagonal rows, triples)`.
fn random_matrix(max_n: usize) -> impl Strategy<Value = (usize, Vec<Vec<usize>>, Vec<(usize, usize, f64)>)> {
    (1..=max_n, 0.0f64..0.5, any::<u64>()).prop_map(|(n, density, seed)| {
        let (rows, triples) = random_pattern(n, density, seed);
        (n, rows, triples)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn products_match_dense_without_overflow((n, rows, triples) in random_matrix(64), seed in any::<u64>()) {
        let k = rows.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let p = SparsityPattern::from_rows(&rows, k).unwrap();
        prop_assert_eq!(p.crs_len(), 0);
        check_arrays(&p, &rows);
        check_products(n, &rows, &triples, k, seed);
    }

    #[test]
    fn products_match_dense_with_overflow((n, rows, triples) in random_matrix(64), k in 1usize..5, seed in any::<u64>()) {
        let p = SparsityPattern::from_rows(&rows, k).unwrap();
        check_arrays(&p, &rows);
        check_products(n, &rows, &triples, k, seed);
    }
}

#[test]
fn four_by_four_example_arrays() {
    let p = SparsityPattern::example();
    assert_eq!(p.i_array(), &[0, 1, 3, 0, 1, 2, 1, 2, 3, 0, 2, 3]);
    assert_eq!(p.j_array(), &[0, 0, 0, 1, 1, 0, 2, 1, 1, 2, 2, 2]);
    assert_eq!(p.j_array()[p.k() + 2], 0);
    assert_eq!(p.crs_len(), 0);
}

#[test]
fn asymmetric_rows_are_rejected() {
    assert!(SparsityPattern::from_rows(&[vec![1], vec![]], 2).is_err());
}

#[test]
fn structured_meshes_have_no_overflow() {
    for case in [
        cases::gen_cavity(6).unwrap(),
        cases::gen_channel(9, 4, 1.0, 0.2).unwrap(),
        cases::gen_skewed_duct(5, 3, 30.0).unwrap(),
    ] {
        let fv = FvMesh::new(case.mesh).unwrap();
        assert_eq!(fv.pattern.crs_len(), 0);
        fv.pattern.check_invariants().unwrap();
    }
}

#[test]
fn capped_mesh_pattern_overflows_consistently() {
    let mesh = cases::gen_cavity(4).unwrap().mesh;
    let p = sparse::build_pattern(&mesh, 4).unwrap();
    assert!(p.crs_len() > 0);
    p.check_invariants().unwrap();
    // Interior cells have six neighbours: seven entries, four in ELL.
    assert_eq!(p.nnz(), 64 + 2 * mesh.n_internal_faces());
}
