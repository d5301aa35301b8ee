//! Structural invariants of the spline dictionary, mostly as property
//! tests: locality of eval_block, cell bookkeeping, Gram shape, and
//! whitening.

use std::sync::Arc;

use drcf_core::basis::{build_basis, gram, whiten, BasisSpec, SeriesBasis, TransformedBasis};
use nalgebra::DMatrix;
use proptest::prelude::*;

#[test]
fn spec_counts_follow_the_formulas() {
    let spec = BasisSpec::new(2, 3, 2);
    assert_eq!(spec.n_cells(), 9, "3^2 cells");
    assert_eq!(spec.block_size(), 6, "binom(2 + 2, 2) monomials per cell");
    assert_eq!(spec.basis_size(), 54, "cells times block");
}

#[test]
fn spec_validation_rejects_degenerate_shapes() {
    assert!(BasisSpec::new(0, 2, 1).validate().is_err(), "dim 0 must be rejected");
    assert!(BasisSpec::new(9, 2, 1).validate().is_err(), "dim above 8 must be rejected");
    assert!(BasisSpec::new(1, 0, 1).validate().is_err(), "zero segments must be rejected");
    let huge = BasisSpec::new(8, 64, 2);
    assert!(huge.validate().is_err(), "2^31-entry bases must be refused");
}

#[test]
fn degree_zero_basis_is_the_cell_indicator_dictionary() {
    let basis = build_basis(&BasisSpec::new(1, 4, 0)).expect("valid spec");
    let mut buf = vec![0.0; basis.max_block()];
    for (x, cell) in [(0.0, 0), (0.24, 0), (0.25, 1), (0.6, 2), (0.75, 3), (1.0, 3)] {
        let range = basis.eval_block(&[x], &mut buf).expect("in-domain point");
        assert_eq!(range, cell..cell + 1, "x = {x} should activate cell {cell}");
        assert_eq!(buf[0], 1.0, "degree-0 active value is the indicator");
    }
}

#[test]
fn out_of_domain_points_are_rejected() {
    let basis = build_basis(&BasisSpec::new(2, 2, 1)).expect("valid spec");
    let mut buf = vec![0.0; basis.max_block()];
    let err = basis
        .eval_block(&[0.5, 1.5], &mut buf)
        .err()
        .expect("point outside the unit square should error");
    assert!(
        err.to_string().contains("outside domain"),
        "error should name the domain violation: {err}"
    );
}

#[test]
fn degree_zero_gram_is_the_diagonal_of_cell_frequencies() {
    let basis = build_basis(&BasisSpec::new(1, 2, 0)).expect("valid spec");
    // Three points in the left cell, one in the right.
    let pts = [0.1, 0.2, 0.3, 0.9];
    let g = gram(&basis, &pts, None, false).expect("gram should build");
    assert_eq!(g.n, 4, "row count");
    assert!((g.matrix[(0, 0)] - 0.75).abs() < 1e-15, "left cell frequency 3/4");
    assert!((g.matrix[(1, 1)] - 0.25).abs() < 1e-15, "right cell frequency 1/4");
    assert_eq!(g.matrix[(0, 1)], 0.0, "disjoint supports never interact");
}

#[test]
fn whitener_makes_its_reference_the_identity() {
    let basis = build_basis(&BasisSpec::new(1, 3, 1)).expect("valid spec");
    let pts: Vec<f64> = (0..300).map(|i| (i as f64 + 0.5) / 300.0).collect();
    let g = gram(&basis, &pts, None, false).expect("gram should build");
    let w = whiten(&g).expect("dense design is well conditioned");
    let white = w.apply_gram(&g);
    let k = basis.len();
    for i in 0..k {
        for j in 0..k {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!(
                (white[(i, j)] - want).abs() < 1e-10,
                "whitened reference should be the identity, entry ({i},{j}) = {}",
                white[(i, j)]
            );
        }
    }
}

#[test]
fn transformed_basis_applies_its_matrix() {
    let inner: Arc<dyn SeriesBasis> = Arc::new(build_basis(&BasisSpec::new(1, 2, 1)).unwrap());
    let k = inner.len();
    // Well-conditioned lower-triangular map.
    let mut wm = DMatrix::identity(k, k);
    for i in 1..k {
        wm[(i, i - 1)] = 0.3;
    }
    let t = TransformedBasis::new(inner.clone(), wm.clone()).expect("square map");
    let x = [0.37];
    let dense_inner = inner.evaluate(&x).expect("inner eval");
    let dense_t = t.evaluate(&x).expect("transformed eval");
    let want = &wm * dense_inner;
    for i in 0..k {
        assert!(
            (dense_t[i] - want[i]).abs() < 1e-14,
            "transformed evaluation should equal W q(x) at index {i}"
        );
    }
    assert_eq!(t.cell_hint(&x).unwrap(), None, "dense bases claim no cell");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eval_block_is_local_and_matches_dense_evaluation(
        dim in 1usize..=3,
        segments in 1usize..=4,
        degree in 0usize..=2,
        seed in 0u64..1000,
    ) {
        let spec = BasisSpec::new(dim, segments, degree);
        let basis = build_basis(&spec).expect("valid spec");
        // Deterministic pseudo-random point from the seed.
        let x: Vec<f64> = (0..dim)
            .map(|ax| {
                let h = seed.wrapping_mul(0x9E3779B97F4A7C15).rotate_left(ax as u32 * 7);
                (h % 10_000) as f64 / 10_000.0
            })
            .collect();
        let mut buf = vec![0.0; basis.max_block()];
        let range = basis.eval_block(&x, &mut buf).expect("in-domain point");
        prop_assert_eq!(range.len(), spec.block_size(), "block length is constant");
        let cell = basis.cell_hint(&x).expect("in-domain").expect("spline bases have cells");
        prop_assert_eq!(range.start, cell * spec.block_size(), "block starts at its cell offset");
        let dense = basis.evaluate(&x).expect("dense eval");
        for i in 0..basis.len() {
            let want = if range.contains(&i) { buf[i - range.start] } else { 0.0 };
            prop_assert_eq!(dense[i], want, "dense and block evaluations must agree");
        }
        // The constant is always the leading monomial of the block.
        prop_assert_eq!(buf[0], 1.0, "graded order puts the constant first");
    }

    #[test]
    fn local_coordinates_stay_in_the_reference_box(
        segments in 1usize..=5,
        degree in 1usize..=2,
        t in 0.0f64..=1.0,
    ) {
        let basis = build_basis(&BasisSpec::new(1, segments, degree)).expect("valid spec");
        let mut buf = vec![0.0; basis.max_block()];
        basis.eval_block(&[t], &mut buf).expect("in-domain point");
        // Block is [1, u, u^2, ...] with u in [-1, 1].
        prop_assert!(buf[1].abs() <= 1.0 + 1e-12, "local coordinate should stay in [-1, 1], got {}", buf[1]);
    }

    #[test]
    fn sample_grams_are_positive_semidefinite(
        segments in 1usize..=3,
        degree in 0usize..=2,
        n in 5usize..40,
        seed in 0u64..1000,
    ) {
        let basis = build_basis(&BasisSpec::new(1, segments, degree)).expect("valid spec");
        let pts: Vec<f64> = (0..n)
            .map(|i| {
                let h = seed.wrapping_add(i as u64).wrapping_mul(0x9E3779B97F4A7C15);
                (h % 100_000) as f64 / 100_000.0
            })
            .collect();
        let g = gram(&basis, &pts, None, false).expect("gram should build");
        let (lo, _) = g.eig_range();
        prop_assert!(lo > -1e-10, "sample Gram must be PSD, lambda_min = {lo}");
    }
}
