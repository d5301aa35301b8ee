//! First-stage fits: exact recovery on noiseless data, the defining
//! moment equation of the representer fit, empty-cell flagging, and
//! population projections.

use std::sync::Arc;

use drcf_core::basis::{build_basis, gram, whiten, BasisSpec, GramMatrix, SeriesBasis};
use drcf_core::data::Dataset;
use drcf_core::estimands::{DiscretePopulation, LinearFunctional, ObservationZ};
use drcf_core::nuisance::{
    diagnostics, fit_alpha, fit_gamma, project_population, DiagnosticsInput, FitKind, SplitTag,
};
use nalgebra::DMatrix;

fn dataset_1d(xs: Vec<f64>, a: Vec<f64>, y: Vec<f64>) -> Dataset {
    Dataset::new(1, xs, a, y, vec![0]).expect("valid dataset")
}

fn arc_basis(spec: &BasisSpec) -> Arc<dyn SeriesBasis> {
    Arc::new(build_basis(spec).expect("valid spec"))
}

/// Deterministic pseudo-uniform stream in (0, 1).
fn unit_stream(seed: u64) -> impl FnMut() -> f64 {
    let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
    move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        ((state >> 11) as f64) / ((1u64 << 53) as f64)
    }
}

#[test]
fn gamma_fit_recovers_a_piecewise_constant_outcome_exactly() {
    // y depends on x only through the cell, so the degree-0 fit on the
    // same partition interpolates it exactly.
    let cell_values = [1.0, -2.0, 5.0];
    let mut next = unit_stream(7);
    let mut xs = Vec::new();
    let mut y = Vec::new();
    for _ in 0..60 {
        let x = next();
        let cell = (x * 3.0).floor().min(2.0) as usize;
        xs.push(x);
        y.push(cell_values[cell]);
    }
    let n = xs.len();
    let data = dataset_1d(xs, vec![1.0; n], y);
    let basis = arc_basis(&BasisSpec::new(1, 3, 0));
    let fit = fit_gamma(&data, &LinearFunctional::cov(), &basis, SplitTag::Full)
        .expect("fit should succeed");
    assert_eq!(fit.kind, FitKind::Gamma, "fit should be labeled as gamma");
    for (x, want) in [(0.1, 1.0), (0.5, -2.0), (0.9, 5.0)] {
        let p = fit.predict(&[x]).expect("in-domain");
        assert!(
            (p.value - want).abs() < 1e-12,
            "noiseless piecewise-constant outcome should be interpolated: at {x} got {}",
            p.value
        );
        assert!(!p.flagged, "all cells carry data");
    }
}

#[test]
fn gamma_fit_for_trt_uses_only_treated_rows() {
    // Treated outcomes are linear in x; control outcomes are sabotage.
    // A degree-1 fit must still recover the treated line exactly.
    let mut next = unit_stream(11);
    let mut xs = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    for i in 0..40 {
        let x = next();
        let treated = i % 2 == 0;
        xs.push(x);
        a.push(if treated { 1.0 } else { 0.0 });
        y.push(if treated { 2.0 * x + 1.0 } else { -50.0 });
    }
    let data = dataset_1d(xs, a, y);
    let basis = arc_basis(&BasisSpec::new(1, 1, 1));
    let fit = fit_gamma(&data, &LinearFunctional::trt(), &basis, SplitTag::Full)
        .expect("fit should succeed");
    for x in [0.1, 0.45, 0.8] {
        let p = fit.predict(&[x]).expect("in-domain");
        assert!(
            (p.value - (2.0 * x + 1.0)).abs() < 1e-10,
            "treated line should be recovered at {x}, got {}",
            p.value
        );
    }
}

#[test]
fn gamma_fit_reports_an_empty_subpopulation() {
    let data = dataset_1d(vec![0.2, 0.6], vec![0.0, 0.0], vec![1.0, 2.0]);
    let basis = arc_basis(&BasisSpec::new(1, 1, 0));
    let err = fit_gamma(&data, &LinearFunctional::trt(), &basis, SplitTag::Full)
        .expect_err("no treated rows should be an error");
    assert!(
        err.to_string().contains("no observations with J = 1"),
        "error should describe the empty subpopulation: {err}"
    );
}

#[test]
fn alpha_fit_solves_its_moment_equation() {
    // The fit is defined by (1/n) sum J q q^T c = (1/n) sum v_q, so the
    // fitted alpha must reproduce the v_q average against the basis.
    let mut next = unit_stream(23);
    for fun in [LinearFunctional::cov(), LinearFunctional::trt(), LinearFunctional::ctrl()] {
        let mut xs = Vec::new();
        let mut a = Vec::new();
        let mut y = Vec::new();
        for i in 0..200 {
            xs.push(next());
            a.push((i % 2) as f64);
            y.push(2.0 * next() - 1.0);
        }
        let data = dataset_1d(xs, a, y);
        let basis = arc_basis(&BasisSpec::new(1, 4, 1));
        let fit = fit_alpha(&data, &fun, &basis, SplitTag::Full).expect("fit should succeed");
        assert_eq!(fit.kind, FitKind::Alpha, "fit should be labeled as alpha");
        let n = data.n();
        let k = basis.len();
        let mut lhs = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        let mut buf = vec![0.0; basis.max_block()];
        for i in 0..n {
            let z = data.z(i);
            let j = fun.j_indicator(z.a).expect("binary treatments");
            if j != 0.0 {
                let alpha_here = fit.predict(z.x).expect("in-domain").value;
                let range = basis.eval_block(z.x, &mut buf).expect("in-domain");
                for (off, gi) in range.enumerate() {
                    lhs[gi] += j * buf[off] * alpha_here / n as f64;
                }
            }
            let dense = fun.v_q_dense(z, basis.as_ref()).expect("v_q");
            for gi in 0..k {
                rhs[gi] += dense[gi] / n as f64;
            }
        }
        for gi in 0..k {
            assert!(
                (lhs[gi] - rhs[gi]).abs() < 1e-10,
                "moment equation must hold at index {gi} for {}: lhs {} rhs {}",
                fun.name(),
                lhs[gi],
                rhs[gi]
            );
        }
    }
}

#[test]
fn alpha_fit_for_cov_is_least_squares_of_minus_a() {
    // For the covariance functional, v_q = -a q and J = 1, so the
    // moment system is literally the normal equations of regressing -A
    // on the dictionary.
    let mut next = unit_stream(31);
    let mut xs = Vec::new();
    let mut a = Vec::new();
    for _ in 0..150 {
        xs.push(next());
        a.push(next() * 2.0);
    }
    let n = xs.len();
    let data = dataset_1d(xs.clone(), a.clone(), vec![0.0; n]);
    let basis = arc_basis(&BasisSpec::new(1, 3, 1));
    let fit = fit_alpha(&data, &LinearFunctional::cov(), &basis, SplitTag::Full)
        .expect("fit should succeed");
    // Hand-rolled least squares of -a on the basis.
    let k = basis.len();
    let mut g = DMatrix::zeros(k, k);
    let mut m = nalgebra::DVector::zeros(k);
    for i in 0..n {
        let q = basis.evaluate(&[xs[i]]).expect("in-domain");
        g += &q * q.transpose() / n as f64;
        m += q * (-a[i]) / n as f64;
    }
    let coef = g.cholesky().expect("well-conditioned").solve(&m);
    for i in 0..k {
        assert!(
            (fit.coefficients[i] - coef[i]).abs() < 1e-10,
            "cov alpha fit should match -A least squares at coefficient {i}"
        );
    }
}

#[test]
fn empty_cells_are_dropped_and_flagged() {
    // No data in the middle third.
    let xs = vec![0.05, 0.15, 0.25, 0.75, 0.85, 0.95];
    let n = xs.len();
    let data = dataset_1d(xs, vec![1.0; n], vec![1.0; n]);
    let basis = arc_basis(&BasisSpec::new(1, 3, 0));
    let fit = fit_gamma(&data, &LinearFunctional::cov(), &basis, SplitTag::Full)
        .expect("fit should succeed despite the hole");
    assert_eq!(fit.meta.flagged_cells, vec![1], "the empty middle cell should be flagged");
    assert!(!fit.meta.dropped.is_empty(), "empty cell coefficients should be dropped");
    let p = fit.predict(&[0.5]).expect("in-domain");
    assert!(p.flagged, "prediction in the empty cell must carry the flag");
    assert_eq!(p.value, 0.0, "dropped coefficients predict exactly zero");
    let ok = fit.predict(&[0.1]).expect("in-domain");
    assert!(!ok.flagged, "populated cells are not flagged");
}

#[test]
fn underfilled_cells_are_flagged() {
    // Degree 1 needs two local parameters per cell. The middle third
    // holds a single point, so its local line is not identified: the
    // fit must survive (via the solve policy) but carry the flag, while
    // the outer cells with four points each stay clean.
    let xs = vec![0.05, 0.15, 0.25, 0.30, 0.50, 0.70, 0.75, 0.85, 0.95];
    let n = xs.len();
    let data = dataset_1d(xs, vec![1.0; n], vec![7.0; n]);
    let basis = arc_basis(&BasisSpec::new(1, 3, 1));
    let fit = fit_gamma(&data, &LinearFunctional::cov(), &basis, SplitTag::Full)
        .expect("fit should succeed despite the thin cell");
    assert_eq!(
        fit.meta.flagged_cells,
        vec![1],
        "one point cannot identify a local line, so the middle cell is flagged"
    );
    let thin = fit.predict(&[0.45]).expect("in-domain");
    assert!(thin.flagged, "predictions in the under-identified cell carry the flag");
    assert!(thin.value.is_finite(), "the rescued fit still predicts a finite value");
    for x in [0.1, 0.9] {
        let ok = fit.predict(&[x]).expect("in-domain");
        assert!(!ok.flagged, "cells with enough points for the local block are not flagged");
    }
}

#[test]
fn population_projection_equals_the_subpopulation_projection() {
    // Projecting onto p = J q over the full population must match
    // projecting onto q over the J = 1 subpopulation: the J = 1
    // restriction only rescales both sides of the normal equations.
    let mut next = unit_stream(43);
    let mut points = Vec::new();
    for i in 0..30 {
        let x = (i as f64 + 0.5) / 30.0;
        points.push(ObservationZ::new(vec![x], 1.0, next()));
        points.push(ObservationZ::new(vec![x], 0.0, next()));
        points.push(ObservationZ::new(vec![x], (i % 2) as f64, next()));
    }
    let n = points.len();
    let pop = DiscretePopulation::new(points.clone(), vec![1.0 / n as f64; n]).expect("valid");
    let fun = LinearFunctional::trt();
    let basis = build_basis(&BasisSpec::new(1, 2, 1)).expect("valid spec");
    let target = |x: &[f64]| (3.0 * x[0]).sin() + 0.5;
    let full = project_population(&target, &fun, &basis, &pop).expect("projection");

    // Subpopulation projection by direct renormalized enumeration.
    let treated: Vec<ObservationZ> = points.iter().filter(|z| z.a == 1.0).cloned().collect();
    let m = treated.len();
    let sub = DiscretePopulation::new(treated, vec![1.0 / m as f64; m]).expect("valid");
    let sub_proj = project_population(&target, &LinearFunctional::cov(), &basis, &sub)
        .expect("cov places no J restriction, so this is the plain q projection");
    for i in 0..basis.len() {
        assert!(
            (full[i] - sub_proj[i]).abs() < 1e-10,
            "full-population p projection and treated-subpopulation q projection must agree \
             at coefficient {i}: {} vs {}",
            full[i],
            sub_proj[i]
        );
    }
}

#[test]
fn diagnostics_compare_whitened_eigenvalues_to_the_thresholds() {
    let basis = build_basis(&BasisSpec::new(1, 2, 0)).expect("valid spec");
    let balanced: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
    let reference = gram(&basis, &balanced, None, false).expect("gram");
    let w = whiten(&reference).expect("well-conditioned");
    // A skewed sample: 10% of mass in the left cell, so the whitened
    // lambda_min is 2 * 0.1 = 0.2 < 1/2.
    let mut skewed: Vec<f64> = (0..10).map(|i| 0.25 + (i as f64) * 0.01).collect();
    skewed.extend((0..90).map(|i| 0.5 + (i as f64 + 0.5) / 180.0));
    let skew_gram = gram(&basis, &skewed, None, false).expect("gram");
    let good: GramMatrix = reference.clone();
    let input = DiagnosticsInput {
        sigma_hat: &skew_gram,
        sigma_tilde: &good,
        sigma_bar: &good,
        sigma_bar_weighted: &good,
        b_bar: &good,
    };
    let d = diagnostics(&input, &w, &w);
    assert!(
        (d.lambda_min_hat - 0.2).abs() < 1e-10,
        "whitened lambda_min of the skewed Gram should be 0.2, got {}",
        d.lambda_min_hat
    );
    assert!(!d.ind_hat, "0.2 < 1/2 must fail the hat indicator");
    assert!(d.ind_tilde, "balanced Gram passes the tilde indicator");
    assert!(d.ind_bar, "balanced Gram passes the bar indicator");
    // Destroy the weighted Gram: indefinite input flips ind_bar off.
    let mut bad = good.clone();
    bad.matrix[(0, 0)] = -1.0;
    let input_bad = DiagnosticsInput {
        sigma_hat: &good,
        sigma_tilde: &good,
        sigma_bar: &good,
        sigma_bar_weighted: &bad,
        b_bar: &good,
    };
    let d_bad = diagnostics(&input_bad, &w, &w);
    assert!(!d_bad.weighted_gram_pd, "indefinite weighted Gram should be detected");
    assert!(!d_bad.ind_bar, "ind_bar requires the weighted Gram to be positive definite");
}
