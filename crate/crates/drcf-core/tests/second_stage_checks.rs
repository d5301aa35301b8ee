//! Second-stage regression: reproducing property, weight locality,
//! agreement of the coefficient and weighted paths, cross-fit breach
//! detection, and support flags.

use std::sync::Arc;

use drcf_core::basis::{build_basis, BasisSpec, SeriesBasis};
use drcf_core::data::Dataset;
use drcf_core::estimands::LinearFunctional;
use drcf_core::nuisance::{fit_alpha, fit_gamma, SplitTag};
use drcf_core::second_stage::{
    fit_theta, fit_theta_from, pseudo_outcome_oracle, weights, PseudoOutcomeModel,
};

fn dataset_1d(xs: Vec<f64>, a: Vec<f64>, y: Vec<f64>) -> Dataset {
    Dataset::new(1, xs, a, y, vec![0]).expect("valid dataset")
}

fn arc_basis(spec: &BasisSpec) -> Arc<dyn SeriesBasis> {
    Arc::new(build_basis(spec).expect("valid spec"))
}

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
fn weights_reproduce_polynomials_in_the_spline_span() {
    let mut next = unit_stream(3);
    let basis = arc_basis(&BasisSpec::new(1, 3, 1));
    let c_rows: Vec<f64> = (0..120).map(|_| next()).collect();
    let g = |x: f64| 2.0 - 3.0 * x;
    let target = [0.41];
    let w = weights(basis.as_ref(), &c_rows, &target).expect("weights");
    let applied: f64 = w.iter().zip(&c_rows).map(|(wi, ci)| wi * g(*ci)).sum();
    assert!(
        (applied - g(target[0])).abs() < 1e-10,
        "weights must reproduce affine functions: got {applied}, want {}",
        g(target[0])
    );
}

#[test]
fn weights_sum_to_one_and_vanish_outside_the_target_cell() {
    let mut next = unit_stream(5);
    let basis = arc_basis(&BasisSpec::new(1, 2, 0));
    let c_rows: Vec<f64> = (0..50).map(|_| next()).collect();
    let target = [0.2];
    let w = weights(basis.as_ref(), &c_rows, &target).expect("weights");
    let total: f64 = w.iter().sum();
    assert!(
        (total - 1.0).abs() < 1e-12,
        "constants are in the span, so weights sum to one; got {total}"
    );
    for (wi, ci) in w.iter().zip(&c_rows) {
        if *ci >= 0.5 {
            assert_eq!(
                *wi, 0.0,
                "disjoint cell supports must give exactly zero weight, got {wi} at c = {ci}"
            );
        }
    }
}

#[test]
fn coefficient_and_weighted_paths_agree() {
    let mut next = unit_stream(9);
    let n = 80;
    let xs: Vec<f64> = (0..n).map(|_| next()).collect();
    let values: Vec<f64> = (0..n).map(|_| 2.0 * next() - 1.0).collect();
    let flags = vec![false; n];
    let data = dataset_1d(xs, vec![1.0; n], vec![0.0; n]);
    let basis = arc_basis(&BasisSpec::new(1, 2, 1));
    let fit = fit_theta_from(&values, &flags, &basis, &data, SplitTag::Full).expect("fit");
    for t in [0.05, 0.33, 0.71, 0.98] {
        let coef_path = fit.theta_at(0, &[t]).expect("estimate").value;
        let weighted = fit.theta_weighted(&[t]).expect("estimate");
        assert!(
            (coef_path - weighted).abs() < 1e-12,
            "the two evaluation paths compute the same number; at {t}: {coef_path} vs {weighted}"
        );
    }
}

#[test]
fn pseudo_outcomes_match_the_hand_formula_for_cov() {
    // With gamma and alpha fitted, the cov pseudo-outcome collapses to
    // (a + alpha(x)) (y - gamma(x)).
    let mut next = unit_stream(13);
    let n = 60;
    let xs: Vec<f64> = (0..n).map(|_| next()).collect();
    let a: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let y: Vec<f64> = (0..n).map(|_| 2.0 * next() - 1.0).collect();
    let data = dataset_1d(xs.clone(), a.clone(), y.clone());
    let fun = LinearFunctional::cov();
    let basis = arc_basis(&BasisSpec::new(1, 2, 0));
    let gamma = fit_gamma(&data, &fun, &basis, SplitTag::Full).expect("gamma");
    let alpha = fit_alpha(&data, &fun, &basis, SplitTag::Full).expect("alpha");
    let model = PseudoOutcomeModel::new(gamma, alpha, fun).expect("model");
    let (values, flagged) = model.pseudo_outcomes(&data).expect("pseudo-outcomes");
    assert!(flagged.iter().all(|f| !f), "both cells are populated");
    for i in 0..n {
        let gv = model.gamma.predict(&[xs[i]]).expect("in-domain").value;
        let av = model.alpha.predict(&[xs[i]]).expect("in-domain").value;
        let want = (a[i] + av) * (y[i] - gv);
        assert!(
            (values[i] - want).abs() < 1e-12,
            "pseudo-outcome at row {i} should be (a + alpha)(y - gamma): {} vs {want}",
            values[i]
        );
    }
}

#[test]
fn oracle_pseudo_outcome_respects_the_subpopulation_indicator() {
    let gamma0 = |x: &[f64]| 1.0 + x[0];
    let alpha0 = |_x: &[f64]| 2.0;
    let fun = LinearFunctional::trt();
    let x = [0.5];
    // Control row: J = 0, so only the plug-in term remains.
    let f0 = pseudo_outcome_oracle(
        &fun,
        &gamma0,
        &alpha0,
        drcf_core::estimands::ZView { x: &x, a: 0.0, y: 9.0 },
    )
    .expect("evaluates");
    assert!((f0 - 1.5).abs() < 1e-15, "control row contributes gamma0 only, got {f0}");
    // Treated row adds the residual correction 2 * (y - gamma0).
    let f1 = pseudo_outcome_oracle(
        &fun,
        &gamma0,
        &alpha0,
        drcf_core::estimands::ZView { x: &x, a: 1.0, y: 2.0 },
    )
    .expect("evaluates");
    assert!((f1 - 2.5).abs() < 1e-15, "treated row is 1.5 + 2 * 0.5, got {f1}");
}

#[test]
fn insample_evaluation_is_refused_without_the_override() {
    let mut next = unit_stream(17);
    let n = 40;
    let xs: Vec<f64> = (0..n).map(|_| next()).collect();
    let data = dataset_1d(xs, vec![1.0; n], vec![1.0; n]);
    let fun = LinearFunctional::cov();
    let basis = arc_basis(&BasisSpec::new(1, 2, 0));
    let gamma = fit_gamma(&data, &fun, &basis, SplitTag::Fold(0)).expect("gamma");
    let alpha = fit_alpha(&data, &fun, &basis, SplitTag::Fold(1)).expect("alpha");
    let model = PseudoOutcomeModel::new(gamma, alpha, fun).expect("model");
    let err = fit_theta(&model, &basis, &data, SplitTag::Fold(0), false)
        .expect_err("gamma was trained on the evaluation fold");
    assert!(
        err.to_string().contains("cross-fit breach"),
        "error should name the breach: {err}"
    );
    assert!(
        err.to_string().contains("gamma"),
        "error should name the offending nuisance: {err}"
    );
    // The same call with the override succeeds.
    fit_theta(&model, &basis, &data, SplitTag::Fold(0), true)
        .expect("in-sample evaluation is allowed when requested explicitly");
}

#[test]
fn targets_in_empty_cells_are_reported_as_unsupported() {
    // Evaluation rows only in the left half.
    let xs = vec![0.05, 0.1, 0.2, 0.3, 0.4, 0.45];
    let n = xs.len();
    let values = vec![1.0; n];
    let flags = vec![false; n];
    let data = dataset_1d(xs, vec![1.0; n], vec![0.0; n]);
    let basis = arc_basis(&BasisSpec::new(1, 2, 0));
    let fit = fit_theta_from(&values, &flags, &basis, &data, SplitTag::Full).expect("fit");
    let est = fit.theta_at(0, &[0.9]).expect("estimate");
    assert!(est.no_support, "the right cell has no evaluation data");
    assert!(est.value.is_nan(), "unsupported estimates carry NaN values");
    let ok = fit.theta_at(0, &[0.2]).expect("estimate");
    assert!(!ok.no_support, "the left cell is supported");
    assert!((ok.value - 1.0).abs() < 1e-12, "constant pseudo-outcomes regress to 1");
}

#[test]
fn nuisance_flags_propagate_through_nonzero_weights_only() {
    // One flagged row in the right cell: targets in the left cell give
    // it exactly zero weight, so only right-cell targets inherit it.
    let xs = vec![0.1, 0.2, 0.3, 0.6, 0.7, 0.9];
    let n = xs.len();
    let values = vec![1.0; n];
    let flags = vec![false, false, false, false, true, false];
    let data = dataset_1d(xs, vec![1.0; n], vec![0.0; n]);
    let basis = arc_basis(&BasisSpec::new(1, 2, 0));
    let fit = fit_theta_from(&values, &flags, &basis, &data, SplitTag::Full).expect("fit");
    let left = fit.theta_at(0, &[0.25]).expect("estimate");
    assert!(
        !left.flagged,
        "the flagged row has zero weight at left-cell targets"
    );
    let right = fit.theta_at(0, &[0.75]).expect("estimate");
    assert!(right.flagged, "right-cell targets weight the flagged row");
}
