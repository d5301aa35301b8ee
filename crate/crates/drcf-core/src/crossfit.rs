//! Cross-fitting orchestration: fold partitions, role layouts, and the
//! end-to-end pipeline that fits nuisances on their own folds, forms
//! pseudo-outcomes on a held-out fold, and runs the second stage.
//!
//! Three schemes:
//! - none:  everything on the full sample (own-observation bias grows
//!   with the basis size);
//! - 2-way: gamma and alpha share a fold, evaluation uses the other
//!   (removes the own-observation term, leaves the shared-fold
//!   nuisance coupling);
//! - 3-way: gamma, alpha, and evaluation each get their own fold
//!   (nuisance products of independent errors, no coupling term).
//!
//! Iterations rotate the roles over the folds of one partition before
//! drawing a fresh partition, and the per-target results are combined
//! by mean (default) or median.

use alloc::{format, string::String, sync::Arc, vec, vec::Vec};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::basis::{build_basis, gram, whiten, BasisSpec, SeriesBasis, Whitener};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimands::{EstimandSelection, LinearFunctional};
use crate::nuisance::{
    diagnostics, fit_alpha, fit_gamma, gram_p_split, DiagnosticsInput, SplitTag,
    StabilityDiagnostics,
};
use crate::second_stage::{
    fit_theta, fit_theta_from, PseudoOutcomeModel, SecondStageFit, ThetaEstimate,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeKind {
    /// No sample splitting.
    None,
    /// Two folds: nuisances together on one, evaluation on the other.
    TwoWay,
    /// Three folds: gamma, alpha, evaluation all disjoint.
    ThreeWay,
}

impl SchemeKind {
    pub fn n_folds(&self) -> usize {
        match self {
            SchemeKind::None => 1,
            SchemeKind::TwoWay => 2,
            SchemeKind::ThreeWay => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SchemeKind::None => "none",
            SchemeKind::TwoWay => "2way",
            SchemeKind::ThreeWay => "3way",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(SchemeKind::None),
            "2way" | "2-way" | "two-way" | "twoway" => Ok(SchemeKind::TwoWay),
            "3way" | "3-way" | "three-way" | "threeway" => Ok(SchemeKind::ThreeWay),
            other => Err(Error::Validation(format!(
                "unknown cross-fit scheme {other:?}; expected none, 2way, or 3way"
            ))),
        }
    }
}

/// How per-iteration estimates are combined into the final one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Mean,
    Median,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossFitScheme {
    pub kind: SchemeKind,
    /// Number of (partition, layout) passes to average over.
    pub iterations: usize,
    pub seed: u64,
    /// For 3-way, also run the three layouts with gamma and alpha
    /// folds swapped (six layouts per partition instead of three).
    pub all_rotations: bool,
    pub combine: Combine,
}

impl CrossFitScheme {
    /// Defaults: one iteration without splitting, otherwise one full
    /// role rotation per partition (2 for 2-way, 3 for 3-way).
    pub fn new(kind: SchemeKind, seed: u64) -> Self {
        let iterations = match kind {
            SchemeKind::None => 1,
            SchemeKind::TwoWay => 2,
            SchemeKind::ThreeWay => 3,
        };
        CrossFitScheme {
            kind,
            iterations,
            seed,
            all_rotations: false,
            combine: Combine::Mean,
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations.max(1);
        self
    }

    pub fn with_all_rotations(mut self, yes: bool) -> Self {
        self.all_rotations = yes;
        self
    }

    pub fn with_combine(mut self, combine: Combine) -> Self {
        self.combine = combine;
        self
    }

    /// Role layouts (gamma fold, alpha fold, evaluation fold) cycled
    /// by the iteration index.
    pub fn layouts(&self) -> Vec<(usize, usize, usize)> {
        match self.kind {
            SchemeKind::None => vec![(0, 0, 0)],
            SchemeKind::TwoWay => vec![(0, 0, 1), (1, 1, 0)],
            SchemeKind::ThreeWay => {
                let mut l = vec![(0, 1, 2), (1, 2, 0), (2, 0, 1)];
                if self.all_rotations {
                    l.extend([(1, 0, 2), (2, 1, 0), (0, 2, 1)]);
                }
                l
            }
        }
    }
}

/// Fold assignment (values in 0..n_folds) for one partition draw.
/// Sizes are balanced to within one row. Partitions are indexed
/// streams of the same seed, so partition p is reproducible without
/// generating partitions 0..p-1.
pub fn split_partition(
    n_total: usize,
    n_folds: usize,
    seed: u64,
    partition: u64,
) -> Result<Vec<usize>> {
    if n_folds == 0 {
        return Err(Error::Validation("cannot split into zero folds".into()));
    }
    if n_total < n_folds {
        return Err(Error::Data(format!(
            "cannot split {n_total} rows into {n_folds} folds"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(partition);
    let mut order: Vec<usize> = (0..n_total).collect();
    order.shuffle(&mut rng);
    let mut folds = vec![0usize; n_total];
    for (pos, &row) in order.iter().enumerate() {
        folds[row] = pos % n_folds;
    }
    Ok(folds)
}

/// Fold assignment for the scheme's first partition.
pub fn split(n_total: usize, scheme: &CrossFitScheme) -> Result<Vec<usize>> {
    split_partition(n_total, scheme.kind.n_folds(), scheme.seed, 0)
}

/// One iteration's output: which partition and layout it used, the
/// per-target estimates, and the eigenvalue diagnostics when the
/// pooled whitening reference was available.
#[derive(Debug, Clone)]
pub struct IterationEstimate {
    pub iteration: usize,
    pub partition: u64,
    pub layout: (usize, usize, usize),
    pub estimates: Vec<ThetaEstimate>,
    pub diagnostics: Option<StabilityDiagnostics>,
}

/// Combined cross-fit estimate with the per-iteration trail.
#[derive(Debug, Clone)]
pub struct CrossFitEstimate {
    pub estimates: Vec<ThetaEstimate>,
    pub per_iteration: Vec<IterationEstimate>,
    pub scheme: CrossFitScheme,
    pub estimand: String,
}

struct IterationSplits {
    d_gamma: Dataset,
    tag_gamma: SplitTag,
    d_alpha: Dataset,
    tag_alpha: SplitTag,
    d_eval: Dataset,
    tag_eval: SplitTag,
    insample: bool,
}

fn iteration_splits(
    data: &Dataset,
    scheme: &CrossFitScheme,
    layout: (usize, usize, usize),
    partition: u64,
) -> Result<IterationSplits> {
    let n_folds = scheme.kind.n_folds();
    if scheme.kind == SchemeKind::None {
        let all: Vec<usize> = (0..data.n()).collect();
        return Ok(IterationSplits {
            d_gamma: data.subset(&all),
            tag_gamma: SplitTag::Full,
            d_alpha: data.subset(&all),
            tag_alpha: SplitTag::Full,
            d_eval: data.subset(&all),
            tag_eval: SplitTag::Full,
            insample: true,
        });
    }
    let folds = split_partition(data.n(), n_folds, scheme.seed, partition)?;
    let rows_of = |f: usize| -> Vec<usize> {
        (0..data.n()).filter(|&i| folds[i] == f).collect()
    };
    Ok(IterationSplits {
        d_gamma: data.subset(&rows_of(layout.0)),
        tag_gamma: SplitTag::Fold(layout.0),
        d_alpha: data.subset(&rows_of(layout.1)),
        tag_alpha: SplitTag::Fold(layout.1),
        d_eval: data.subset(&rows_of(layout.2)),
        tag_eval: SplitTag::Fold(layout.2),
        insample: false,
    })
}

/// Pooled whitening references: the J-weighted p-moment for the q
/// basis and the plain b-moment, both over the full sample. None when
/// the pooled Gram is rank deficient, in which case estimation still
/// runs but diagnostics are skipped.
fn pooled_whiteners(
    data: &Dataset,
    fun: &LinearFunctional,
    q_basis: &dyn SeriesBasis,
    b_basis: &dyn SeriesBasis,
) -> (Option<Whitener>, Option<Whitener>) {
    let qw = gram_p_split(data, fun, q_basis)
        .ok()
        .and_then(|g| whiten(&g).ok());
    let bw = gram(b_basis, &data.c_rows(), None, false)
        .ok()
        .and_then(|g| whiten(&g).ok());
    (qw, bw)
}

fn iteration_diagnostics(
    fun: &LinearFunctional,
    q_basis: &dyn SeriesBasis,
    splits: &IterationSplits,
    fit: &SecondStageFit,
    first_target: Option<&Vec<f64>>,
    qw: &Whitener,
    bw: &Whitener,
) -> Result<StabilityDiagnostics> {
    let sigma_hat = gram_p_split(&splits.d_gamma, fun, q_basis)?;
    let sigma_tilde = gram_p_split(&splits.d_alpha, fun, q_basis)?;
    let sigma_bar = gram_p_split(&splits.d_eval, fun, q_basis)?;
    // The weighted evaluation moment uses the second-stage weights at
    // the first target; only its definiteness is consulted, so the
    // overall 1/n scale is immaterial.
    let sigma_bar_weighted = match first_target {
        Some(t) => {
            let w = fit.weights(t)?;
            let mut wj = Vec::with_capacity(splits.d_eval.n());
            for i in 0..splits.d_eval.n() {
                wj.push(w[i] * fun.j_indicator(splits.d_eval.a(i))?);
            }
            gram(q_basis, splits.d_eval.xs_flat(), Some(&wj), true)?
        }
        None => sigma_bar.clone(),
    };
    Ok(diagnostics(
        &DiagnosticsInput {
            sigma_hat: &sigma_hat,
            sigma_tilde: &sigma_tilde,
            sigma_bar: &sigma_bar,
            sigma_bar_weighted: &sigma_bar_weighted,
            b_bar: &fit.bbar,
        },
        qw,
        bw,
    ))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn combine_estimates(
    per_iteration: &[IterationEstimate],
    combine: Combine,
    n_targets: usize,
) -> Vec<ThetaEstimate> {
    (0..n_targets)
        .map(|t| {
            let mut vals = Vec::new();
            let mut flagged = false;
            for it in per_iteration {
                let e = &it.estimates[t];
                if !e.no_support && e.value.is_finite() {
                    vals.push(e.value);
                    flagged |= e.flagged;
                }
            }
            if vals.is_empty() {
                ThetaEstimate {
                    target_id: t,
                    value: f64::NAN,
                    no_support: true,
                    flagged: per_iteration.iter().any(|it| it.estimates[t].flagged),
                }
            } else {
                let value = match combine {
                    Combine::Mean => mean(&vals),
                    Combine::Median => median(&mut vals),
                };
                ThetaEstimate {
                    target_id: t,
                    value,
                    no_support: false,
                    flagged,
                }
            }
        })
        .collect()
}

fn validate_run_inputs(
    data: &Dataset,
    q_spec: &BasisSpec,
    b_spec: &BasisSpec,
    targets: &[Vec<f64>],
) -> Result<()> {
    if q_spec.dim != data.d_x() {
        return Err(Error::Validation(format!(
            "first-stage basis dim {} does not match covariate dim {}",
            q_spec.dim,
            data.d_x()
        )));
    }
    if b_spec.dim != data.c_dim() {
        return Err(Error::Validation(format!(
            "second-stage basis dim {} does not match conditioning dim {}",
            b_spec.dim,
            data.c_dim()
        )));
    }
    for (i, t) in targets.iter().enumerate() {
        if t.len() != data.c_dim() {
            return Err(Error::Validation(format!(
                "target {} has dim {} but the conditioning vector has dim {}",
                i,
                t.len(),
                data.c_dim()
            )));
        }
    }
    Ok(())
}

/// End-to-end cross-fit estimation of one linear functional at the
/// given conditioning targets.
pub fn run(
    data: &Dataset,
    fun: &LinearFunctional,
    q_spec: &BasisSpec,
    b_spec: &BasisSpec,
    scheme: &CrossFitScheme,
    targets: &[Vec<f64>],
) -> Result<CrossFitEstimate> {
    validate_run_inputs(data, q_spec, b_spec, targets)?;
    let q_basis: Arc<dyn SeriesBasis> = Arc::new(build_basis(q_spec)?);
    let b_basis: Arc<dyn SeriesBasis> = Arc::new(build_basis(b_spec)?);
    let (qw, bw) = pooled_whiteners(data, fun, q_basis.as_ref(), b_basis.as_ref());
    let layouts = scheme.layouts();
    let mut per_iteration = Vec::with_capacity(scheme.iterations);
    for it in 0..scheme.iterations {
        let partition = (it / layouts.len()) as u64;
        let layout = layouts[it % layouts.len()];
        let splits = iteration_splits(data, scheme, layout, partition)?;
        let g_fit = fit_gamma(&splits.d_gamma, fun, &q_basis, splits.tag_gamma)?;
        let a_fit = fit_alpha(&splits.d_alpha, fun, &q_basis, splits.tag_alpha)?;
        let model = PseudoOutcomeModel::new(g_fit, a_fit, fun.clone())?;
        let fit = fit_theta(&model, &b_basis, &splits.d_eval, splits.tag_eval, splits.insample)?;
        let estimates = fit.estimates(targets)?;
        let diag = match (&qw, &bw) {
            (Some(qw), Some(bw)) => Some(iteration_diagnostics(
                fun,
                q_basis.as_ref(),
                &splits,
                &fit,
                targets.first(),
                qw,
                bw,
            )?),
            _ => None,
        };
        per_iteration.push(IterationEstimate {
            iteration: it,
            partition,
            layout,
            estimates,
            diagnostics: diag,
        });
    }
    let estimates = combine_estimates(&per_iteration, scheme.combine, targets.len());
    Ok(CrossFitEstimate {
        estimates,
        per_iteration,
        scheme: scheme.clone(),
        estimand: String::from(fun.name()),
    })
}

/// Cross-fit estimation of a contrast theta_plus - theta_minus on
/// shared folds: both functionals are fitted on the same splits, the
/// pseudo-outcomes are differenced rowwise, and one second stage runs
/// on the difference. By linearity this equals the difference of the
/// two second stages. Eigenvalue diagnostics are not defined for a
/// contrast (the two functionals mask different subpopulations), so
/// per-iteration diagnostics are None.
pub fn run_contrast(
    data: &Dataset,
    fun_plus: &LinearFunctional,
    fun_minus: &LinearFunctional,
    q_spec: &BasisSpec,
    b_spec: &BasisSpec,
    scheme: &CrossFitScheme,
    targets: &[Vec<f64>],
) -> Result<CrossFitEstimate> {
    validate_run_inputs(data, q_spec, b_spec, targets)?;
    let q_basis: Arc<dyn SeriesBasis> = Arc::new(build_basis(q_spec)?);
    let b_basis: Arc<dyn SeriesBasis> = Arc::new(build_basis(b_spec)?);
    let layouts = scheme.layouts();
    let mut per_iteration = Vec::with_capacity(scheme.iterations);
    for it in 0..scheme.iterations {
        let partition = (it / layouts.len()) as u64;
        let layout = layouts[it % layouts.len()];
        let splits = iteration_splits(data, scheme, layout, partition)?;
        let model_plus = PseudoOutcomeModel::new(
            fit_gamma(&splits.d_gamma, fun_plus, &q_basis, splits.tag_gamma)?,
            fit_alpha(&splits.d_alpha, fun_plus, &q_basis, splits.tag_alpha)?,
            fun_plus.clone(),
        )?;
        let model_minus = PseudoOutcomeModel::new(
            fit_gamma(&splits.d_gamma, fun_minus, &q_basis, splits.tag_gamma)?,
            fit_alpha(&splits.d_alpha, fun_minus, &q_basis, splits.tag_alpha)?,
            fun_minus.clone(),
        )?;
        if !splits.insample {
            for (role, tag) in [
                ("gamma", splits.tag_gamma),
                ("alpha", splits.tag_alpha),
            ] {
                if tag.overlaps(&splits.tag_eval) {
                    return Err(Error::Validation(format!(
                        "cross-fit breach: {role} fold {tag:?} overlaps evaluation fold {:?}",
                        splits.tag_eval
                    )));
                }
            }
        }
        let (v_plus, f_plus) = model_plus.pseudo_outcomes(&splits.d_eval)?;
        let (v_minus, f_minus) = model_minus.pseudo_outcomes(&splits.d_eval)?;
        let values: Vec<f64> = v_plus.iter().zip(&v_minus).map(|(a, b)| a - b).collect();
        let flags: Vec<bool> = f_plus.iter().zip(&f_minus).map(|(a, b)| *a || *b).collect();
        let fit = fit_theta_from(&values, &flags, &b_basis, &splits.d_eval, splits.tag_eval)?;
        let estimates = fit.estimates(targets)?;
        per_iteration.push(IterationEstimate {
            iteration: it,
            partition,
            layout,
            estimates,
            diagnostics: None,
        });
    }
    let estimates = combine_estimates(&per_iteration, scheme.combine, targets.len());
    Ok(CrossFitEstimate {
        estimates,
        per_iteration,
        scheme: scheme.clone(),
        estimand: String::from("cate"),
    })
}

/// Dispatch on a named estimand selection.
pub fn run_selection(
    data: &Dataset,
    selection: &EstimandSelection,
    q_spec: &BasisSpec,
    b_spec: &BasisSpec,
    scheme: &CrossFitScheme,
    targets: &[Vec<f64>],
) -> Result<CrossFitEstimate> {
    match selection {
        EstimandSelection::Single(f) => run(data, f, q_spec, b_spec, scheme, targets),
        EstimandSelection::Contrast(p, m) => {
            run_contrast(data, p, m, q_spec, b_spec, scheme, targets)
        }
    }
}
