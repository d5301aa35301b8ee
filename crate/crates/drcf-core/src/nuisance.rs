//! Nuisance estimation: the regression gamma-hat by least squares of Y
//! on p = J * q, the representer alpha-tilde by the series moment
//! formula, population projections, and eigenvalue stability
//! diagnostics.
//!
//! alpha-tilde(x) = q(x)^T (sum_i p_i p_i^T)^{-1} (sum_i v_q(Z_i)):
//! both blocks are plain sample moments; for the cov estimand this
//! reduces to the ordinary series regression of -A on q.

use alloc::{format, sync::Arc, vec, vec::Vec};
use nalgebra::{DMatrix, DVector};

use crate::basis::{gram, GramMatrix, SeriesBasis, Whitener};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimands::{LinearFunctional, XFunction};
use crate::linalg::{self, SolveMeta};

/// Which split of the cross-fit partition a quantity was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    /// The full sample (no cross-fitting).
    Full,
    /// Fold `i` of the current partition.
    Fold(usize),
}

impl SplitTag {
    /// Two tags overlap unless both are folds with different indices.
    pub fn overlaps(&self, other: &SplitTag) -> bool {
        match (self, other) {
            (SplitTag::Fold(i), SplitTag::Fold(j)) => i == j,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitKind {
    Gamma,
    Alpha,
}

/// Fit metadata: what the solver policy did and which cells lack data.
#[derive(Debug, Clone, Default)]
pub struct FitMeta {
    /// Basis indices dropped by the solver (zero Gram diagonal).
    pub dropped: Vec<usize>,
    /// Cells with fewer J = 1 observations than local parameters, so
    /// the cell's fit is not identified from its own data; predictions
    /// there carry a quality flag. Sorted ascending.
    pub flagged_cells: Vec<usize>,
    /// Ridge added by the fallback, 0.0 when unused.
    pub ridge: f64,
    /// Active basis functions after drops.
    pub rank: usize,
    /// (lambda_min, lambda_max) of the fitted Gram.
    pub gram_eigs: (f64, f64),
}

/// A fitted nuisance: coefficient vector over a basis, plus the split
/// it was trained on so cross-fit orchestration can assert
/// independence requirements.
pub struct NuisanceFit {
    pub kind: FitKind,
    pub coefficients: DVector<f64>,
    pub basis: Arc<dyn SeriesBasis>,
    pub tag: SplitTag,
    pub meta: FitMeta,
}

impl core::fmt::Debug for NuisanceFit {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("NuisanceFit")
            .field("kind", &self.kind)
            .field("basis_size", &self.basis.len())
            .field("tag", &self.tag)
            .field("meta", &self.meta)
            .finish_non_exhaustive()
    }
}

/// A prediction with its data-support quality flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub value: f64,
    /// True when x falls in a cell whose J = 1 training data cannot
    /// identify the local fit.
    pub flagged: bool,
}

impl NuisanceFit {
    /// q(x)^T coefficients, flagged in cells with insufficient
    /// training support.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        let mut buf = vec![0.0; self.basis.max_block()];
        let range = self.basis.eval_block(x, &mut buf)?;
        let mut value = 0.0;
        for (off, i) in range.clone().enumerate() {
            value += buf[off] * self.coefficients[i];
        }
        let flagged = match self.basis.cell_hint(x)? {
            Some(cell) => self.meta.flagged_cells.binary_search(&cell).is_ok(),
            None => false,
        };
        Ok(Prediction { value, flagged })
    }
}

impl XFunction for NuisanceFit {
    fn eval(&self, x: &[f64]) -> f64 {
        match self.predict(x) {
            Ok(p) => p.value,
            Err(_) => f64::NAN,
        }
    }
}

struct MomentAccumulator {
    g: DMatrix<f64>,
    rhs: DVector<f64>,
    cell_counts: Vec<usize>,
    n_j: usize,
}

impl MomentAccumulator {
    fn new(k: usize, n_cells: usize) -> Self {
        MomentAccumulator {
            g: DMatrix::zeros(k, k),
            rhs: DVector::zeros(k),
            cell_counts: vec![0; n_cells],
            n_j: 0,
        }
    }

    /// Cells whose observation count is below the local block size:
    /// with fewer points than parameters the cell's least squares
    /// problem is singular and the solve policy's rescue, while
    /// finite, says nothing about the data there.
    fn flagged_cells(&self, block: usize) -> Vec<usize> {
        self.cell_counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c < block)
            .map(|(i, _)| i)
            .collect()
    }
}

fn solve_fit(
    mut acc: MomentAccumulator,
    n: usize,
    kind: FitKind,
    basis: &Arc<dyn SeriesBasis>,
    tag: SplitTag,
) -> Result<NuisanceFit> {
    acc.g /= n as f64;
    acc.rhs /= n as f64;
    let (coefficients, solve_meta) = linalg::solve_spd_policy(&acc.g, &acc.rhs)?;
    let gram_eigs = linalg::sym_eig_range(&acc.g);
    let SolveMeta { dropped, ridge, rank } = solve_meta;
    Ok(NuisanceFit {
        kind,
        coefficients,
        basis: basis.clone(),
        tag,
        meta: FitMeta {
            dropped,
            flagged_cells: acc.flagged_cells(basis.max_block()),
            ridge,
            rank,
            gram_eigs,
        },
    })
}

/// Least-squares fit of Y on p = J * q: coefficients solve
/// (sum p_i p_i^T) d = sum p_i Y_i. Rows with J = 0 carry no weight.
pub fn fit_gamma(
    split: &Dataset,
    fun: &LinearFunctional,
    basis: &Arc<dyn SeriesBasis>,
    tag: SplitTag,
) -> Result<NuisanceFit> {
    let n = split.n();
    if n == 0 {
        return Err(Error::Data("cannot fit gamma on an empty split".into()));
    }
    let mut acc = MomentAccumulator::new(basis.len(), basis.n_cells().unwrap_or(0));
    let mut buf = vec![0.0; basis.max_block()];
    for i in 0..n {
        let j = fun.j_indicator(split.a(i))?;
        if j == 0.0 {
            continue;
        }
        acc.n_j += 1;
        let x = split.x(i);
        let range = basis.eval_block(x, &mut buf)?;
        if let Some(cell) = basis.cell_hint(x)? {
            acc.cell_counts[cell] += 1;
        }
        let y = split.y(i);
        for (bi, gi) in range.clone().enumerate() {
            let v = buf[bi];
            acc.rhs[gi] += v * y;
            for (bj, gj) in range.clone().enumerate() {
                acc.g[(gi, gj)] += v * buf[bj];
            }
        }
    }
    if acc.n_j == 0 {
        return Err(Error::Data(format!(
            "no observations with J = 1 for estimand {} in this split",
            fun.name()
        )));
    }
    solve_fit(acc, n, FitKind::Gamma, basis, tag)
}

/// Moment-condition fit of the representer: coefficients
/// (sum p_i p_i^T)^{-1} (sum v_q(Z_i)). Note the v_q sum runs over all
/// rows, not only those with J = 1.
pub fn fit_alpha(
    split: &Dataset,
    fun: &LinearFunctional,
    basis: &Arc<dyn SeriesBasis>,
    tag: SplitTag,
) -> Result<NuisanceFit> {
    let n = split.n();
    if n == 0 {
        return Err(Error::Data("cannot fit alpha on an empty split".into()));
    }
    let mut acc = MomentAccumulator::new(basis.len(), basis.n_cells().unwrap_or(0));
    let mut buf = vec![0.0; basis.max_block()];
    for i in 0..n {
        let z = split.z(i);
        let j = fun.j_indicator(z.a)?;
        if j != 0.0 {
            acc.n_j += 1;
            let range = basis.eval_block(z.x, &mut buf)?;
            if let Some(cell) = basis.cell_hint(z.x)? {
                acc.cell_counts[cell] += 1;
            }
            for (bi, gi) in range.clone().enumerate() {
                let v = buf[bi];
                for (bj, gj) in range.clone().enumerate() {
                    acc.g[(gi, gj)] += v * buf[bj];
                }
            }
        }
        match fun.v_q_block(z, basis.as_ref(), &mut buf)? {
            Some(range) => {
                for (bi, gi) in range.clone().enumerate() {
                    acc.rhs[gi] += buf[bi];
                }
            }
            None => {
                let dense = fun.v_q_dense(z, basis.as_ref())?;
                acc.rhs += dense;
            }
        }
    }
    if acc.n_j == 0 {
        return Err(Error::Data(format!(
            "no observations with J = 1 for estimand {} in this split",
            fun.name()
        )));
    }
    solve_fit(acc, n, FitKind::Alpha, basis, tag)
}

/// Population second moments needed for projections: E[J q q^T] and
/// E[J q f(X)]. Implemented by finite populations (exact enumeration)
/// and by the simulation lab (quadrature over the known design).
pub trait PopulationMoments {
    fn gram_p(&self, fun: &LinearFunctional, basis: &dyn SeriesBasis) -> Result<DMatrix<f64>>;
    fn moment_p(
        &self,
        fun: &LinearFunctional,
        basis: &dyn SeriesBasis,
        f: &dyn XFunction,
    ) -> Result<DVector<f64>>;
}

impl PopulationMoments for crate::estimands::DiscretePopulation {
    fn gram_p(&self, fun: &LinearFunctional, basis: &dyn SeriesBasis) -> Result<DMatrix<f64>> {
        crate::estimands::DiscretePopulation::gram_p(self, fun, basis)
    }

    fn moment_p(
        &self,
        fun: &LinearFunctional,
        basis: &dyn SeriesBasis,
        f: &dyn XFunction,
    ) -> Result<DVector<f64>> {
        crate::estimands::DiscretePopulation::moment_p(self, fun, basis, f)
    }
}

/// Population projection coefficients E(p p^T)^{-1} E(p f): the
/// best-in-basis approximation of `fn_true` on the J = 1 subpopulation.
pub fn project_population(
    fn_true: &dyn XFunction,
    fun: &LinearFunctional,
    basis: &dyn SeriesBasis,
    population: &dyn PopulationMoments,
) -> Result<DVector<f64>> {
    let g = population.gram_p(fun, basis)?;
    let m = population.moment_p(fun, basis, fn_true)?;
    let (sol, _) = linalg::solve_spd_policy(&g, &m)?;
    Ok(sol)
}

/// Eigenvalue stability diagnostics in a whitened basis, with the
/// threshold indicators used by the stability analysis:
/// - `ind_hat`:  lambda_min of whitened Sigma-hat  >= 1/2
/// - `ind_tilde`: lambda_min of whitened Sigma-tilde >= 1/2
/// - `ind_bar`:  weighted Gram p.d. AND lambda_max of whitened
///   Sigma-bar <= 3/2 AND lambda_min of whitened B-bar >= 1/2
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct StabilityDiagnostics {
    pub lambda_min_hat: f64,
    pub lambda_min_tilde: f64,
    pub lambda_max_bar: f64,
    pub bbar_lambda_min: f64,
    pub weighted_gram_pd: bool,
    pub ind_hat: bool,
    pub ind_tilde: bool,
    pub ind_bar: bool,
}

/// Gram inputs for `diagnostics`, all in the original (unwhitened)
/// basis: the two nuisance-split p-moments, the evaluation-split
/// p-moment, the w-weighted evaluation p-moment, and the second-stage
/// b-moment.
pub struct DiagnosticsInput<'a> {
    pub sigma_hat: &'a GramMatrix,
    pub sigma_tilde: &'a GramMatrix,
    pub sigma_bar: &'a GramMatrix,
    pub sigma_bar_weighted: &'a GramMatrix,
    pub b_bar: &'a GramMatrix,
}

pub fn diagnostics(
    input: &DiagnosticsInput<'_>,
    q_whitener: &Whitener,
    b_whitener: &Whitener,
) -> StabilityDiagnostics {
    let (lambda_min_hat, _) = linalg::sym_eig_range(&q_whitener.apply_gram(input.sigma_hat));
    let (lambda_min_tilde, _) = linalg::sym_eig_range(&q_whitener.apply_gram(input.sigma_tilde));
    let (_, lambda_max_bar) = linalg::sym_eig_range(&q_whitener.apply_gram(input.sigma_bar));
    let (weighted_min, _) = linalg::sym_eig_range(&q_whitener.apply_gram(input.sigma_bar_weighted));
    let (bbar_lambda_min, _) = linalg::sym_eig_range(&b_whitener.apply_gram(input.b_bar));
    let weighted_gram_pd = weighted_min > 0.0;
    StabilityDiagnostics {
        lambda_min_hat,
        lambda_min_tilde,
        lambda_max_bar,
        bbar_lambda_min,
        weighted_gram_pd,
        ind_hat: lambda_min_hat >= 0.5,
        ind_tilde: lambda_min_tilde >= 0.5,
        ind_bar: weighted_gram_pd && lambda_max_bar <= 1.5 && bbar_lambda_min >= 0.5,
    }
}

/// J-weighted sample Gram of a split: (1/n) sum_i J_i q(X_i) q(X_i)^T.
pub fn gram_p_split(
    split: &Dataset,
    fun: &LinearFunctional,
    basis: &dyn SeriesBasis,
) -> Result<GramMatrix> {
    let mut jw = Vec::with_capacity(split.n());
    for i in 0..split.n() {
        jw.push(fun.j_indicator(split.a(i))?);
    }
    gram(basis, split.xs_flat(), Some(&jw), true)
}
