//! Second stage: the pseudo-outcome construction and the series
//! regression of pseudo-outcomes on the coarse basis b over the
//! conditioning coordinates C.
//!
//! theta-hat(c) = b(c)^T Bbar^{-1} (1/n) sum_i b(C_i) fhat_i with
//! Bbar = (1/n) sum_i b(C_i) b(C_i)^T. Equivalently a weighted sum
//! sum_i w_i(c) fhat_i with w_i(c) = b(c)^T Bbar^{-1} b(C_i) / n; both
//! paths are exposed and must agree up to roundoff.

use alloc::{format, sync::Arc, vec, vec::Vec};
use nalgebra::DVector;

use crate::basis::{gram, GramMatrix, SeriesBasis};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimands::{LinearFunctional, XFunction, ZView};
use crate::linalg::SpdSolver;
use crate::nuisance::{FitKind, NuisanceFit, Prediction, SplitTag};

/// A gamma fit and an alpha fit paired with their estimand, ready to
/// produce pseudo-outcomes on a third split.
pub struct PseudoOutcomeModel {
    pub gamma: NuisanceFit,
    pub alpha: NuisanceFit,
    pub fun: LinearFunctional,
}

impl PseudoOutcomeModel {
    pub fn new(gamma: NuisanceFit, alpha: NuisanceFit, fun: LinearFunctional) -> Result<Self> {
        if gamma.kind != FitKind::Gamma {
            return Err(Error::Validation(
                "pseudo-outcome model needs a Gamma fit in the gamma slot".into(),
            ));
        }
        if alpha.kind != FitKind::Alpha {
            return Err(Error::Validation(
                "pseudo-outcome model needs an Alpha fit in the alpha slot".into(),
            ));
        }
        if gamma.basis.dim() != alpha.basis.dim() || gamma.basis.len() != alpha.basis.len() {
            return Err(Error::Validation(format!(
                "gamma and alpha fits use incompatible bases: dim {} size {} vs dim {} size {}",
                gamma.basis.dim(),
                gamma.basis.len(),
                alpha.basis.dim(),
                alpha.basis.len()
            )));
        }
        Ok(PseudoOutcomeModel { gamma, alpha, fun })
    }

    /// fhat(z) = m(z, gamma-hat) + alpha-tilde(x) J(a) (y - gamma-hat(x)).
    ///
    /// The flag is set when x falls in a cell unsupported by either
    /// nuisance fit's training data.
    pub fn pseudo_outcome(&self, z: ZView<'_>) -> Result<Prediction> {
        let gp = self.gamma.predict(z.x)?;
        let ap = self.alpha.predict(z.x)?;
        let j = self.fun.j_indicator(z.a)?;
        let m = match self.fun.m_with_gamma_value(z, gp.value) {
            Some(v) => v,
            None => self.fun.m_eval(z, &self.gamma),
        };
        Ok(Prediction {
            value: m + ap.value * j * (z.y - gp.value),
            flagged: gp.flagged || ap.flagged,
        })
    }

    /// Pseudo-outcomes for every row of `data`, values and flags.
    pub fn pseudo_outcomes(&self, data: &Dataset) -> Result<(Vec<f64>, Vec<bool>)> {
        let mut values = Vec::with_capacity(data.n());
        let mut flags = Vec::with_capacity(data.n());
        for i in 0..data.n() {
            let p = self.pseudo_outcome(data.z(i))?;
            values.push(p.value);
            flags.push(p.flagged);
        }
        Ok((values, flags))
    }
}

/// Pseudo-outcome evaluated at the true nuisances,
/// f0(z) = m(z, gamma0) + alpha0(x) J(a) (y - gamma0(x)).
pub fn pseudo_outcome_oracle(
    fun: &LinearFunctional,
    gamma0: &dyn XFunction,
    alpha0: &dyn XFunction,
    z: ZView<'_>,
) -> Result<f64> {
    let j = fun.j_indicator(z.a)?;
    let g = gamma0.eval(z.x);
    let m = match fun.m_with_gamma_value(z, g) {
        Some(v) => v,
        None => fun.m_eval(z, gamma0),
    };
    Ok(m + alpha0.eval(z.x) * j * (z.y - g))
}

/// A point estimate at one target, with support and quality flags.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaEstimate {
    pub target_id: usize,
    /// NaN when `no_support` is set.
    pub value: f64,
    /// The target's cell contains no evaluation rows, so the local
    /// average does not exist.
    pub no_support: bool,
    /// Some row with nonzero weight carried a flagged pseudo-outcome.
    pub flagged: bool,
}

/// Fitted second stage: coefficients of the pseudo-outcome regression
/// on b, plus enough state to produce weights and per-target estimates.
pub struct SecondStageFit {
    b_basis: Arc<dyn SeriesBasis>,
    pub coefficients: DVector<f64>,
    pub bbar: GramMatrix,
    pub tag: SplitTag,
    solver: SpdSolver,
    c_rows: Vec<f64>,
    values: Vec<f64>,
    flags: Vec<bool>,
    /// Evaluation rows per cell, when the basis exposes cells.
    cell_counts: Option<Vec<usize>>,
}

impl core::fmt::Debug for SecondStageFit {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("SecondStageFit")
            .field("basis_size", &self.b_basis.len())
            .field("tag", &self.tag)
            .field("n", &self.values.len())
            .finish_non_exhaustive()
    }
}

impl SecondStageFit {
    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn b_basis(&self) -> &Arc<dyn SeriesBasis> {
        &self.b_basis
    }

    pub fn pseudo_values(&self) -> &[f64] {
        &self.values
    }

    /// Linear weights w_i = b(target)^T Bbar^{-1} b(C_i) / n. Exactly
    /// zero for rows outside the target's cell when b has disjoint
    /// cell supports, because Bbar is then block diagonal.
    pub fn weights(&self, target: &[f64]) -> Result<Vec<f64>> {
        let k = self.b_basis.len();
        let mut bt = DVector::zeros(k);
        let mut buf = vec![0.0; self.b_basis.max_block()];
        let range = self.b_basis.eval_block(target, &mut buf)?;
        for (off, i) in range.enumerate() {
            bt[i] = buf[off];
        }
        let u = self.solver.solve(&bt);
        let n = self.n();
        let dim = self.b_basis.dim();
        let mut w = vec![0.0; n];
        for i in 0..n {
            let row = &self.c_rows[i * dim..(i + 1) * dim];
            let range = self.b_basis.eval_block(row, &mut buf)?;
            let mut dot = 0.0;
            for (off, gi) in range.enumerate() {
                dot += buf[off] * u[gi];
            }
            w[i] = dot / n as f64;
        }
        Ok(w)
    }

    /// Point estimate through the coefficient path b(target)^T d-hat.
    pub fn theta_at(&self, target_id: usize, target: &[f64]) -> Result<ThetaEstimate> {
        let mut buf = vec![0.0; self.b_basis.max_block()];
        let range = self.b_basis.eval_block(target, &mut buf)?;
        let mut value = 0.0;
        for (off, i) in range.enumerate() {
            value += buf[off] * self.coefficients[i];
        }
        let no_support = match (self.b_basis.cell_hint(target)?, &self.cell_counts) {
            (Some(cell), Some(counts)) => counts[cell] == 0,
            _ => false,
        };
        let flagged = if self.flags.iter().any(|&f| f) {
            let w = self.weights(target)?;
            w.iter().zip(&self.flags).any(|(&wi, &fi)| wi != 0.0 && fi)
        } else {
            false
        };
        Ok(ThetaEstimate {
            target_id,
            value: if no_support { f64::NAN } else { value },
            no_support,
            flagged,
        })
    }

    /// Point estimate through the weighted-sum path, sum_i w_i fhat_i.
    /// Agrees with `theta_at` up to roundoff.
    pub fn theta_weighted(&self, target: &[f64]) -> Result<f64> {
        let w = self.weights(target)?;
        Ok(w.iter().zip(&self.values).map(|(wi, fi)| wi * fi).sum())
    }

    pub fn estimates(&self, targets: &[Vec<f64>]) -> Result<Vec<ThetaEstimate>> {
        targets
            .iter()
            .enumerate()
            .map(|(id, t)| self.theta_at(id, t))
            .collect()
    }
}

/// Regress precomputed pseudo-outcome values on b over the evaluation
/// split's conditioning coordinates.
pub fn fit_theta_from(
    values: &[f64],
    flags: &[bool],
    b_basis: &Arc<dyn SeriesBasis>,
    eval: &Dataset,
    tag: SplitTag,
) -> Result<SecondStageFit> {
    let n = eval.n();
    if values.len() != n || flags.len() != n {
        return Err(Error::Validation(format!(
            "pseudo-outcome vectors of length {} / {} do not match evaluation split of {} rows",
            values.len(),
            flags.len(),
            n
        )));
    }
    if b_basis.dim() != eval.c_dim() {
        return Err(Error::Validation(format!(
            "second-stage basis has dim {} but the conditioning vector has dim {}",
            b_basis.dim(),
            eval.c_dim()
        )));
    }
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!(
                "pseudo-outcome {v} at row {i} is not finite"
            )));
        }
    }
    let c_rows = eval.c_rows();
    let bbar = gram(b_basis.as_ref(), &c_rows, None, false)?;
    let k = b_basis.len();
    let mut rhs = DVector::zeros(k);
    let mut buf = vec![0.0; b_basis.max_block()];
    let dim = b_basis.dim();
    let mut cell_counts = b_basis.n_cells().map(|c| vec![0usize; c]);
    for i in 0..n {
        let row = &c_rows[i * dim..(i + 1) * dim];
        let range = b_basis.eval_block(row, &mut buf)?;
        for (off, gi) in range.enumerate() {
            rhs[gi] += buf[off] * values[i];
        }
        if let (Some(counts), Some(cell)) = (cell_counts.as_mut(), b_basis.cell_hint(row)?) {
            counts[cell] += 1;
        }
    }
    rhs /= n as f64;
    let solver = SpdSolver::new(&bbar.matrix)?;
    let coefficients = solver.solve(&rhs);
    Ok(SecondStageFit {
        b_basis: b_basis.clone(),
        coefficients,
        bbar,
        tag,
        solver,
        c_rows,
        values: values.to_vec(),
        flags: flags.to_vec(),
        cell_counts,
    })
}

/// Full second stage from a pseudo-outcome model: checks the cross-fit
/// contract (nuisances trained off the evaluation split), computes
/// pseudo-outcomes, regresses them on b.
pub fn fit_theta(
    model: &PseudoOutcomeModel,
    b_basis: &Arc<dyn SeriesBasis>,
    eval: &Dataset,
    eval_tag: SplitTag,
    allow_insample: bool,
) -> Result<SecondStageFit> {
    if !allow_insample {
        for (role, fit) in [("gamma", &model.gamma), ("alpha", &model.alpha)] {
            if fit.tag.overlaps(&eval_tag) {
                return Err(Error::Validation(format!(
                    "cross-fit breach: {role} was trained on {:?}, which overlaps evaluation split {:?}",
                    fit.tag, eval_tag
                )));
            }
        }
    }
    let (values, flags) = model.pseudo_outcomes(eval)?;
    fit_theta_from(&values, &flags, b_basis, eval, eval_tag)
}

/// Second stage on oracle pseudo-outcomes f0, the infeasible benchmark
/// with the true nuisances plugged in.
pub fn oracle_theta(
    fun: &LinearFunctional,
    gamma0: &dyn XFunction,
    alpha0: &dyn XFunction,
    b_basis: &Arc<dyn SeriesBasis>,
    eval: &Dataset,
    tag: SplitTag,
) -> Result<SecondStageFit> {
    let mut values = Vec::with_capacity(eval.n());
    for i in 0..eval.n() {
        values.push(pseudo_outcome_oracle(fun, gamma0, alpha0, eval.z(i))?);
    }
    let flags = vec![false; eval.n()];
    fit_theta_from(&values, &flags, b_basis, eval, tag)
}

/// Standalone weight computation against a fresh Bbar built from
/// `c_rows` (row-major, matching the basis dimension).
pub fn weights(b_basis: &dyn SeriesBasis, c_rows: &[f64], target: &[f64]) -> Result<Vec<f64>> {
    let bbar = gram(b_basis, c_rows, None, false)?;
    let solver = SpdSolver::new(&bbar.matrix)?;
    let k = b_basis.len();
    let mut bt = DVector::zeros(k);
    let mut buf = vec![0.0; b_basis.max_block()];
    let range = b_basis.eval_block(target, &mut buf)?;
    for (off, i) in range.enumerate() {
        bt[i] = buf[off];
    }
    let u = solver.solve(&bt);
    let dim = b_basis.dim();
    let n = c_rows.len() / dim;
    let mut w = vec![0.0; n];
    for i in 0..n {
        let row = &c_rows[i * dim..(i + 1) * dim];
        let range = b_basis.eval_block(row, &mut buf)?;
        let mut dot = 0.0;
        for (off, gi) in range.enumerate() {
            dot += buf[off] * u[gi];
        }
        w[i] = dot / n as f64;
    }
    Ok(w)
}
