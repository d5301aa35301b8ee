//! Simulation lab: data-generating processes with controlled
//! smoothness, ground-truth functional values by exact quadrature, and
//! Monte Carlo experiment drivers for bias decomposition, convergence
//! rates, and the mean-zero / eigenvalue diagnostics.
//!
//! Sampling is counter-based: replication r draws from stream r of the
//! experiment seed, so results are independent of execution order and
//! safe to parallelize.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::{format, string::String, sync::Arc, vec, vec::Vec};
use core::f64::consts::PI;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::basis::{build_basis, gram, unit_segment, BasisSpec, SeriesBasis, Whitener};
use crate::crossfit::{run_selection, CrossFitScheme, SchemeKind};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::estimands::{EstimandSelection, LinearFunctional, XFunction};
use crate::exec::Executor;
use crate::linalg;
use crate::mathx;
use crate::nuisance::{project_population, PopulationMoments, SplitTag};
use crate::quad::{composite_unit_rule, integrate_free_axes_adaptive};
use crate::second_stage::{fit_theta_from, pseudo_outcome_oracle, weights};

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// Symbolic function on the unit cube with known range, known panel
/// structure, and smoothness set by construction: cosine series with
/// chosen coefficient decay, piecewise constants, and kinks.
#[derive(Debug, Clone)]
pub enum FnSpec {
    Constant(f64),
    /// offset + sum over axes of coefs[axis][j] * cos(pi (j+1) x_axis).
    /// Coefficient decay across j controls the Holder order.
    CosineSeries { offset: f64, coefs: Vec<Vec<f64>> },
    /// One value per cell of the uniform segments^d grid over all
    /// coordinates, axis 0 fastest.
    PiecewiseConstant { segments: usize, values: Vec<f64> },
    /// offset + amp * |x_axis - center|: Lipschitz, smoothness exactly
    /// one at the kink.
    Kink {
        axis: usize,
        center: f64,
        amp: f64,
        offset: f64,
    },
    Sum(Vec<FnSpec>),
}

impl FnSpec {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            FnSpec::Constant(c) => *c,
            FnSpec::CosineSeries { offset, coefs } => {
                let mut v = *offset;
                for (axis, row) in coefs.iter().enumerate() {
                    for (j, c) in row.iter().enumerate() {
                        if *c != 0.0 {
                            v += c * mathx::cos(PI * (j + 1) as f64 * x[axis]);
                        }
                    }
                }
                v
            }
            FnSpec::PiecewiseConstant { segments, values } => {
                let mut id = 0;
                let mut stride = 1;
                for &u in x {
                    id += unit_segment(u, *segments) * stride;
                    stride *= *segments;
                }
                values[id]
            }
            FnSpec::Kink {
                axis,
                center,
                amp,
                offset,
            } => offset + amp * mathx::abs(x[*axis] - center),
            FnSpec::Sum(parts) => parts.iter().map(|p| p.eval(x)).sum(),
        }
    }

    /// Conservative range on the unit cube (exact except for cosine
    /// series, where it is the triangle-inequality envelope).
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            FnSpec::Constant(c) => (*c, *c),
            FnSpec::CosineSeries { offset, coefs } => {
                let total: f64 = coefs
                    .iter()
                    .flat_map(|row| row.iter())
                    .map(|c| mathx::abs(*c))
                    .sum();
                (offset - total, offset + total)
            }
            FnSpec::PiecewiseConstant { values, .. } => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for &v in values {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (lo, hi)
            }
            FnSpec::Kink {
                center,
                amp,
                offset,
                ..
            } => {
                let reach = amp * center.max(1.0 - center);
                (offset + reach.min(0.0), offset + reach.max(0.0))
            }
            FnSpec::Sum(parts) => parts.iter().fold((0.0, 0.0), |(lo, hi), p| {
                let (plo, phi) = p.bounds();
                (lo + plo, hi + phi)
            }),
        }
    }

    /// Panels per axis that align quadrature with any discontinuity or
    /// kink of this function (one half-oscillation per panel for
    /// cosines). Capped at 96; the adaptive integrator refines further
    /// when needed.
    pub fn natural_segments(&self) -> usize {
        match self {
            FnSpec::Constant(_) => 1,
            FnSpec::CosineSeries { coefs, .. } => coefs
                .iter()
                .map(|row| row.len())
                .max()
                .unwrap_or(1)
                .max(1),
            FnSpec::PiecewiseConstant { segments, .. } => *segments,
            FnSpec::Kink { center, .. } => {
                for s in 1..=64usize {
                    let scaled = center * s as f64;
                    if mathx::abs(scaled - mathx::round(scaled)) < 1e-9 {
                        return s;
                    }
                }
                64
            }
            FnSpec::Sum(parts) => parts
                .iter()
                .fold(1, |acc, p| lcm_capped(acc, p.natural_segments(), 96)),
        }
    }

    pub fn validate_for_dim(&self, d: usize) -> Result<()> {
        match self {
            FnSpec::Constant(c) => {
                if !c.is_finite() {
                    return Err(Error::Validation("constant function value must be finite".into()));
                }
            }
            FnSpec::CosineSeries { offset, coefs } => {
                if !offset.is_finite() || coefs.iter().flatten().any(|c| !c.is_finite()) {
                    return Err(Error::Validation("cosine coefficients must be finite".into()));
                }
                if coefs.len() > d {
                    return Err(Error::Validation(format!(
                        "cosine series has {} axis rows but the domain has {} axes",
                        coefs.len(),
                        d
                    )));
                }
            }
            FnSpec::PiecewiseConstant { segments, values } => {
                if *segments == 0 {
                    return Err(Error::Validation(
                        "piecewise-constant function needs at least one segment".into(),
                    ));
                }
                let cells = (*segments as u128).pow(d as u32);
                if cells != values.len() as u128 {
                    return Err(Error::Validation(format!(
                        "piecewise-constant function needs {cells} values for {segments} segments in dim {d}, got {}",
                        values.len()
                    )));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation("piecewise values must be finite".into()));
                }
            }
            FnSpec::Kink {
                axis,
                center,
                amp,
                offset,
            } => {
                if *axis >= d {
                    return Err(Error::Validation(format!(
                        "kink axis {axis} out of range for dim {d}"
                    )));
                }
                if !(0.0..=1.0).contains(center) || !amp.is_finite() || !offset.is_finite() {
                    return Err(Error::Validation(
                        "kink needs center in [0, 1] and finite amp/offset".into(),
                    ));
                }
            }
            FnSpec::Sum(parts) => {
                if parts.is_empty() {
                    return Err(Error::Validation("sum function needs at least one part".into()));
                }
                for p in parts {
                    p.validate_for_dim(d)?;
                }
            }
        }
        Ok(())
    }
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a.max(1)
}

fn lcm_capped(a: usize, b: usize, cap: usize) -> usize {
    let a = a.max(1);
    let b = b.max(1);
    (a / gcd(a, b)).saturating_mul(b).clamp(1, cap)
}

/// Mixes a salt into a seed (splitmix64 finalizer), for deriving
/// independent seed families from one experiment seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for one replication: stream `rep` of the experiment seed, so
/// replications can run in any order or in parallel.
pub fn rng_for_rep(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TreatmentModel {
    /// A | X ~ Bernoulli(pi0(X)).
    Bernoulli,
    /// A = pi0(X) + U, U ~ Uniform[-h, h]: continuous treatment with
    /// E[A|X] = pi0(X) and constant conditional variance h^2/3. Only
    /// the cov estimand accepts it (trt/ctrl need binary A).
    UniformResidual { half_width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseModel {
    Gaussian,
    /// Uniform on [-sqrt(3) sd, sqrt(3) sd]: same variance as the
    /// Gaussian option but with bounded support, for settings that
    /// require bounded outcomes.
    Bounded,
}

/// A data-generating process on the unit cube: X uniform, A from the
/// treatment model, Y = mu0(X) + A tau(X) + noise.
#[derive(Debug, Clone)]
pub struct DgpSpec {
    pub d_x: usize,
    /// Coordinates of X that form the conditioning vector C.
    pub c_indices: Vec<usize>,
    /// E[A | X]; for the Bernoulli model this is the propensity.
    pub pi0: FnSpec,
    /// Positivity margin: pi0 must stay inside [eps, 1 - eps].
    pub eps: f64,
    /// Baseline regression mu(0, x).
    pub mu0: FnSpec,
    /// Treatment effect tau(x) = mu(1, x) - mu(0, x).
    pub tau: FnSpec,
    pub noise_sd: f64,
    pub noise: NoiseModel,
    pub treatment: TreatmentModel,
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 {
            return Err(Error::Validation("DGP needs at least one covariate".into()));
        }
        if self.c_indices.is_empty() {
            return Err(Error::Validation("DGP needs a nonempty conditioning set".into()));
        }
        for &c in &self.c_indices {
            if c >= self.d_x {
                return Err(Error::Validation(format!(
                    "conditioning index {c} out of range for {} covariates",
                    self.d_x
                )));
            }
        }
        let mut sorted = self.c_indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.c_indices.len() {
            return Err(Error::Validation("conditioning indices must be distinct".into()));
        }
        self.pi0.validate_for_dim(self.d_x)?;
        self.mu0.validate_for_dim(self.d_x)?;
        self.tau.validate_for_dim(self.d_x)?;
        if !(0.05..0.5).contains(&self.eps) {
            return Err(Error::Validation(format!(
                "positivity margin eps = {} must lie in [0.05, 0.5)",
                self.eps
            )));
        }
        let (lo, hi) = self.pi0.bounds();
        if lo < self.eps - 1e-9 || hi > 1.0 - self.eps + 1e-9 {
            return Err(Error::Validation(format!(
                "pi0 range [{lo}, {hi}] violates positivity margin eps = {}",
                self.eps
            )));
        }
        if !self.noise_sd.is_finite() || self.noise_sd < 0.0 {
            return Err(Error::Validation("noise sd must be finite and nonnegative".into()));
        }
        if let TreatmentModel::UniformResidual { half_width } = self.treatment {
            if !half_width.is_finite() || half_width <= 0.0 {
                return Err(Error::Validation(
                    "uniform-residual treatment needs a positive half width".into(),
                ));
            }
        }
        Ok(())
    }

    /// mu(a, x) = mu0(x) + a tau(x).
    pub fn mu(&self, a: f64, x: &[f64]) -> f64 {
        self.mu0.eval(x) + a * self.tau.eval(x)
    }

    /// Var(A | X = x) under the treatment model.
    pub fn var_a_given_x(&self, x: &[f64]) -> f64 {
        match self.treatment {
            TreatmentModel::Bernoulli => {
                let p = self.pi0.eval(x);
                p * (1.0 - p)
            }
            TreatmentModel::UniformResidual { half_width } => half_width * half_width / 3.0,
        }
    }

    /// Draws n observations. Per row the draw order is fixed (X
    /// coordinates, treatment, noise), making samples a pure function
    /// of the RNG state.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::Validation("cannot sample zero observations".into()));
        }
        let d = self.d_x;
        let normal = Normal::new(0.0, self.noise_sd)
            .map_err(|e| Error::Validation(format!("invalid noise sd: {e}")))?;
        let mut xs = Vec::with_capacity(n * d);
        let mut a = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        let mut xbuf = vec![0.0; d];
        for _ in 0..n {
            for slot in xbuf.iter_mut() {
                *slot = rng.random::<f64>();
            }
            let p = self.pi0.eval(&xbuf);
            let ai = match self.treatment {
                TreatmentModel::Bernoulli => {
                    if rng.random::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                }
                TreatmentModel::UniformResidual { half_width } => {
                    p + (2.0 * rng.random::<f64>() - 1.0) * half_width
                }
            };
            let noise = match self.noise {
                NoiseModel::Gaussian => normal.sample(rng),
                NoiseModel::Bounded => (2.0 * rng.random::<f64>() - 1.0) * SQRT3 * self.noise_sd,
            };
            xs.extend_from_slice(&xbuf);
            a.push(ai);
            y.push(self.mu(ai, &xbuf) + noise);
        }
        Dataset::new(d, xs, a, y, self.c_indices.clone())
    }

    fn require_bernoulli(&self, fun: &LinearFunctional) -> Result<()> {
        if self.treatment == TreatmentModel::Bernoulli {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "estimand {} needs binary treatment, but the DGP treatment model is continuous",
                fun.name()
            )))
        }
    }

    /// True regression nuisance for a built-in estimand: E[Y | X, J=1].
    pub fn gamma0(&self, fun: &LinearFunctional) -> Result<Box<dyn XFunction>> {
        let mu0 = self.mu0.clone();
        let tau = self.tau.clone();
        let pi0 = self.pi0.clone();
        match fun.name() {
            "cov" => Ok(Box::new(move |x: &[f64]| {
                mu0.eval(x) + pi0.eval(x) * tau.eval(x)
            })),
            "trt" => {
                self.require_bernoulli(fun)?;
                Ok(Box::new(move |x: &[f64]| mu0.eval(x) + tau.eval(x)))
            }
            "ctrl" => {
                self.require_bernoulli(fun)?;
                Ok(Box::new(move |x: &[f64]| mu0.eval(x)))
            }
            other => Err(Error::Validation(format!(
                "no closed-form gamma0 for custom estimand {other:?}"
            ))),
        }
    }

    /// True representer for a built-in estimand.
    pub fn alpha0(&self, fun: &LinearFunctional) -> Result<Box<dyn XFunction>> {
        let pi0 = self.pi0.clone();
        match fun.name() {
            "cov" => Ok(Box::new(move |x: &[f64]| -pi0.eval(x))),
            "trt" => {
                self.require_bernoulli(fun)?;
                Ok(Box::new(move |x: &[f64]| 1.0 / pi0.eval(x)))
            }
            "ctrl" => {
                self.require_bernoulli(fun)?;
                Ok(Box::new(move |x: &[f64]| 1.0 / (1.0 - pi0.eval(x))))
            }
            other => Err(Error::Validation(format!(
                "no closed-form alpha0 for custom estimand {other:?}"
            ))),
        }
    }

    /// g with theta(c) = E[g(X) | C = c] for a built-in estimand.
    fn theta_integrand(&self, fun: &LinearFunctional) -> Result<Box<dyn XFunction>> {
        let mu0 = self.mu0.clone();
        let tau = self.tau.clone();
        match fun.name() {
            "cov" => {
                let dgp = self.clone();
                Ok(Box::new(move |x: &[f64]| dgp.var_a_given_x(x) * tau.eval(x)))
            }
            "trt" => {
                self.require_bernoulli(fun)?;
                Ok(Box::new(move |x: &[f64]| mu0.eval(x) + tau.eval(x)))
            }
            "ctrl" => {
                self.require_bernoulli(fun)?;
                Ok(Box::new(move |x: &[f64]| mu0.eval(x)))
            }
            other => Err(Error::Validation(format!(
                "no closed-form truth for custom estimand {other:?}; use a discrete population"
            ))),
        }
    }

    /// Panels per axis aligning quadrature with all DGP components.
    pub fn natural_segments(&self) -> usize {
        let s = lcm_capped(
            self.pi0.natural_segments(),
            self.mu0.natural_segments(),
            96,
        );
        lcm_capped(s, self.tau.natural_segments(), 96)
    }
}

/// Conditioning location for a ground-truth value.
#[derive(Debug, Clone, Copy)]
pub enum TruthTarget<'a> {
    Point(&'a [f64]),
    /// Unconditional: integrate over all of X.
    Marginal,
}

/// Ground-truth theta for a built-in estimand: theta(c) = E[g(X)|C=c]
/// with X uniform, computed by panel-aligned adaptive quadrature over
/// the free axes (exact for piecewise-constant and polynomial DGPs,
/// reported error below 1e-6 otherwise).
pub fn true_theta(dgp: &DgpSpec, fun: &LinearFunctional, target: TruthTarget<'_>) -> Result<f64> {
    let g = dgp.theta_integrand(fun)?;
    let fixed: Vec<(usize, f64)> = match target {
        TruthTarget::Point(c) => {
            if c.len() != dgp.c_indices.len() {
                return Err(Error::Validation(format!(
                    "target has dim {} but the conditioning vector has dim {}",
                    c.len(),
                    dgp.c_indices.len()
                )));
            }
            dgp.c_indices.iter().copied().zip(c.iter().copied()).collect()
        }
        TruthTarget::Marginal => Vec::new(),
    };
    let segments = dgp.natural_segments();
    let (value, err) =
        integrate_free_axes_adaptive(dgp.d_x, &fixed, segments, 8, 1e-9, &mut |x| g.eval(x))?;
    if err > 1e-6 {
        return Err(Error::Numeric(format!(
            "quadrature error bound {err:.3e} exceeds 1e-6 for the ground-truth value"
        )));
    }
    Ok(value)
}

/// Ground truth for a selection; a contrast is the difference of its
/// two single-functional truths.
pub fn true_theta_selection(
    dgp: &DgpSpec,
    selection: &EstimandSelection,
    target: TruthTarget<'_>,
) -> Result<f64> {
    match selection {
        EstimandSelection::Single(f) => true_theta(dgp, f, target),
        EstimandSelection::Contrast(p, m) => {
            Ok(true_theta(dgp, p, target)? - true_theta(dgp, m, target)?)
        }
    }
}

/// Population moments of the DGP design by composite Gauss-Legendre
/// quadrature, with panels aligned to both the DGP components and the
/// basis cells. X is uniform, so E[J q q^T] integrates E[J|X] against
/// the basis outer product.
pub struct QuadPop<'a> {
    dgp: &'a DgpSpec,
    segments: usize,
    order: usize,
}

impl<'a> QuadPop<'a> {
    pub fn for_basis(dgp: &'a DgpSpec, spec: &BasisSpec) -> Self {
        let segments = lcm_capped(dgp.natural_segments(), spec.segments_per_dim, 96);
        QuadPop {
            dgp,
            segments,
            order: 10,
        }
    }

    fn j_mean(&self, fun: &LinearFunctional, x: &[f64]) -> Result<f64> {
        match fun.name() {
            "cov" => Ok(1.0),
            "trt" => {
                self.dgp.require_bernoulli(fun)?;
                Ok(self.dgp.pi0.eval(x))
            }
            "ctrl" => {
                self.dgp.require_bernoulli(fun)?;
                Ok(1.0 - self.dgp.pi0.eval(x))
            }
            other => Err(Error::Validation(format!(
                "population moments for custom estimand {other:?} need a discrete population"
            ))),
        }
    }
}

fn tensor_iterate(dim: usize, segments: usize, order: usize, f: &mut dyn FnMut(&[f64], f64)) {
    let (pts, wts) = composite_unit_rule(segments, order);
    let m = pts.len();
    let mut idx = vec![0usize; dim];
    let mut x = vec![0.0; dim];
    loop {
        let mut w = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            x[k] = pts[i];
            w *= wts[i];
        }
        f(&x, w);
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < m {
                break;
            }
            idx[k] = 0;
            k += 1;
            if k == dim {
                return;
            }
        }
    }
}

impl PopulationMoments for QuadPop<'_> {
    fn gram_p(&self, fun: &LinearFunctional, basis: &dyn SeriesBasis) -> Result<DMatrix<f64>> {
        let k = basis.len();
        let mut g = DMatrix::zeros(k, k);
        let mut buf = vec![0.0; basis.max_block()];
        let mut failure = None;
        tensor_iterate(self.dgp.d_x, self.segments, self.order, &mut |x, w| {
            if failure.is_some() {
                return;
            }
            let jm = match self.j_mean(fun, x) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            };
            let range = match basis.eval_block(x, &mut buf) {
                Ok(r) => r,
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            };
            let len = range.len();
            for bi in 0..len {
                let vi = w * jm * buf[bi];
                for bj in 0..len {
                    g[(range.start + bi, range.start + bj)] += vi * buf[bj];
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(g),
        }
    }

    fn moment_p(
        &self,
        fun: &LinearFunctional,
        basis: &dyn SeriesBasis,
        f: &dyn XFunction,
    ) -> Result<DVector<f64>> {
        let k = basis.len();
        let mut m = DVector::zeros(k);
        let mut buf = vec![0.0; basis.max_block()];
        let mut failure = None;
        tensor_iterate(self.dgp.d_x, self.segments, self.order, &mut |x, w| {
            if failure.is_some() {
                return;
            }
            let jm = match self.j_mean(fun, x) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            };
            let range = match basis.eval_block(x, &mut buf) {
                Ok(r) => r,
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            };
            let fv = f.eval(x);
            for (off, gi) in range.enumerate() {
                m[gi] += w * jm * buf[off] * fv;
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(m),
        }
    }
}

/// One Monte Carlo report cell: an (estimator, n, target) combination.
///
/// Conventions: `n` is the evaluation-split sample size (split schemes
/// draw n rows per fold, so 3-way draws 3n in total); `k_n` is 0 for
/// the oracle estimator, which fits no first-stage basis; `sd` uses
/// the 1/R convention so rmse^2 = bias^2 + sd^2 holds exactly;
/// `se_bias` = sd / sqrt(reps).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McCell {
    pub scheme: String,
    pub estimand: String,
    pub n: usize,
    pub k_n: usize,
    pub r_n: usize,
    pub target_id: usize,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub se_bias: f64,
    pub reps: usize,
}

/// Least-squares slope of log RMSE on log n, with a 2-SE half width.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub scheme: String,
    pub estimand: String,
    /// None = pooled over targets (quadratic mean of per-target RMSE).
    pub target_id: Option<usize>,
    pub slope: f64,
    pub ci_half_width: f64,
    /// Exponent predicted by the rate theory for this configuration,
    /// echoed for side-by-side comparison.
    pub theory_exponent: f64,
    pub n_points: usize,
}

/// Indicator frequency of the whitened eigenvalue condition
/// lambda_min >= 1/2 at one sample size.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndicatorFreq {
    pub n: usize,
    pub k_n: usize,
    pub freq: f64,
    pub reps: usize,
}

/// Monte Carlo means and standard errors of the four mean-zero moment
/// vectors, plus eigenvalue indicator frequencies and the reproducing
/// residual check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsSample {
    pub n: usize,
    pub k_n: usize,
    pub reps: usize,
    /// (1/n) sum p_i (Y_i - gamma0(X_i)).
    pub h_gamma_mean: Vec<f64>,
    pub h_gamma_se: Vec<f64>,
    /// (1/n) sum (v_q(Z_i) - p_i alpha0(X_i)).
    pub h_alpha_mean: Vec<f64>,
    pub h_alpha_se: Vec<f64>,
    /// (1/n) sum p_i (gamma0 - gamma*)(X_i), gamma* the population
    /// projection.
    pub h_gamma_star_mean: Vec<f64>,
    pub h_gamma_star_se: Vec<f64>,
    /// (1/n) sum p_i (alpha0 - alpha*)(X_i).
    pub h_alpha_star_mean: Vec<f64>,
    pub h_alpha_star_se: Vec<f64>,
    /// max |mean| / se over all components of all four vectors.
    pub max_abs_t: f64,
    pub indicator_freqs: Vec<IndicatorFreq>,
    pub reproducing_residual_max: f64,
}

/// Full experiment report; identical config and seed reproduce it
/// bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct MCReport {
    pub cells: Vec<McCell>,
    pub rate_fits: Vec<RateFit>,
    pub diagnostics: Option<DiagnosticsSample>,
    /// Fully resolved configuration, echoed into every output.
    pub config_echo: BTreeMap<String, String>,
}

/// bias, sd (1/R), rmse, se_bias against a known truth.
fn mc_stats(values: &[f64], truth: f64) -> (f64, f64, f64, f64) {
    let r = values.len() as f64;
    let bias = values.iter().map(|v| v - truth).sum::<f64>() / r;
    let var = values
        .iter()
        .map(|v| {
            let d = v - truth - bias;
            d * d
        })
        .sum::<f64>()
        / r;
    let msq = values
        .iter()
        .map(|v| {
            let e = v - truth;
            e * e
        })
        .sum::<f64>()
        / r;
    (bias, mathx::sqrt(var), mathx::sqrt(msq), mathx::sqrt(var / r))
}

fn loglog_slope(ns: &[usize], rmses: &[f64]) -> Result<(f64, f64)> {
    let m = ns.len();
    if m < 3 || rmses.len() != m {
        return Err(Error::Validation(
            "rate fit needs at least 3 matched (n, rmse) points".into(),
        ));
    }
    let mut xs = Vec::with_capacity(m);
    let mut ys = Vec::with_capacity(m);
    for (&n, &r) in ns.iter().zip(rmses) {
        if r <= 0.0 || !r.is_finite() {
            return Err(Error::Numeric(format!(
                "cannot fit a log-log slope through rmse = {r}"
            )));
        }
        xs.push(mathx::ln(n as f64));
        ys.push(mathx::ln(r));
    }
    let xbar = xs.iter().sum::<f64>() / m as f64;
    let ybar = ys.iter().sum::<f64>() / m as f64;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let e = y - intercept - slope * x;
            e * e
        })
        .sum();
    let se = mathx::sqrt(rss / (m as f64 - 2.0) / sxx);
    Ok((slope, 2.0 * se))
}

fn push_echo(echo: &mut BTreeMap<String, String>, key: &str, value: String) {
    echo.insert(String::from(key), value);
}

fn join_usizes(v: &[usize]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    parts.join(",")
}

/// Bias decomposition experiment for the conditional covariance with a
/// well-specified basis: piecewise-constant baseline on the k-cell
/// grid, constant propensity 1/2 and unit effect, so the estimand is
/// the constant 1/4 and misspecification is exactly zero. Without
/// splitting, the own-observation term makes the expected bias exactly
/// -c k/n; 2-way removes it but keeps a +O(k/n) coupling through the
/// shared nuisance fold; 3-way is unbiased.
#[derive(Debug, Clone)]
pub struct BiasDecompConfig {
    /// Rows per fold (total drawn = n_per_fold * folds).
    pub n_per_fold: usize,
    /// Basis sizes; the DGP baseline is piecewise constant on each.
    pub k_grid: Vec<usize>,
    pub schemes: Vec<SchemeKind>,
    pub replications: usize,
    pub seed: u64,
}

impl BiasDecompConfig {
    pub fn default_config(seed: u64) -> Self {
        BiasDecompConfig {
            n_per_fold: 400,
            k_grid: vec![16, 32],
            schemes: vec![SchemeKind::None, SchemeKind::TwoWay, SchemeKind::ThreeWay],
            replications: 2000,
            seed,
        }
    }
}

/// Deterministic low-discrepancy values in [-1, 1].
fn golden_values(count: usize) -> Vec<f64> {
    let phi = 0.618_033_988_749_894_9;
    (0..count)
        .map(|j| {
            let f = (phi * (j as f64 + 1.0)) % 1.0;
            2.0 * f - 1.0
        })
        .collect()
}

/// Well-specified conditional-covariance DGP: binary A with constant
/// propensity 1/2, unit effect, baseline piecewise constant on
/// `segments` cells. A degree-0 basis on the same grid spans both
/// nuisances exactly, and the estimand is the constant 1/4.
pub fn dgp_well_specified_cov(segments: usize) -> DgpSpec {
    DgpSpec {
        d_x: 1,
        c_indices: vec![0],
        pi0: FnSpec::Constant(0.5),
        eps: 0.25,
        mu0: FnSpec::PiecewiseConstant {
            segments,
            values: golden_values(segments),
        },
        tau: FnSpec::Constant(1.0),
        noise_sd: 1.0,
        noise: NoiseModel::Gaussian,
        treatment: TreatmentModel::Bernoulli,
    }
}

pub fn bias_decomposition_cov(cfg: &BiasDecompConfig, exec: &dyn Executor) -> Result<MCReport> {
    if cfg.replications < 2 {
        return Err(Error::Validation("bias decomposition needs at least 2 replications".into()));
    }
    if cfg.k_grid.is_empty() || cfg.schemes.is_empty() {
        return Err(Error::Validation("bias decomposition needs a k grid and schemes".into()));
    }
    for &k in &cfg.k_grid {
        if k == 0 || k >= cfg.n_per_fold {
            return Err(Error::Validation(format!(
                "Limited basis growth violated: k_n = {k} must satisfy 0 < k_n < n = {}",
                cfg.n_per_fold
            )));
        }
    }
    let fun = LinearFunctional::cov();
    let targets = vec![vec![0.5]];
    let mut cells = Vec::new();
    for &k in &cfg.k_grid {
        let dgp = dgp_well_specified_cov(k);
        dgp.validate()?;
        let truth = true_theta(&dgp, &fun, TruthTarget::Marginal)?;
        let q_spec = BasisSpec::new(1, k, 0);
        let b_spec = BasisSpec::new(1, 1, 0);
        for &kind in &cfg.schemes {
            let n_total = cfg.n_per_fold * kind.n_folds();
            let task = |rep: usize| -> Vec<f64> {
                let mut rng = rng_for_rep(cfg.seed, rep as u64);
                let data = match dgp.sample(n_total, &mut rng) {
                    Ok(d) => d,
                    Err(_) => return vec![f64::NAN],
                };
                let scheme = CrossFitScheme::new(kind, mix_seed(cfg.seed, rep as u64));
                match crate::crossfit::run(&data, &fun, &q_spec, &b_spec, &scheme, &targets) {
                    Ok(est) => vec![est.estimates[0].value],
                    Err(_) => vec![f64::NAN],
                }
            };
            let results = exec.run(cfg.replications, &task);
            let values: Vec<f64> = results
                .iter()
                .map(|r| r[0])
                .filter(|v| v.is_finite())
                .collect();
            if values.len() < 2 {
                return Err(Error::Numeric(format!(
                    "scheme {} at k_n = {k}: too few successful replications",
                    kind.name()
                )));
            }
            let (bias, sd, rmse, se_bias) = mc_stats(&values, truth);
            cells.push(McCell {
                scheme: String::from(kind.name()),
                estimand: String::from("cov"),
                n: cfg.n_per_fold,
                k_n: k,
                r_n: 1,
                target_id: 0,
                bias,
                sd,
                rmse,
                se_bias,
                reps: values.len(),
            });
        }
    }
    let mut echo = BTreeMap::new();
    push_echo(&mut echo, "experiment", String::from("bias-decomp"));
    push_echo(&mut echo, "estimand", String::from("cov"));
    push_echo(&mut echo, "n", format!("{}", cfg.n_per_fold));
    push_echo(&mut echo, "k_grid", join_usizes(&cfg.k_grid));
    let scheme_names: Vec<String> = cfg.schemes.iter().map(|s| String::from(s.name())).collect();
    push_echo(&mut echo, "schemes", scheme_names.join(","));
    push_echo(&mut echo, "replications", format!("{}", cfg.replications));
    push_echo(&mut echo, "seed", format!("{}", cfg.seed));
    Ok(MCReport {
        cells,
        rate_fits: Vec::new(),
        diagnostics: None,
        config_echo: echo,
    })
}

/// Basis-growth rule: segments(n) = max(min_segments, round(coef * n^exponent)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentsRule {
    pub coef: f64,
    pub exponent: f64,
    pub min_segments: usize,
}

impl SegmentsRule {
    pub fn segments_for(&self, n: usize) -> usize {
        let raw = self.coef * mathx::pow(n as f64, self.exponent);
        let rounded = if raw.is_finite() && raw > 0.0 {
            mathx::round(raw) as usize
        } else {
            0
        };
        rounded.max(self.min_segments).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateEstimator {
    /// Infeasible benchmark: second stage on true-nuisance
    /// pseudo-outcomes over the full sample.
    Oracle,
    Scheme(SchemeKind),
}

impl RateEstimator {
    pub fn name(&self) -> &'static str {
        match self {
            RateEstimator::Oracle => "oracle",
            RateEstimator::Scheme(k) => k.name(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RateConfig {
    pub dgp: DgpSpec,
    pub estimand: String,
    /// Evaluation-split sizes, strictly increasing, at least 3.
    pub n_grid: Vec<usize>,
    pub q_rule: SegmentsRule,
    pub q_degree: usize,
    pub b_rule: SegmentsRule,
    pub b_degree: usize,
    pub estimators: Vec<RateEstimator>,
    pub targets: Vec<Vec<f64>>,
    pub replications: usize,
    pub seed: u64,
    /// Rate exponent the theory predicts for the oracle curve.
    pub theory_exponent: f64,
}

/// One-dimensional rate DGP: smooth propensity, a baseline with a kink
/// (smoothness exactly one), modest noise. The target function
/// inherits the kink, so bias and variance balance at the standard
/// one-dimensional rate when r_n grows like n^(1/3).
pub fn dgp_rates_1d() -> DgpSpec {
    DgpSpec {
        d_x: 1,
        c_indices: vec![0],
        pi0: FnSpec::CosineSeries {
            offset: 0.5,
            coefs: vec![vec![0.25]],
        },
        eps: 0.25,
        mu0: FnSpec::Sum(vec![
            FnSpec::Kink {
                axis: 0,
                center: 0.55,
                amp: 1.2,
                offset: 0.3,
            },
            FnSpec::CosineSeries {
                offset: 0.0,
                coefs: vec![vec![0.4, 0.0, -0.1]],
            },
        ]),
        tau: FnSpec::Constant(0.5),
        noise_sd: 0.5,
        noise: NoiseModel::Gaussian,
        treatment: TreatmentModel::Bernoulli,
    }
}

/// Heterogeneous-effects DGP with positivity margin 0.1: smooth tau,
/// rougher baseline (kink plus slowly decaying cosines).
pub fn dgp_cate_1d() -> DgpSpec {
    DgpSpec {
        d_x: 1,
        c_indices: vec![0],
        pi0: FnSpec::CosineSeries {
            offset: 0.5,
            coefs: vec![vec![0.4]],
        },
        eps: 0.1,
        mu0: FnSpec::Sum(vec![
            FnSpec::Kink {
                axis: 0,
                center: 0.35,
                amp: 1.0,
                offset: 0.0,
            },
            FnSpec::CosineSeries {
                offset: 0.2,
                coefs: vec![vec![0.8, -0.4, 0.25, -0.15, 0.1]],
            },
        ]),
        tau: FnSpec::CosineSeries {
            offset: 1.0,
            coefs: vec![vec![0.5]],
        },
        noise_sd: 0.5,
        noise: NoiseModel::Gaussian,
        treatment: TreatmentModel::Bernoulli,
    }
}

pub fn rates_default(seed: u64) -> RateConfig {
    RateConfig {
        dgp: dgp_rates_1d(),
        estimand: String::from("trt"),
        n_grid: vec![500, 1000, 2000, 4000, 8000],
        q_rule: SegmentsRule {
            coef: 0.5,
            exponent: 0.45,
            min_segments: 2,
        },
        q_degree: 1,
        b_rule: SegmentsRule {
            coef: 0.5,
            exponent: 1.0 / 3.0,
            min_segments: 2,
        },
        b_degree: 1,
        estimators: vec![
            RateEstimator::Oracle,
            RateEstimator::Scheme(SchemeKind::ThreeWay),
            RateEstimator::Scheme(SchemeKind::TwoWay),
        ],
        targets: vec![vec![0.3], vec![0.7]],
        replications: 500,
        seed,
        theory_exponent: -1.0 / 3.0,
    }
}

pub fn cate_rates_default(seed: u64) -> RateConfig {
    // Targets form a spread interior grid rather than a single point:
    // as the second-stage segment count steps through the n grid, any
    // fixed point drifts between cell centers and cell edges, and the
    // edge positions of a local polynomial fit carry several times the
    // variance. Pooling over a grid averages that position effect out,
    // so the pooled RMSE tracks the n^(-1/3) trend instead of the
    // target's cell-position luck.
    let targets = (0..11).map(|j| vec![0.08 + 0.084 * j as f64]).collect();
    RateConfig {
        dgp: dgp_cate_1d(),
        estimand: String::from("cate"),
        n_grid: vec![250, 500, 1000, 2000, 4000],
        q_rule: SegmentsRule {
            coef: 0.8,
            exponent: 1.0 / 3.0,
            min_segments: 2,
        },
        q_degree: 1,
        b_rule: SegmentsRule {
            coef: 0.5,
            exponent: 1.0 / 3.0,
            min_segments: 2,
        },
        b_degree: 1,
        estimators: vec![RateEstimator::Oracle, RateEstimator::Scheme(SchemeKind::ThreeWay)],
        targets,
        replications: 300,
        seed,
        theory_exponent: -1.0 / 3.0,
    }
}

/// Infeasible oracle estimate: second stage on true-nuisance
/// pseudo-outcomes (differenced rowwise for a contrast), full sample.
pub fn oracle_estimate(
    dgp: &DgpSpec,
    selection: &EstimandSelection,
    b_spec: &BasisSpec,
    data: &Dataset,
    targets: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let b_basis: Arc<dyn SeriesBasis> = Arc::new(build_basis(b_spec)?);
    let values: Vec<f64> = match selection {
        EstimandSelection::Single(f) => {
            let g0 = dgp.gamma0(f)?;
            let a0 = dgp.alpha0(f)?;
            (0..data.n())
                .map(|i| pseudo_outcome_oracle(f, g0.as_ref(), a0.as_ref(), data.z(i)))
                .collect::<Result<_>>()?
        }
        EstimandSelection::Contrast(p, m) => {
            let gp = dgp.gamma0(p)?;
            let ap = dgp.alpha0(p)?;
            let gm = dgp.gamma0(m)?;
            let am = dgp.alpha0(m)?;
            (0..data.n())
                .map(|i| {
                    let z = data.z(i);
                    Ok(pseudo_outcome_oracle(p, gp.as_ref(), ap.as_ref(), z)?
                        - pseudo_outcome_oracle(m, gm.as_ref(), am.as_ref(), z)?)
                })
                .collect::<Result<_>>()?
        }
    };
    let flags = vec![false; data.n()];
    let fit = fit_theta_from(&values, &flags, &b_basis, data, SplitTag::Full)?;
    Ok(fit.estimates(targets)?.iter().map(|e| e.value).collect())
}

pub fn rate_experiment(cfg: &RateConfig, exec: &dyn Executor) -> Result<MCReport> {
    cfg.dgp.validate()?;
    if cfg.n_grid.len() < 3 {
        return Err(Error::Validation(format!(
            "rate grid needs at least 3 sample sizes, got {}",
            cfg.n_grid.len()
        )));
    }
    if cfg.n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("rate grid must be strictly increasing".into()));
    }
    if cfg.replications < 3 {
        return Err(Error::Validation("rate experiment needs at least 3 replications".into()));
    }
    if cfg.estimators.is_empty() || cfg.targets.is_empty() {
        return Err(Error::Validation("rate experiment needs estimators and targets".into()));
    }
    let sel = EstimandSelection::by_name(&cfg.estimand)?;
    let d_x = cfg.dgp.d_x;
    let d_c = cfg.dgp.c_indices.len();
    let truths: Vec<f64> = cfg
        .targets
        .iter()
        .map(|t| true_theta_selection(&cfg.dgp, &sel, TruthTarget::Point(t)))
        .collect::<Result<_>>()?;
    let mut grid = Vec::new();
    for &n in &cfg.n_grid {
        let q_spec = BasisSpec::new(d_x, cfg.q_rule.segments_for(n), cfg.q_degree);
        let b_spec = BasisSpec::new(d_c, cfg.b_rule.segments_for(n), cfg.b_degree);
        q_spec.validate()?;
        b_spec.validate()?;
        let k_n = q_spec.basis_size();
        let r_n = b_spec.basis_size();
        if k_n >= n || r_n >= n {
            return Err(Error::Validation(format!(
                "Limited basis growth violated at n = {n}: k_n = {k_n} and r_n = {r_n} must stay below n"
            )));
        }
        grid.push((n, q_spec, b_spec, k_n, r_n));
    }
    let mut cells = Vec::new();
    let mut rate_fits = Vec::new();
    let ns: Vec<usize> = grid.iter().map(|g| g.0).collect();
    for est in &cfg.estimators {
        let mut rmse_by_target = vec![Vec::with_capacity(ns.len()); cfg.targets.len()];
        for (n, q_spec, b_spec, k_n, r_n) in &grid {
            let nan_row = || vec![f64::NAN; cfg.targets.len()];
            let task = |rep: usize| -> Vec<f64> {
                let mut rng = rng_for_rep(cfg.seed, rep as u64);
                match est {
                    RateEstimator::Oracle => {
                        let data = match cfg.dgp.sample(*n, &mut rng) {
                            Ok(d) => d,
                            Err(_) => return nan_row(),
                        };
                        oracle_estimate(&cfg.dgp, &sel, b_spec, &data, &cfg.targets)
                            .unwrap_or_else(|_| nan_row())
                    }
                    RateEstimator::Scheme(kind) => {
                        let data = match cfg.dgp.sample(n * kind.n_folds(), &mut rng) {
                            Ok(d) => d,
                            Err(_) => return nan_row(),
                        };
                        let scheme = CrossFitScheme::new(*kind, mix_seed(cfg.seed, rep as u64));
                        match run_selection(&data, &sel, q_spec, b_spec, &scheme, &cfg.targets) {
                            Ok(e) => e.estimates.iter().map(|t| t.value).collect(),
                            Err(_) => nan_row(),
                        }
                    }
                }
            };
            let results = exec.run(cfg.replications, &task);
            for (tid, &truth) in truths.iter().enumerate() {
                let values: Vec<f64> = results
                    .iter()
                    .map(|r| r[tid])
                    .filter(|v| v.is_finite())
                    .collect();
                if values.len() < 3 {
                    return Err(Error::Numeric(format!(
                        "estimator {} at n = {n}: too few successful replications",
                        est.name()
                    )));
                }
                let (bias, sd, rmse, se_bias) = mc_stats(&values, truth);
                cells.push(McCell {
                    scheme: String::from(est.name()),
                    estimand: cfg.estimand.clone(),
                    n: *n,
                    k_n: if matches!(est, RateEstimator::Oracle) {
                        0
                    } else {
                        *k_n
                    },
                    r_n: *r_n,
                    target_id: tid,
                    bias,
                    sd,
                    rmse,
                    se_bias,
                    reps: values.len(),
                });
                rmse_by_target[tid].push(rmse);
            }
        }
        let mut pooled_sq = vec![0.0; ns.len()];
        for (tid, series) in rmse_by_target.iter().enumerate() {
            let (slope, ci_half_width) = loglog_slope(&ns, series)?;
            rate_fits.push(RateFit {
                scheme: String::from(est.name()),
                estimand: cfg.estimand.clone(),
                target_id: Some(tid),
                slope,
                ci_half_width,
                theory_exponent: cfg.theory_exponent,
                n_points: ns.len(),
            });
            for (i, r) in series.iter().enumerate() {
                pooled_sq[i] += r * r;
            }
        }
        let pooled: Vec<f64> = pooled_sq
            .iter()
            .map(|s| mathx::sqrt(s / cfg.targets.len() as f64))
            .collect();
        let (slope, ci_half_width) = loglog_slope(&ns, &pooled)?;
        rate_fits.push(RateFit {
            scheme: String::from(est.name()),
            estimand: cfg.estimand.clone(),
            target_id: None,
            slope,
            ci_half_width,
            theory_exponent: cfg.theory_exponent,
            n_points: ns.len(),
        });
    }
    let mut echo = BTreeMap::new();
    push_echo(&mut echo, "experiment", String::from("rates"));
    push_echo(&mut echo, "estimand", cfg.estimand.clone());
    push_echo(&mut echo, "n_grid", join_usizes(&cfg.n_grid));
    push_echo(&mut echo, "q.coef", format!("{}", cfg.q_rule.coef));
    push_echo(&mut echo, "q.exponent", format!("{}", cfg.q_rule.exponent));
    push_echo(&mut echo, "q.degree", format!("{}", cfg.q_degree));
    push_echo(&mut echo, "b.coef", format!("{}", cfg.b_rule.coef));
    push_echo(&mut echo, "b.exponent", format!("{}", cfg.b_rule.exponent));
    push_echo(&mut echo, "b.degree", format!("{}", cfg.b_degree));
    let est_names: Vec<String> = cfg.estimators.iter().map(|e| String::from(e.name())).collect();
    push_echo(&mut echo, "estimators", est_names.join(","));
    push_echo(&mut echo, "replications", format!("{}", cfg.replications));
    push_echo(&mut echo, "seed", format!("{}", cfg.seed));
    push_echo(&mut echo, "theory_exponent", format!("{}", cfg.theory_exponent));
    Ok(MCReport {
        cells,
        rate_fits,
        diagnostics: None,
        config_echo: echo,
    })
}

/// Single-cell Monte Carlo run: one DGP, estimand, scheme, and sample
/// size, reporting bias/sd/rmse per target.
#[derive(Debug, Clone)]
pub struct SimulateConfig {
    pub dgp: DgpSpec,
    pub estimand: String,
    pub scheme_kind: SchemeKind,
    /// Evaluation-split size (total drawn = n * folds).
    pub n: usize,
    pub q_spec: BasisSpec,
    pub b_spec: BasisSpec,
    pub targets: Vec<Vec<f64>>,
    pub replications: usize,
    pub seed: u64,
}

pub fn simulate_default(seed: u64) -> SimulateConfig {
    SimulateConfig {
        dgp: dgp_cate_1d(),
        estimand: String::from("cate"),
        scheme_kind: SchemeKind::ThreeWay,
        n: 1000,
        q_spec: BasisSpec::new(1, 6, 1),
        b_spec: BasisSpec::new(1, 3, 1),
        targets: vec![vec![0.25], vec![0.5], vec![0.75]],
        replications: 200,
        seed,
    }
}

pub fn simulate_experiment(cfg: &SimulateConfig, exec: &dyn Executor) -> Result<MCReport> {
    cfg.dgp.validate()?;
    cfg.q_spec.validate()?;
    cfg.b_spec.validate()?;
    if cfg.replications < 2 {
        return Err(Error::Validation("simulation needs at least 2 replications".into()));
    }
    let k_n = cfg.q_spec.basis_size();
    let r_n = cfg.b_spec.basis_size();
    if k_n >= cfg.n || r_n >= cfg.n {
        return Err(Error::Validation(format!(
            "Limited basis growth violated: k_n = {k_n} and r_n = {r_n} must stay below n = {}",
            cfg.n
        )));
    }
    let sel = EstimandSelection::by_name(&cfg.estimand)?;
    let truths: Vec<f64> = cfg
        .targets
        .iter()
        .map(|t| true_theta_selection(&cfg.dgp, &sel, TruthTarget::Point(t)))
        .collect::<Result<_>>()?;
    let task = |rep: usize| -> Vec<f64> {
        let mut rng = rng_for_rep(cfg.seed, rep as u64);
        let data = match cfg.dgp.sample(cfg.n * cfg.scheme_kind.n_folds(), &mut rng) {
            Ok(d) => d,
            Err(_) => return vec![f64::NAN; cfg.targets.len()],
        };
        let scheme = CrossFitScheme::new(cfg.scheme_kind, mix_seed(cfg.seed, rep as u64));
        match run_selection(&data, &sel, &cfg.q_spec, &cfg.b_spec, &scheme, &cfg.targets) {
            Ok(e) => e.estimates.iter().map(|t| t.value).collect(),
            Err(_) => vec![f64::NAN; cfg.targets.len()],
        }
    };
    let results = exec.run(cfg.replications, &task);
    let mut cells = Vec::new();
    for (tid, &truth) in truths.iter().enumerate() {
        let values: Vec<f64> = results
            .iter()
            .map(|r| r[tid])
            .filter(|v| v.is_finite())
            .collect();
        if values.len() < 2 {
            return Err(Error::Numeric(format!(
                "target {tid}: too few successful replications"
            )));
        }
        let (bias, sd, rmse, se_bias) = mc_stats(&values, truth);
        cells.push(McCell {
            scheme: String::from(cfg.scheme_kind.name()),
            estimand: cfg.estimand.clone(),
            n: cfg.n,
            k_n,
            r_n,
            target_id: tid,
            bias,
            sd,
            rmse,
            se_bias,
            reps: values.len(),
        });
    }
    let mut echo = BTreeMap::new();
    push_echo(&mut echo, "experiment", String::from("simulate"));
    push_echo(&mut echo, "estimand", cfg.estimand.clone());
    push_echo(&mut echo, "scheme", String::from(cfg.scheme_kind.name()));
    push_echo(&mut echo, "n", format!("{}", cfg.n));
    push_echo(&mut echo, "k_n", format!("{k_n}"));
    push_echo(&mut echo, "r_n", format!("{r_n}"));
    push_echo(&mut echo, "replications", format!("{}", cfg.replications));
    push_echo(&mut echo, "seed", format!("{}", cfg.seed));
    Ok(MCReport {
        cells,
        rate_fits: Vec::new(),
        diagnostics: None,
        config_echo: echo,
    })
}

/// Two-covariate smooth DGP for the mean-zero moment checks.
pub fn dgp_hmoments_2d() -> DgpSpec {
    DgpSpec {
        d_x: 2,
        c_indices: vec![0],
        pi0: FnSpec::CosineSeries {
            offset: 0.5,
            coefs: vec![vec![0.2], vec![0.15]],
        },
        eps: 0.15,
        mu0: FnSpec::CosineSeries {
            offset: 0.5,
            coefs: vec![vec![0.5, -0.2], vec![0.3]],
        },
        tau: FnSpec::CosineSeries {
            offset: 1.0,
            coefs: vec![vec![0.3], vec![-0.2]],
        },
        noise_sd: 0.7,
        noise: NoiseModel::Gaussian,
        treatment: TreatmentModel::Bernoulli,
    }
}

/// One-covariate DGP for the eigenvalue indicator frequencies.
pub fn dgp_indicator_1d() -> DgpSpec {
    DgpSpec {
        d_x: 1,
        c_indices: vec![0],
        pi0: FnSpec::Constant(0.5),
        eps: 0.25,
        mu0: FnSpec::CosineSeries {
            offset: 0.0,
            coefs: vec![vec![0.6, -0.3]],
        },
        tau: FnSpec::Constant(1.0),
        noise_sd: 1.0,
        noise: NoiseModel::Gaussian,
        treatment: TreatmentModel::Bernoulli,
    }
}

#[derive(Debug, Clone)]
pub struct DiagnosticsConfig {
    /// DGP and estimand for the mean-zero moment vectors.
    pub dgp: DgpSpec,
    pub estimand: String,
    pub n: usize,
    pub q_spec: BasisSpec,
    pub replications: usize,
    /// DGP and estimand for the eigenvalue indicator frequencies.
    pub ind_dgp: DgpSpec,
    pub ind_estimand: String,
    pub ind_q_spec: BasisSpec,
    pub ind_n_grid: Vec<usize>,
    pub ind_replications: usize,
    pub seed: u64,
}

pub fn diagnostics_default(seed: u64) -> DiagnosticsConfig {
    DiagnosticsConfig {
        dgp: dgp_hmoments_2d(),
        estimand: String::from("trt"),
        n: 5000,
        q_spec: BasisSpec::new(2, 3, 1),
        replications: 400,
        ind_dgp: dgp_indicator_1d(),
        ind_estimand: String::from("cov"),
        ind_q_spec: BasisSpec::new(1, 8, 0),
        ind_n_grid: vec![100, 400, 1600],
        ind_replications: 500,
        seed,
    }
}

/// |sum_i w_i(target) g(C_i) - g(target)| for the second-stage weights:
/// near zero whenever g lies in the span of the b basis, in particular
/// for polynomials up to the spline degree.
pub fn reproducing_residual(
    b_basis: &dyn SeriesBasis,
    c_rows: &[f64],
    target: &[f64],
    g: &dyn XFunction,
) -> Result<f64> {
    let w = weights(b_basis, c_rows, target)?;
    let dim = b_basis.dim();
    let mut acc = 0.0;
    for (i, wi) in w.iter().enumerate() {
        acc += wi * g.eval(&c_rows[i * dim..(i + 1) * dim]);
    }
    Ok(mathx::abs(acc - g.eval(target)))
}

fn single_estimand(name: &str) -> Result<LinearFunctional> {
    match EstimandSelection::by_name(name)? {
        EstimandSelection::Single(f) => Ok(f),
        EstimandSelection::Contrast(..) => Err(Error::Validation(
            "diagnostics need a single estimand, not a contrast".into(),
        )),
    }
}

fn componentwise_stats(rows: &[Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>) {
    let r = rows.len() as f64;
    let mut mean = vec![0.0; width];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= r;
    }
    let mut se = vec![0.0; width];
    for row in rows {
        for ((s, v), m) in se.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in se.iter_mut() {
        *s = mathx::sqrt(*s / r / r);
    }
    (mean, se)
}

pub fn estimator_diagnostics(cfg: &DiagnosticsConfig, exec: &dyn Executor) -> Result<MCReport> {
    cfg.dgp.validate()?;
    cfg.ind_dgp.validate()?;
    cfg.q_spec.validate()?;
    cfg.ind_q_spec.validate()?;
    if cfg.replications < 2 || cfg.ind_replications < 1 {
        return Err(Error::Validation("diagnostics need replications".into()));
    }
    if cfg.q_spec.dim != cfg.dgp.d_x || cfg.ind_q_spec.dim != cfg.ind_dgp.d_x {
        return Err(Error::Validation(
            "diagnostics basis dims must match their DGP covariate dims".into(),
        ));
    }
    let fun = single_estimand(&cfg.estimand)?;
    let basis: Arc<dyn SeriesBasis> = Arc::new(build_basis(&cfg.q_spec)?);
    let k = basis.len();
    let g0 = cfg.dgp.gamma0(&fun)?;
    let a0 = cfg.dgp.alpha0(&fun)?;
    let pop = QuadPop::for_basis(&cfg.dgp, &cfg.q_spec);
    let c_gamma_star = project_population(g0.as_ref(), &fun, basis.as_ref(), &pop)?;
    let c_alpha_star = project_population(a0.as_ref(), &fun, basis.as_ref(), &pop)?;
    let nan_row = || vec![f64::NAN; 4 * k];
    let task = |rep: usize| -> Vec<f64> {
        let mut rng = rng_for_rep(cfg.seed, rep as u64);
        let data = match cfg.dgp.sample(cfg.n, &mut rng) {
            Ok(d) => d,
            Err(_) => return nan_row(),
        };
        let mut out = vec![0.0; 4 * k];
        let mut buf = vec![0.0; basis.max_block()];
        for i in 0..data.n() {
            let z = data.z(i);
            let j = match fun.j_indicator(z.a) {
                Ok(j) => j,
                Err(_) => return nan_row(),
            };
            if j != 0.0 {
                let range = match basis.eval_block(z.x, &mut buf) {
                    Ok(r) => r,
                    Err(_) => return nan_row(),
                };
                let g0v = g0.eval(z.x);
                let a0v = a0.eval(z.x);
                let mut g_star = 0.0;
                let mut a_star = 0.0;
                for (off, gi) in range.clone().enumerate() {
                    g_star += buf[off] * c_gamma_star[gi];
                    a_star += buf[off] * c_alpha_star[gi];
                }
                for (off, gi) in range.clone().enumerate() {
                    let p = j * buf[off];
                    out[gi] += p * (z.y - g0v);
                    out[k + gi] -= p * a0v;
                    out[2 * k + gi] += p * (g0v - g_star);
                    out[3 * k + gi] += p * (a0v - a_star);
                }
            }
            // The v_q part of the alpha moment runs over all rows.
            match fun.v_q_block(z, basis.as_ref(), &mut buf) {
                Ok(Some(range)) => {
                    for (off, gi) in range.enumerate() {
                        out[k + gi] += buf[off];
                    }
                }
                Ok(None) => match fun.v_q_dense(z, basis.as_ref()) {
                    Ok(dense) => {
                        for gi in 0..k {
                            out[k + gi] += dense[gi];
                        }
                    }
                    Err(_) => return nan_row(),
                },
                Err(_) => return nan_row(),
            }
        }
        for v in out.iter_mut() {
            *v /= data.n() as f64;
        }
        out
    };
    let results = exec.run(cfg.replications, &task);
    let rows: Vec<Vec<f64>> = results
        .into_iter()
        .filter(|r| r.iter().all(|v| v.is_finite()))
        .collect();
    if rows.len() < 2 {
        return Err(Error::Numeric(
            "too few successful replications for the moment diagnostics".into(),
        ));
    }
    let (mean, se) = componentwise_stats(&rows, 4 * k);
    let mut max_abs_t: f64 = 0.0;
    for (m, s) in mean.iter().zip(&se) {
        if *s > 0.0 {
            max_abs_t = max_abs_t.max(mathx::abs(*m) / s);
        } else if *m != 0.0 {
            max_abs_t = f64::INFINITY;
        }
    }
    let slice4 = |q: usize| -> (Vec<f64>, Vec<f64>) {
        (mean[q * k..(q + 1) * k].to_vec(), se[q * k..(q + 1) * k].to_vec())
    };
    let (h_gamma_mean, h_gamma_se) = slice4(0);
    let (h_alpha_mean, h_alpha_se) = slice4(1);
    let (h_gamma_star_mean, h_gamma_star_se) = slice4(2);
    let (h_alpha_star_mean, h_alpha_star_se) = slice4(3);

    // Indicator frequencies: whitened against the population moment,
    // lambda_min >= 1/2.
    let ind_fun = single_estimand(&cfg.ind_estimand)?;
    let ind_basis: Arc<dyn SeriesBasis> = Arc::new(build_basis(&cfg.ind_q_spec)?);
    let ind_pop = QuadPop::for_basis(&cfg.ind_dgp, &cfg.ind_q_spec);
    let pop_gram = ind_pop.gram_p(&ind_fun, ind_basis.as_ref())?;
    let whitener = Whitener {
        w: linalg::sym_inv_sqrt(&pop_gram, 1e-12)?,
    };
    let mut indicator_freqs = Vec::with_capacity(cfg.ind_n_grid.len());
    for &n in &cfg.ind_n_grid {
        if n == 0 {
            return Err(Error::Validation("indicator grid has n = 0".into()));
        }
        let stream_seed = mix_seed(cfg.seed, n as u64);
        let ind_task = |rep: usize| -> Vec<f64> {
            let mut rng = rng_for_rep(stream_seed, rep as u64);
            let data = match cfg.ind_dgp.sample(n, &mut rng) {
                Ok(d) => d,
                Err(_) => return vec![f64::NAN],
            };
            let mut jw = Vec::with_capacity(data.n());
            for i in 0..data.n() {
                match ind_fun.j_indicator(data.a(i)) {
                    Ok(j) => jw.push(j),
                    Err(_) => return vec![f64::NAN],
                }
            }
            let g = match gram(ind_basis.as_ref(), data.xs_flat(), Some(&jw), true) {
                Ok(g) => g,
                Err(_) => return vec![f64::NAN],
            };
            let (lmin, _) = linalg::sym_eig_range(&whitener.apply_gram(&g));
            vec![if lmin >= 0.5 { 1.0 } else { 0.0 }]
        };
        let results = exec.run(cfg.ind_replications, &ind_task);
        let values: Vec<f64> = results
            .iter()
            .map(|r| r[0])
            .filter(|v| v.is_finite())
            .collect();
        if values.is_empty() {
            return Err(Error::Numeric(format!(
                "indicator frequency at n = {n}: no successful replications"
            )));
        }
        indicator_freqs.push(IndicatorFreq {
            n,
            k_n: ind_basis.len(),
            freq: values.iter().sum::<f64>() / values.len() as f64,
            reps: values.len(),
        });
    }

    // Reproducing-property residuals on random spline instances.
    let mut rng = rng_for_rep(mix_seed(cfg.seed, 0x5EED), 0);
    let mut reproducing_residual_max: f64 = 0.0;
    for _ in 0..20 {
        let segments = rng.random_range(2..=6usize);
        let degree = rng.random_range(0..=2usize);
        let spec = BasisSpec::new(1, segments, degree);
        let b_basis = build_basis(&spec)?;
        let n_rows = 200;
        let mut c_rows = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            c_rows.push(rng.random::<f64>());
        }
        let coeffs: Vec<f64> = (0..=degree).map(|_| rng.random_range(-1.0..1.0)).collect();
        let poly = move |x: &[f64]| {
            let mut acc = 0.0;
            let mut p = 1.0;
            for c in &coeffs {
                acc += c * p;
                p *= x[0];
            }
            acc
        };
        let target = [rng.random::<f64>()];
        let resid = reproducing_residual(&b_basis, &c_rows, &target, &poly)?;
        reproducing_residual_max = reproducing_residual_max.max(resid);
    }

    let sample = DiagnosticsSample {
        n: cfg.n,
        k_n: k,
        reps: rows.len(),
        h_gamma_mean,
        h_gamma_se,
        h_alpha_mean,
        h_alpha_se,
        h_gamma_star_mean,
        h_gamma_star_se,
        h_alpha_star_mean,
        h_alpha_star_se,
        max_abs_t,
        indicator_freqs,
        reproducing_residual_max,
    };
    let mut echo = BTreeMap::new();
    push_echo(&mut echo, "experiment", String::from("diagnostics"));
    push_echo(&mut echo, "estimand", cfg.estimand.clone());
    push_echo(&mut echo, "n", format!("{}", cfg.n));
    push_echo(&mut echo, "k_n", format!("{k}"));
    push_echo(&mut echo, "replications", format!("{}", cfg.replications));
    push_echo(&mut echo, "ind.estimand", cfg.ind_estimand.clone());
    push_echo(&mut echo, "ind.n_grid", join_usizes(&cfg.ind_n_grid));
    push_echo(&mut echo, "ind.replications", format!("{}", cfg.ind_replications));
    push_echo(&mut echo, "seed", format!("{}", cfg.seed));
    Ok(MCReport {
        cells: Vec::new(),
        rate_fits: Vec::new(),
        diagnostics: Some(sample),
        config_echo: echo,
    })
}
