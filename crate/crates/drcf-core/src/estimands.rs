//! Linear functionals of a regression: the J indicator, the moment
//! function m(z, gamma), the v_q moment vector, and exact-enumeration
//! checks on finite populations.
//!
//! Built-ins:
//! - `cov`:  J = 1,     m = a (y - gamma(x)),  representer -E[A|X]
//! - `trt`:  J = a,     m = gamma(x),          representer 1/E[A|X]
//! - `ctrl`: J = 1 - a, m = gamma(x),          representer 1/E[1-A|X]
//!
//! A custom functional supplies only its J rule and m rule; the v_q
//! vector and the whole moment pipeline derive from those.

use alloc::{format, string::String, sync::Arc, vec, vec::Vec};
use core::ops::Range;
use nalgebra::{DMatrix, DVector};

use crate::basis::SeriesBasis;
use crate::error::{Error, Result};

/// Function of the covariates, evaluable anywhere in the domain.
pub trait XFunction: Send + Sync {
    fn eval(&self, x: &[f64]) -> f64;
}

impl<F> XFunction for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Borrowed view of one observation (x, a, y).
#[derive(Debug, Clone, Copy)]
pub struct ZView<'a> {
    pub x: &'a [f64],
    pub a: f64,
    pub y: f64,
}

/// Owned observation, used by finite populations and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationZ {
    pub x: Vec<f64>,
    pub a: f64,
    pub y: f64,
}

impl ObservationZ {
    pub fn new(x: Vec<f64>, a: f64, y: f64) -> Self {
        ObservationZ { x, a, y }
    }

    pub fn view(&self) -> ZView<'_> {
        ZView {
            x: &self.x,
            a: self.a,
            y: self.y,
        }
    }
}

type JRule = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type MRule = Arc<dyn Fn(ZView<'_>, &dyn XFunction) -> f64 + Send + Sync>;

enum Kind {
    Cov,
    Trt,
    Ctrl,
    Custom { j: JRule, m: MRule },
}

/// An estimand expressed as a linear functional of gamma.
pub struct LinearFunctional {
    name: String,
    kind: Kind,
}

impl core::fmt::Debug for LinearFunctional {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "LinearFunctional({})", self.name)
    }
}

impl Clone for LinearFunctional {
    fn clone(&self) -> Self {
        let kind = match &self.kind {
            Kind::Cov => Kind::Cov,
            Kind::Trt => Kind::Trt,
            Kind::Ctrl => Kind::Ctrl,
            Kind::Custom { j, m } => Kind::Custom {
                j: j.clone(),
                m: m.clone(),
            },
        };
        LinearFunctional {
            name: self.name.clone(),
            kind,
        }
    }
}

impl LinearFunctional {
    /// Conditional covariance of A and Y given X.
    pub fn cov() -> Self {
        LinearFunctional {
            name: "cov".into(),
            kind: Kind::Cov,
        }
    }

    /// Mean outcome under treatment, E[Y|X, A=1] averaged.
    pub fn trt() -> Self {
        LinearFunctional {
            name: "trt".into(),
            kind: Kind::Trt,
        }
    }

    /// Mean outcome under control, E[Y|X, A=0] averaged.
    pub fn ctrl() -> Self {
        LinearFunctional {
            name: "ctrl".into(),
            kind: Kind::Ctrl,
        }
    }

    /// Custom functional from its J rule and m rule. The J rule must
    /// return 0 or 1 deterministically; the m rule must be linear in
    /// gamma.
    pub fn custom(
        name: &str,
        j: impl Fn(f64) -> f64 + Send + Sync + 'static,
        m: impl Fn(ZView<'_>, &dyn XFunction) -> f64 + Send + Sync + 'static,
    ) -> Self {
        LinearFunctional {
            name: name.into(),
            kind: Kind::Custom {
                j: Arc::new(j),
                m: Arc::new(m),
            },
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "cov" => Some(Self::cov()),
            "trt" => Some(Self::trt()),
            "ctrl" => Some(Self::ctrl()),
            _ => None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_builtin(&self) -> bool {
        !matches!(self.kind, Kind::Custom { .. })
    }

    /// The indicator J as a function of the treatment value.
    pub fn j_indicator(&self, a: f64) -> Result<f64> {
        match &self.kind {
            Kind::Cov => Ok(1.0),
            Kind::Trt | Kind::Ctrl => {
                if a == 0.0 || a == 1.0 {
                    Ok(match self.kind {
                        Kind::Trt => a,
                        _ => 1.0 - a,
                    })
                } else {
                    Err(Error::Data(format!(
                        "estimand {} requires binary treatment, got a = {a}",
                        self.name
                    )))
                }
            }
            Kind::Custom { j, .. } => {
                let v = j(a);
                if v == 0.0 || v == 1.0 {
                    Ok(v)
                } else {
                    Err(Error::Data(format!(
                        "custom J rule returned {v}, expected 0 or 1"
                    )))
                }
            }
        }
    }

    /// The moment function m(z, gamma).
    pub fn m_eval(&self, z: ZView<'_>, gamma: &dyn XFunction) -> f64 {
        match &self.kind {
            Kind::Cov => z.a * (z.y - gamma.eval(z.x)),
            Kind::Trt | Kind::Ctrl => gamma.eval(z.x),
            Kind::Custom { m, .. } => m(z, gamma),
        }
    }

    /// m(z, gamma_zero) with gamma_zero identically 0.
    pub fn m_zero(&self, z: ZView<'_>) -> f64 {
        struct Zero;
        impl XFunction for Zero {
            fn eval(&self, _x: &[f64]) -> f64 {
                0.0
            }
        }
        self.m_eval(z, &Zero)
    }

    /// For built-ins, m depends on gamma only through gamma(z.x); this
    /// evaluates m given that value. None for custom functionals.
    pub fn m_with_gamma_value(&self, z: ZView<'_>, gamma_at_x: f64) -> Option<f64> {
        match &self.kind {
            Kind::Cov => Some(z.a * (z.y - gamma_at_x)),
            Kind::Trt | Kind::Ctrl => Some(gamma_at_x),
            Kind::Custom { .. } => None,
        }
    }

    /// Scale s such that v_q(z) = s * q(x) for built-ins; None for
    /// custom functionals, which need the dense entrywise path.
    pub fn v_q_scale(&self, z: ZView<'_>) -> Option<f64> {
        match &self.kind {
            Kind::Cov => Some(-z.a),
            Kind::Trt | Kind::Ctrl => Some(1.0),
            Kind::Custom { .. } => None,
        }
    }

    /// v_q block for built-ins: writes s * q-block into `out` and
    /// returns its range; None signals the caller to use `v_q_dense`.
    pub fn v_q_block(
        &self,
        z: ZView<'_>,
        basis: &dyn SeriesBasis,
        out: &mut [f64],
    ) -> Result<Option<Range<usize>>> {
        match self.v_q_scale(z) {
            Some(s) => {
                let range = basis.eval_block(z.x, out)?;
                for v in &mut out[..range.len()] {
                    *v *= s;
                }
                Ok(Some(range))
            }
            None => Ok(None),
        }
    }

    /// v_q(z) with j-th entry m(z, q_j) - m(z, gamma_zero); dense and
    /// generic, correct for any linear functional.
    pub fn v_q_dense(&self, z: ZView<'_>, basis: &dyn SeriesBasis) -> Result<DVector<f64>> {
        let k = basis.len();
        let mut out = DVector::zeros(k);
        if let Some(s) = self.v_q_scale(z) {
            let mut buf = vec![0.0; basis.max_block()];
            let range = basis.eval_block(z.x, &mut buf)?;
            for (off, i) in range.clone().enumerate() {
                out[i] = s * buf[off];
            }
            return Ok(out);
        }
        let m0 = self.m_zero(z);
        for j in 0..k {
            let qj = BasisComponent { basis, j };
            out[j] = self.m_eval(z, &qj) - m0;
        }
        Ok(out)
    }
}

/// One basis function as an XFunction, for the generic v_q path.
struct BasisComponent<'a> {
    basis: &'a dyn SeriesBasis,
    j: usize,
}

impl XFunction for BasisComponent<'_> {
    fn eval(&self, x: &[f64]) -> f64 {
        match self.basis.evaluate(x) {
            Ok(v) => v[self.j],
            Err(_) => f64::NAN,
        }
    }
}

/// Estimand selected by name: a single functional or the treated/
/// control contrast composed downstream.
pub enum EstimandSelection {
    Single(LinearFunctional),
    /// plus minus: estimates theta_plus - theta_minus on shared folds.
    Contrast(LinearFunctional, LinearFunctional),
}

impl EstimandSelection {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "cate" => Ok(EstimandSelection::Contrast(
                LinearFunctional::trt(),
                LinearFunctional::ctrl(),
            )),
            other => LinearFunctional::by_name(other)
                .map(EstimandSelection::Single)
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "unknown estimand {other:?}; expected cov, trt, ctrl, or cate"
                    ))
                }),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            EstimandSelection::Single(f) => f.name(),
            EstimandSelection::Contrast(..) => "cate",
        }
    }
}

/// Finite population over Z with exact enumeration of expectations.
#[derive(Debug, Clone)]
pub struct DiscretePopulation {
    points: Vec<ObservationZ>,
    probs: Vec<f64>,
}

impl DiscretePopulation {
    /// Probabilities must be nonnegative and sum to 1 within 1e-12.
    pub fn new(points: Vec<ObservationZ>, probs: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() != probs.len() {
            return Err(Error::Validation(
                "population needs matching nonempty point and probability lists".into(),
            ));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Validation("population probabilities must be nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if crate::mathx::abs(total - 1.0) > 1e-12 {
            return Err(Error::Validation(format!(
                "population probabilities sum to {total}, expected 1 within 1e-12"
            )));
        }
        Ok(DiscretePopulation { points, probs })
    }

    pub fn points(&self) -> &[ObservationZ] {
        &self.points
    }

    pub fn expectation(&self, mut f: impl FnMut(ZView<'_>) -> f64) -> f64 {
        self.points
            .iter()
            .zip(self.probs.iter())
            .map(|(z, &p)| p * f(z.view()))
            .sum()
    }

    /// True regression gamma_0(x) = E[Y | X=x, J=1], by enumeration.
    pub fn gamma0(&self, fun: &LinearFunctional) -> Result<TabulatedX> {
        let mut keys = Vec::new();
        let mut num = Vec::new();
        let mut den = Vec::new();
        for (z, &p) in self.points.iter().zip(self.probs.iter()) {
            let j = fun.j_indicator(z.a)?;
            if j == 0.0 {
                continue;
            }
            let idx = match keys.iter().position(|k| k == &z.x) {
                Some(i) => i,
                None => {
                    keys.push(z.x.clone());
                    num.push(0.0);
                    den.push(0.0);
                    keys.len() - 1
                }
            };
            num[idx] += p * z.y;
            den[idx] += p;
        }
        if keys.is_empty() {
            return Err(Error::Data(format!(
                "population has no mass with J = 1 for estimand {}",
                fun.name()
            )));
        }
        let values = num
            .iter()
            .zip(den.iter())
            .map(|(&n, &d)| n / d)
            .collect();
        Ok(TabulatedX { keys, values })
    }

    /// True representer alpha_0(x) for the built-ins, by enumeration:
    /// cov -> -E[A|X=x]; trt -> 1/E[A|X=x]; ctrl -> 1/E[1-A|X=x].
    pub fn alpha0(&self, fun: &LinearFunctional) -> Result<TabulatedX> {
        if !fun.is_builtin() {
            return Err(Error::Validation(
                "alpha0 enumeration is defined for built-in estimands only".into(),
            ));
        }
        let mut keys: Vec<Vec<f64>> = Vec::new();
        let mut a_mass = Vec::new();
        let mut mass = Vec::new();
        for (z, &p) in self.points.iter().zip(self.probs.iter()) {
            let idx = match keys.iter().position(|k| k == &z.x) {
                Some(i) => i,
                None => {
                    keys.push(z.x.clone());
                    a_mass.push(0.0);
                    mass.push(0.0);
                    keys.len() - 1
                }
            };
            a_mass[idx] += p * z.a;
            mass[idx] += p;
        }
        let values: Vec<f64> = keys
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let abar = a_mass[i] / mass[i];
                match fun.name() {
                    "cov" => -abar,
                    "trt" => 1.0 / abar,
                    _ => 1.0 / (1.0 - abar),
                }
            })
            .collect();
        Ok(TabulatedX { keys, values })
    }

    /// E[J q q^T] under the population.
    pub fn gram_p(&self, fun: &LinearFunctional, basis: &dyn SeriesBasis) -> Result<DMatrix<f64>> {
        let k = basis.len();
        let mut g = DMatrix::zeros(k, k);
        for (z, &p) in self.points.iter().zip(self.probs.iter()) {
            let j = fun.j_indicator(z.a)?;
            if j == 0.0 {
                continue;
            }
            let q = basis.evaluate(&z.x)?;
            g.ger(p, &q, &q, 1.0);
        }
        Ok(g)
    }

    /// E[J q f(X)] under the population.
    pub fn moment_p(
        &self,
        fun: &LinearFunctional,
        basis: &dyn SeriesBasis,
        f: &dyn XFunction,
    ) -> Result<DVector<f64>> {
        let mut m = DVector::zeros(basis.len());
        for (z, &p) in self.points.iter().zip(self.probs.iter()) {
            let j = fun.j_indicator(z.a)?;
            if j == 0.0 {
                continue;
            }
            let q = basis.evaluate(&z.x)?;
            m += q * (p * f.eval(&z.x));
        }
        Ok(m)
    }

    /// Least-squares projection of f onto q over the J=1 subpopulation:
    /// argmin_d E[(f(X) - q(X)^T d)^2 | J = 1].
    pub fn projection_subpop(
        &self,
        fun: &LinearFunctional,
        basis: &dyn SeriesBasis,
        f: &dyn XFunction,
    ) -> Result<DVector<f64>> {
        let k = basis.len();
        let mut g = DMatrix::zeros(k, k);
        let mut m = DVector::zeros(k);
        let mut j_mass = 0.0;
        for (z, &p) in self.points.iter().zip(self.probs.iter()) {
            let j = fun.j_indicator(z.a)?;
            if j == 0.0 {
                continue;
            }
            j_mass += p;
            let q = basis.evaluate(&z.x)?;
            g.ger(p, &q, &q, 1.0);
            m += q * (p * f.eval(&z.x));
        }
        if j_mass <= 0.0 {
            return Err(Error::Data("population has no mass with J = 1".into()));
        }
        // Conditioning on J=1 rescales both moments by 1/P(J=1); the
        // projection is unchanged, so solve on the unscaled moments.
        g /= j_mass;
        m /= j_mass;
        let (sol, _) = crate::linalg::solve_spd_policy(&g, &m)?;
        Ok(sol)
    }

    /// Full-population projection onto p = J q: E(p p^T)^{-1} E(p f).
    pub fn projection_fullpop(
        &self,
        fun: &LinearFunctional,
        basis: &dyn SeriesBasis,
        f: &dyn XFunction,
    ) -> Result<DVector<f64>> {
        let g = self.gram_p(fun, basis)?;
        let m = self.moment_p(fun, basis, f)?;
        let (sol, _) = crate::linalg::solve_spd_policy(&g, &m)?;
        Ok(sol)
    }
}

/// Function tabulated on a finite covariate support; NaN off-support.
#[derive(Debug, Clone)]
pub struct TabulatedX {
    keys: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl TabulatedX {
    pub fn values(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.keys
            .iter()
            .map(|k| k.as_slice())
            .zip(self.values.iter().copied())
            .map(|(k, v)| (k, v))
    }
}

impl XFunction for TabulatedX {
    fn eval(&self, x: &[f64]) -> f64 {
        match self.keys.iter().position(|k| k.as_slice() == x) {
            Some(i) => self.values[i],
            None => f64::NAN,
        }
    }
}

/// Residual of the debiasing identity on a finite population:
/// E[m(Z,gamma) - m(Z,gamma_0)] - E[alpha_0(X) J (gamma(X) - Y)],
/// with gamma_0 enumerated from the population itself. Zero (to
/// enumeration precision) iff alpha_0 is the true representer.
pub fn debias_identity_check(
    fun: &LinearFunctional,
    pop: &DiscretePopulation,
    gamma: &dyn XFunction,
    alpha0: &dyn XFunction,
) -> Result<f64> {
    let gamma0 = pop.gamma0(fun)?;
    let mut err: Option<Error> = None;
    let lhs = pop.expectation(|z| fun.m_eval(z, gamma) - fun.m_eval(z, &gamma0));
    let rhs = pop.expectation(|z| match fun.j_indicator(z.a) {
        Ok(j) => alpha0.eval(z.x) * j * (gamma.eval(z.x) - z.y),
        Err(e) => {
            err = Some(e);
            f64::NAN
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(lhs - rhs),
    }
}

/// Residual of the linear-form identity on a finite population:
/// E[m(Z,gamma) - m(Z,gamma_zero)] - E[alpha_0(X) J gamma(X)].
pub fn linear_form_residual(
    fun: &LinearFunctional,
    pop: &DiscretePopulation,
    gamma: &dyn XFunction,
    alpha0: &dyn XFunction,
) -> Result<f64> {
    let mut err: Option<Error> = None;
    let lhs = pop.expectation(|z| fun.m_eval(z, gamma) - fun.m_zero(z));
    let rhs = pop.expectation(|z| match fun.j_indicator(z.a) {
        Ok(j) => alpha0.eval(z.x) * j * gamma.eval(z.x),
        Err(e) => {
            err = Some(e);
            f64::NAN
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(lhs - rhs),
    }
}
