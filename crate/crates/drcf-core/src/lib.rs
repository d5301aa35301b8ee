//! Doubly robust estimation of conditional linear functionals with
//! series (regression spline) nuisances.
//!
//! The estimators target theta(c) = E[m(Z, gamma)| C = c], where the
//! moment m is linear in an unknown regression gamma and C is a
//! subvector of the covariates. Built-in moments cover conditional
//! average outcomes under treatment or control, their contrast (the
//! conditional average treatment effect), and the conditional
//! covariance between treatment and outcome.
//!
//! The pipeline has two stages. The first stage fits gamma by least
//! squares on a spline dictionary and a representer alpha from the
//! moment's Riesz representation on the same dictionary, then forms
//! the doubly robust pseudo-outcome
//!
//! ```text
//! f(z) = m(z, gamma) + alpha(x) J(a) (y - gamma(x))
//! ```
//!
//! whose conditional mean is insensitive to first-order errors in
//! either nuisance. The second stage regresses the pseudo-outcomes on
//! a spline basis in C. Sample splitting between the two nuisances and
//! the evaluation data ([`crossfit`]) removes own-observation and
//! nuisance-coupling bias terms; the [`simlab`] module measures those
//! terms and the resulting convergence rates by Monte Carlo.
//!
//! The crate is `no_std`-compatible (with `alloc`); file formats, the
//! command line, and parallel execution live in the companion `drcf`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod basis;
pub mod crossfit;
pub mod data;
pub mod error;
pub mod estimands;
pub mod exec;
pub mod linalg;
pub mod mathx;
pub mod nuisance;
pub mod quad;
pub mod second_stage;
pub mod simlab;

pub use basis::{build_basis, gram, whiten, BasisSpec, GramMatrix, SeriesBasis, Whitener};
pub use crossfit::{
    run, run_contrast, run_selection, split, split_partition, Combine, CrossFitEstimate,
    CrossFitScheme, IterationEstimate, SchemeKind,
};
pub use data::Dataset;
pub use error::{Error, Result};
pub use estimands::{EstimandSelection, LinearFunctional, XFunction, ZView};
pub use exec::{Executor, SerialExecutor};
pub use nuisance::{
    diagnostics, fit_alpha, fit_gamma, project_population, DiagnosticsInput, FitKind, FitMeta,
    NuisanceFit, PopulationMoments, Prediction, SplitTag, StabilityDiagnostics,
};
pub use second_stage::{
    fit_theta, fit_theta_from, oracle_theta, pseudo_outcome_oracle, weights, PseudoOutcomeModel,
    SecondStageFit, ThetaEstimate,
};
pub use simlab::{
    bias_decomposition_cov, cate_rates_default, dgp_cate_1d, dgp_hmoments_2d, dgp_indicator_1d,
    dgp_rates_1d, dgp_well_specified_cov, diagnostics_default, estimator_diagnostics, mix_seed,
    oracle_estimate, rate_experiment, rates_default, reproducing_residual, rng_for_rep,
    simulate_default, simulate_experiment, true_theta, true_theta_selection, BiasDecompConfig,
    DgpSpec, DiagnosticsConfig, DiagnosticsSample, FnSpec, IndicatorFreq, MCReport, McCell,
    NoiseModel, QuadPop, RateConfig, RateEstimator, RateFit, SegmentsRule, SimulateConfig,
    TreatmentModel, TruthTarget,
};
