//! Command implementations: dispatch a resolved run configuration,
//! write its artifacts, and print a one-screen summary.

use std::path::PathBuf;

use drcf_core::{
    bias_decomposition_cov, estimator_diagnostics, rate_experiment, run_selection,
    simulate_experiment, BasisSpec, CrossFitScheme, Dataset, Error, EstimandSelection,
    MCReport, Result, SegmentsRule,
};

use crate::config::{CommandConfig, EstimateConfig, OutputFormat, RunConfig, TargetsSpec};
use crate::data::{ingest_csv, CsvData};
use crate::parallel::RayonExecutor;
use crate::report::{
    cells_csv, estimates_csv, estimates_json, estimates_summary, report_json, summary,
    EstimateRow,
};

/// Process exit code for an error: 2 config, 3 data, 4 numeric.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation(_) => 2,
        Error::Data(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn write_artifact(path: &PathBuf, content: &str) -> Result<()> {
    std::fs::write(path, content)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

fn write_experiment(mut report: MCReport, run: &RunConfig) -> Result<()> {
    // The experiment's own echo wins on shared keys; the CLI layer
    // contributes the keys the core does not know about.
    for (k, v) in &run.echo {
        report.config_echo.entry(k.clone()).or_insert_with(|| v.clone());
    }
    let (name, content) = match run.common.format {
        OutputFormat::Csv => ("report.csv", cells_csv(&report)),
        OutputFormat::Json => ("report.json", report_json(&report)?),
    };
    let path = run.common.out_dir.join(name);
    write_artifact(&path, &content)?;
    print!("{}", summary(&report));
    println!("wrote {}", path.display());
    Ok(())
}

/// Run a resolved configuration end to end.
pub fn execute(run: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&run.common.out_dir).map_err(|e| {
        Error::Data(format!(
            "cannot create output directory {}: {e}",
            run.common.out_dir.display()
        ))
    })?;
    let exec = RayonExecutor::new(run.common.threads)?;
    match &run.command {
        CommandConfig::Simulate(cfg) => write_experiment(simulate_experiment(cfg, &exec)?, run),
        CommandConfig::BiasDecomp(cfg) => {
            write_experiment(bias_decomposition_cov(cfg, &exec)?, run)
        }
        CommandConfig::Rates(cfg) => write_experiment(rate_experiment(cfg, &exec)?, run),
        CommandConfig::Diagnostics(cfg) => write_experiment(estimator_diagnostics(cfg, &exec)?, run),
        CommandConfig::Estimate(cfg) => run_estimate(cfg, run),
    }
}

/// Segment count whose total dictionary size fits the budget of the
/// one-dimensional `coef * n^(1/3)` rule. The rule is calibrated for a
/// single covariate; in higher dimensions the cell count is the
/// per-axis count to the power of the dimension, so spending the same
/// number of basis functions buys fewer segments per axis.
fn auto_segments(coef: f64, n_fold: usize, dim: usize, degree: usize) -> usize {
    let rule = SegmentsRule {
        coef,
        exponent: 1.0 / 3.0,
        min_segments: 2,
    };
    let budget = BasisSpec::new(1, rule.segments_for(n_fold), degree).basis_size();
    let mut segments = rule.min_segments;
    while BasisSpec::new(dim, segments + 1, degree).basis_size() <= budget {
        segments += 1;
    }
    segments
}

fn run_estimate(cfg: &EstimateConfig, run: &RunConfig) -> Result<()> {
    let data = ingest_csv(&cfg.input)?;
    let CsvData {
        d_x,
        xs_unit,
        a,
        y,
        rescale,
    } = data;
    let n = a.len();

    let c_idx: Vec<usize> = match &cfg.c_columns {
        Some(cols) => {
            let mut idx = Vec::with_capacity(cols.len());
            for &col in cols {
                if col > d_x {
                    return Err(Error::Validation(format!(
                        "c.indices entry {col} is out of range: the dataset has {d_x} covariate columns"
                    )));
                }
                idx.push(col - 1);
            }
            idx
        }
        None => (0..d_x).collect(),
    };
    let dataset = Dataset::new(d_x, xs_unit, a, y, c_idx.clone())?;
    let c_labels: Vec<String> = c_idx.iter().map(|&j| format!("x{}", j + 1)).collect();

    let folds = cfg.scheme_kind.n_folds();
    let n_fold = (n / folds).max(1);
    let q_segments = cfg
        .q_segments
        .unwrap_or_else(|| auto_segments(0.8, n_fold, d_x, cfg.q_degree));
    let b_segments = cfg
        .b_segments
        .unwrap_or_else(|| auto_segments(0.5, n_fold, c_idx.len(), cfg.b_degree));
    let q_spec = BasisSpec::new(d_x, q_segments, cfg.q_degree);
    let b_spec = BasisSpec::new(c_idx.len(), b_segments, cfg.b_degree);
    q_spec.validate()?;
    b_spec.validate()?;
    for (label, size) in [("k_n", q_spec.basis_size()), ("r_n", b_spec.basis_size())] {
        if size >= n_fold {
            return Err(Error::Validation(format!(
                "Limited basis growth violated: {label} = {size} must stay below the \
                 per-fold sample size {n_fold} (n = {n} over {folds} folds)"
            )));
        }
    }

    // Targets arrive in original units (or as a unit-cube grid) and
    // are mapped through the recorded rescale of the C columns.
    let (targets_unit, targets_orig): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match &cfg.targets {
        TargetsSpec::List(points) => {
            let mut unit = Vec::with_capacity(points.len());
            for (i, p) in points.iter().enumerate() {
                if p.len() != c_idx.len() {
                    return Err(Error::Validation(format!(
                        "target {} has {} coordinates but the conditioning vector has dimension {}",
                        i + 1,
                        p.len(),
                        c_idx.len()
                    )));
                }
                let mut u = Vec::with_capacity(p.len());
                for (&xcol, &v) in c_idx.iter().zip(p) {
                    let r = rescale.ranges[xcol];
                    if v < r.lo || v > r.hi {
                        return Err(Error::Validation(format!(
                            "target {} coordinate x{} = {v} lies outside the observed range [{}, {}]",
                            i + 1,
                            xcol + 1,
                            r.lo,
                            r.hi
                        )));
                    }
                    u.push(rescale.to_unit(xcol, v));
                }
                unit.push(u);
            }
            (unit, points.clone())
        }
        TargetsSpec::Grid(k) => {
            let unit = TargetsSpec::Grid(*k).expand_unit(c_idx.len())?;
            let orig = unit
                .iter()
                .map(|p| vec![rescale.to_original(c_idx[0], p[0])])
                .collect();
            (unit, orig)
        }
    };

    let sel = EstimandSelection::by_name(&cfg.estimand)?;
    let mut scheme = CrossFitScheme::new(cfg.scheme_kind, cfg.seed);
    if let Some(it) = cfg.iterations {
        scheme = scheme.with_iterations(it);
    }
    let estimate = run_selection(&dataset, &sel, &q_spec, &b_spec, &scheme, &targets_unit)?;

    let rows: Vec<EstimateRow> = estimate
        .estimates
        .iter()
        .enumerate()
        .map(|(i, t)| EstimateRow {
            target_id: t.target_id,
            coords: targets_orig[i].clone(),
            coords_unit: targets_unit[i].clone(),
            value: t.value,
            no_support: t.no_support,
            flagged: t.flagged,
        })
        .collect();

    // Runtime-resolved values overwrite their "auto" placeholders.
    let mut echo = run.echo.clone();
    echo.insert("rows".into(), n.to_string());
    echo.insert("d_x".into(), d_x.to_string());
    echo.insert("basis.q.segments".into(), q_segments.to_string());
    echo.insert("basis.b.segments".into(), b_segments.to_string());
    echo.insert("k_n".into(), q_spec.basis_size().to_string());
    echo.insert("r_n".into(), b_spec.basis_size().to_string());
    echo.insert(
        "c.indices".into(),
        c_idx
            .iter()
            .map(|&j| (j + 1).to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    for (j, r) in rescale.ranges.iter().enumerate() {
        echo.insert(format!("range.x{}", j + 1), format!("{}..{}", r.lo, r.hi));
    }

    let (name, content) = match run.common.format {
        OutputFormat::Csv => ("estimates.csv", estimates_csv(&echo, &c_labels, &rows)),
        OutputFormat::Json => ("estimates.json", estimates_json(&echo, &c_labels, &rows)?),
    };
    let path = run.common.out_dir.join(name);
    write_artifact(&path, &content)?;

    println!(
        "rows={n}  covariates={d_x}  estimand={}  scheme={}  k_n={}  r_n={}",
        cfg.estimand,
        cfg.scheme_kind.name(),
        q_spec.basis_size(),
        b_spec.basis_size()
    );
    for (j, r) in rescale.ranges.iter().enumerate() {
        println!("x{} observed range [{}, {}]", j + 1, r.lo, r.hi);
    }
    print!("{}", estimates_summary(&c_labels, &rows));
    println!("wrote {}", path.display());
    Ok(())
}
