//! Report emission. CSV artifacts carry the fully resolved config as
//! `# key=value` comment lines followed by one flat table (plot-ready);
//! JSON artifacts carry the full nested report. All floats use
//! shortest round-trip formatting, so identical runs give identical
//! bytes.

use std::collections::BTreeMap;

use drcf_core::{Error, MCReport, Result};

fn echo_lines(echo: &BTreeMap<String, String>) -> String {
    let mut s = String::new();
    for (k, v) in echo {
        s.push_str(&format!("# {k}={v}\n"));
    }
    s
}

/// The Monte Carlo cells of a report as CSV.
pub fn cells_csv(report: &MCReport) -> String {
    let mut s = echo_lines(&report.config_echo);
    s.push_str("scheme,estimand,n,k_n,r_n,target_id,bias,sd,rmse,se_bias,reps\n");
    for c in &report.cells {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            c.scheme, c.estimand, c.n, c.k_n, c.r_n, c.target_id, c.bias, c.sd, c.rmse,
            c.se_bias, c.reps
        ));
    }
    s
}

/// The full nested report as pretty JSON.
pub fn report_json(report: &MCReport) -> Result<String> {
    serde_json::to_string_pretty(report)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Numeric(format!("cannot serialize the report to JSON: {e}")))
}

/// One-screen summary printed to stdout after a run.
pub fn summary(report: &MCReport) -> String {
    let mut s = String::new();
    if !report.cells.is_empty() {
        s.push_str(&format!(
            "{:<7} {:<9} {:>7} {:>5} {:>5} {:>7} {:>11} {:>10} {:>10} {:>10} {:>6}\n",
            "scheme", "estimand", "n", "k_n", "r_n", "target", "bias", "sd", "rmse", "se(bias)",
            "reps"
        ));
        for c in &report.cells {
            s.push_str(&format!(
                "{:<7} {:<9} {:>7} {:>5} {:>5} {:>7} {:>11.5} {:>10.5} {:>10.5} {:>10.5} {:>6}\n",
                c.scheme, c.estimand, c.n, c.k_n, c.r_n, c.target_id, c.bias, c.sd, c.rmse,
                c.se_bias, c.reps
            ));
        }
    }
    if !report.rate_fits.is_empty() {
        s.push_str("log-log slopes (rmse against n):\n");
        for f in &report.rate_fits {
            let target = f
                .target_id
                .map(|t| t.to_string())
                .unwrap_or_else(|| "pooled".into());
            s.push_str(&format!(
                "  scheme={} estimand={} target={target}  slope={:.4} +-{:.4}  theory={:.4}\n",
                f.scheme, f.estimand, f.slope, f.ci_half_width, f.theory_exponent
            ));
        }
    }
    if let Some(d) = &report.diagnostics {
        s.push_str(&format!(
            "moment diagnostics: n={} k_n={} reps={}  max |mean|/se = {:.3}\n",
            d.n, d.k_n, d.reps, d.max_abs_t
        ));
        if !d.indicator_freqs.is_empty() {
            s.push_str("eigenvalue indicator frequency:");
            for f in &d.indicator_freqs {
                s.push_str(&format!("  n={} freq={:.3}", f.n, f.freq));
            }
            s.push('\n');
        }
        s.push_str(&format!(
            "max reproducing residual = {:.3e}\n",
            d.reproducing_residual_max
        ));
    }
    s
}

/// One estimated target of the `estimate` command: coordinates in the
/// data's original units and on the unit cube, the estimate, and its
/// quality flags.
#[derive(Debug, Clone)]
pub struct EstimateRow {
    pub target_id: usize,
    pub coords: Vec<f64>,
    pub coords_unit: Vec<f64>,
    pub value: f64,
    pub no_support: bool,
    pub flagged: bool,
}

/// Estimate table as CSV; `c_labels` names the conditioning columns
/// (e.g. "x1","x3").
pub fn estimates_csv(
    echo: &BTreeMap<String, String>,
    c_labels: &[String],
    rows: &[EstimateRow],
) -> String {
    let mut s = echo_lines(echo);
    s.push_str("target_id");
    for label in c_labels {
        s.push_str(&format!(",{label}"));
    }
    s.push_str(",theta,no_support,flagged\n");
    for r in rows {
        s.push_str(&format!("{}", r.target_id));
        for v in &r.coords {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{},{},{}\n", r.value, r.no_support, r.flagged));
    }
    s
}

/// Estimate table as JSON, embedding the config echo. NaN estimates
/// (targets without support) become null.
pub fn estimates_json(
    echo: &BTreeMap<String, String>,
    c_labels: &[String],
    rows: &[EstimateRow],
) -> Result<String> {
    let mut root = serde_json::Map::new();
    root.insert(
        "config".into(),
        serde_json::to_value(echo)
            .map_err(|e| Error::Numeric(format!("cannot serialize the config echo: {e}")))?,
    );
    let mut list = Vec::with_capacity(rows.len());
    for r in rows {
        let mut obj = serde_json::Map::new();
        obj.insert("target_id".into(), r.target_id.into());
        let mut coords = serde_json::Map::new();
        for (label, (&orig, &unit)) in c_labels
            .iter()
            .zip(r.coords.iter().zip(r.coords_unit.iter()))
        {
            let mut pair = serde_json::Map::new();
            pair.insert("original".into(), orig.into());
            pair.insert("unit".into(), unit.into());
            coords.insert(label.clone(), pair.into());
        }
        obj.insert("target".into(), coords.into());
        obj.insert(
            "theta".into(),
            if r.value.is_finite() {
                r.value.into()
            } else {
                serde_json::Value::Null
            },
        );
        obj.insert("no_support".into(), r.no_support.into());
        obj.insert("flagged".into(), r.flagged.into());
        list.push(serde_json::Value::Object(obj));
    }
    root.insert("estimates".into(), list.into());
    serde_json::to_string_pretty(&serde_json::Value::Object(root))
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| Error::Numeric(format!("cannot serialize the estimates to JSON: {e}")))
}

/// One-screen summary of an estimate run.
pub fn estimates_summary(c_labels: &[String], rows: &[EstimateRow]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<9} {:<24} {:>12}  {}\n",
        "target",
        format!("({})", c_labels.join(",")),
        "theta",
        "flags"
    ));
    for r in rows {
        let coords = r
            .coords
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(",");
        let mut flags = Vec::new();
        if r.no_support {
            flags.push("no-support");
        }
        if r.flagged {
            flags.push("flagged");
        }
        let flags = if flags.is_empty() {
            "-".to_string()
        } else {
            flags.join(",")
        };
        s.push_str(&format!(
            "{:<9} {:<24} {:>12.6}  {}\n",
            r.target_id, coords, r.value, flags
        ));
    }
    s
}
