//! Run configuration: a flat key=value file with dotted keys, merged
//! with command-line flag overrides into one fully resolved, validated
//! config per command.
//!
//! Resolution is layered: command defaults, then config-file entries
//! in file order, then flags. Later entries override earlier ones.
//! Every key is checked against the command's whitelist and every
//! value is validated with a message citing where it came from, so a
//! typo fails the run instead of silently running the default. The
//! resolved config is echoed into every artifact; the echoed lines are
//! themselves valid config syntax, so an artifact header can be pasted
//! back into a file to reproduce the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use drcf_core::{
    cate_rates_default, dgp_cate_1d, dgp_hmoments_2d, dgp_indicator_1d, dgp_rates_1d,
    diagnostics_default, rates_default, simulate_default, BasisSpec, BiasDecompConfig,
    DgpSpec, DiagnosticsConfig, Error, LinearFunctional, RateConfig, RateEstimator, Result,
    SchemeKind, SimulateConfig,
};

/// Names of the five subcommands, used in error messages and echoes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandName {
    Estimate,
    Simulate,
    BiasDecomp,
    Rates,
    Diagnostics,
}

impl CommandName {
    pub fn as_str(&self) -> &'static str {
        match self {
            CommandName::Estimate => "estimate",
            CommandName::Simulate => "simulate",
            CommandName::BiasDecomp => "bias-decomp",
            CommandName::Rates => "rates",
            CommandName::Diagnostics => "diagnostics",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Validation(format!(
                "unknown format {other:?}; expected csv or json"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

/// Options shared by every command.
#[derive(Debug, Clone)]
pub struct CommonOpts {
    pub out_dir: PathBuf,
    pub format: OutputFormat,
    /// None = machine parallelism.
    pub threads: Option<usize>,
}

impl Default for CommonOpts {
    fn default() -> Self {
        CommonOpts {
            out_dir: PathBuf::from("."),
            format: OutputFormat::Csv,
            threads: None,
        }
    }
}

/// Target points: an explicit list, or an evenly spaced interior grid
/// (cell midpoints (j+1/2)/K) for one-dimensional conditioning.
#[derive(Debug, Clone, PartialEq)]
pub enum TargetsSpec {
    List(Vec<Vec<f64>>),
    Grid(usize),
}

impl TargetsSpec {
    /// Expand a grid over the unit interval; lists pass through.
    pub fn expand_unit(&self, c_dim: usize) -> Result<Vec<Vec<f64>>> {
        match self {
            TargetsSpec::List(points) => {
                for (i, p) in points.iter().enumerate() {
                    if p.len() != c_dim {
                        return Err(Error::Validation(format!(
                            "target {} has {} coordinates but the conditioning vector has dimension {c_dim}",
                            i + 1,
                            p.len()
                        )));
                    }
                }
                Ok(points.clone())
            }
            TargetsSpec::Grid(k) => {
                if c_dim != 1 {
                    return Err(Error::Validation(format!(
                        "targets.grid needs a one-dimensional conditioning vector, got dimension {c_dim}"
                    )));
                }
                Ok((0..*k).map(|j| vec![(j as f64 + 0.5) / *k as f64]).collect())
            }
        }
    }
}

/// Configuration of the `estimate` command. Basis segment counts left
/// as None are resolved from the per-fold sample size after the data
/// is read; targets are in the data's original units.
#[derive(Debug, Clone)]
pub struct EstimateConfig {
    pub input: PathBuf,
    pub estimand: String,
    pub scheme_kind: SchemeKind,
    pub iterations: Option<usize>,
    pub seed: u64,
    /// 1-based x-column numbers forming the conditioning vector C;
    /// None = all covariates.
    pub c_columns: Option<Vec<usize>>,
    pub q_segments: Option<usize>,
    pub q_degree: usize,
    pub b_segments: Option<usize>,
    pub b_degree: usize,
    pub targets: TargetsSpec,
}

#[derive(Debug, Clone)]
pub enum CommandConfig {
    Estimate(EstimateConfig),
    Simulate(SimulateConfig),
    BiasDecomp(BiasDecompConfig),
    Rates(RateConfig),
    Diagnostics(DiagnosticsConfig),
}

/// Fully resolved run: the command's own config, shared options, and
/// the echo of every resolved key.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: CommandConfig,
    pub common: CommonOpts,
    pub echo: BTreeMap<String, String>,
}

/// One key=value entry with its origin ("config line 3", "flag
/// --scheme") for error messages.
#[derive(Debug, Clone)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
    pub origin: String,
}

impl KeyValue {
    pub fn new(key: &str, value: String, origin: String) -> Self {
        KeyValue {
            key: key.to_string(),
            value,
            origin,
        }
    }
}

/// Parse a flat config file: one `key = value` per line, `#` comments,
/// blank lines ignored. Duplicate keys within a file are rejected (an
/// override belongs in a flag or a different file, not two lines of
/// the same manifest).
pub fn parse_config_file(path: &Path) -> Result<Vec<KeyValue>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Validation(format!("cannot read config file {}: {e}", path.display()))
    })?;
    let mut pairs = Vec::new();
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Validation(format!(
                "config line {line_no}: expected key=value, got {line:?}"
            ))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(Error::Validation(format!(
                "config line {line_no}: empty key"
            )));
        }
        if let Some(first) = seen.insert(key.to_string(), line_no) {
            return Err(Error::Validation(format!(
                "config line {line_no}: duplicate key `{key}` (first set on line {first})"
            )));
        }
        pairs.push(KeyValue {
            key: key.to_string(),
            value: value.to_string(),
            origin: format!("config line {line_no}"),
        });
    }
    Ok(pairs)
}

fn bad(kv: &KeyValue, detail: &str) -> Error {
    Error::Validation(format!(
        "invalid value for `{}` ({}): {detail}",
        kv.key, kv.origin
    ))
}

fn unknown(command: CommandName, kv: &KeyValue) -> Error {
    Error::Validation(format!(
        "unknown key `{}` for command `{}` ({})",
        kv.key,
        command.as_str(),
        kv.origin
    ))
}

fn parse_usize(kv: &KeyValue) -> Result<usize> {
    kv.value
        .parse::<usize>()
        .map_err(|_| bad(kv, &format!("{:?} is not a nonnegative integer", kv.value)))
}

fn parse_u64(kv: &KeyValue) -> Result<u64> {
    kv.value
        .parse::<u64>()
        .map_err(|_| bad(kv, &format!("{:?} is not a nonnegative integer", kv.value)))
}

fn parse_f64(kv: &KeyValue) -> Result<f64> {
    let v = kv
        .value
        .parse::<f64>()
        .map_err(|_| bad(kv, &format!("{:?} is not a number", kv.value)))?;
    if !v.is_finite() {
        return Err(bad(kv, "value must be finite"));
    }
    Ok(v)
}

fn parse_usize_list(kv: &KeyValue) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in kv.value.split(',') {
        let part = part.trim();
        out.push(part.parse::<usize>().map_err(|_| {
            bad(kv, &format!("{part:?} is not a nonnegative integer"))
        })?);
    }
    if out.is_empty() {
        return Err(bad(kv, "list is empty"));
    }
    Ok(out)
}

/// Points separated by `;`, coordinates within a point by `,`:
/// `0.25;0.5;0.75` or `0.2,0.3;0.7,0.8`.
fn parse_targets(kv: &KeyValue) -> Result<Vec<Vec<f64>>> {
    let mut points = Vec::new();
    for part in kv.value.split(';') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let mut point = Vec::new();
        for coord in part.split(',') {
            let coord = coord.trim();
            let v = coord
                .parse::<f64>()
                .map_err(|_| bad(kv, &format!("{coord:?} is not a number")))?;
            if !v.is_finite() {
                return Err(bad(kv, "coordinates must be finite"));
            }
            point.push(v);
        }
        points.push(point);
    }
    if points.is_empty() {
        return Err(bad(kv, "no target points given"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(bad(kv, "all target points must have the same dimension"));
    }
    Ok(points)
}

fn parse_scheme(kv: &KeyValue) -> Result<SchemeKind> {
    SchemeKind::parse(&kv.value).map_err(|e| bad(kv, e.message()))
}

fn parse_scheme_list(kv: &KeyValue) -> Result<Vec<SchemeKind>> {
    let mut out = Vec::new();
    for part in kv.value.split(',') {
        let part = part.trim();
        out.push(SchemeKind::parse(part).map_err(|e| bad(kv, e.message()))?);
    }
    if out.is_empty() {
        return Err(bad(kv, "list is empty"));
    }
    Ok(out)
}

fn parse_estimators(kv: &KeyValue) -> Result<Vec<RateEstimator>> {
    let mut out = Vec::new();
    for part in kv.value.split(',') {
        let part = part.trim();
        if part == "oracle" {
            out.push(RateEstimator::Oracle);
        } else {
            let kind = SchemeKind::parse(part).map_err(|_| {
                bad(kv, &format!("{part:?} is not oracle, none, 2way, or 3way"))
            })?;
            out.push(RateEstimator::Scheme(kind));
        }
    }
    if out.is_empty() {
        return Err(bad(kv, "list is empty"));
    }
    Ok(out)
}

fn parse_dgp(kv: &KeyValue) -> Result<(&'static str, DgpSpec)> {
    match kv.value.as_str() {
        "cate-1d" => Ok(("cate-1d", dgp_cate_1d())),
        "rates-1d" => Ok(("rates-1d", dgp_rates_1d())),
        "hmoments-2d" => Ok(("hmoments-2d", dgp_hmoments_2d())),
        "indicator-1d" => Ok(("indicator-1d", dgp_indicator_1d())),
        other => Err(bad(
            kv,
            &format!("unknown DGP {other:?}; expected cate-1d, rates-1d, hmoments-2d, or indicator-1d"),
        )),
    }
}

fn parse_estimand_name(kv: &KeyValue) -> Result<String> {
    match kv.value.as_str() {
        "cov" | "trt" | "ctrl" | "cate" => Ok(kv.value.clone()),
        other => Err(bad(
            kv,
            &format!("unknown estimand {other:?}; expected cov, trt, ctrl, or cate"),
        )),
    }
}

/// Apply a shared key; returns false when the key is not shared.
fn apply_common(common: &mut CommonOpts, kv: &KeyValue) -> Result<bool> {
    match kv.key.as_str() {
        "out.dir" => {
            if kv.value.is_empty() {
                return Err(bad(kv, "empty path"));
            }
            common.out_dir = PathBuf::from(&kv.value);
        }
        "format" => common.format = OutputFormat::parse(&kv.value).map_err(|e| bad(kv, e.message()))?,
        "threads" => {
            // "auto" (the echoed default) = machine parallelism.
            if kv.value == "auto" {
                common.threads = None;
            } else {
                let t = parse_usize(kv)?;
                if t == 0 {
                    return Err(bad(kv, "threads must be at least 1"));
                }
                common.threads = Some(t);
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn join_floats(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn join_usizes(v: &[usize]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn join_targets(points: &[Vec<f64>]) -> String {
    points
        .iter()
        .map(|p| join_floats(p))
        .collect::<Vec<_>>()
        .join(";")
}

fn echo_common(echo: &mut BTreeMap<String, String>, command: CommandName, common: &CommonOpts) {
    echo.insert("command".into(), command.as_str().into());
    echo.insert("out.dir".into(), common.out_dir.display().to_string());
    echo.insert("format".into(), common.format.as_str().into());
    echo.insert(
        "threads".into(),
        common
            .threads
            .map(|t| t.to_string())
            .unwrap_or_else(|| "auto".into()),
    );
}

fn growth_check(label: &str, k: usize, n: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::Validation(format!(
            "Limited basis growth violated: {label} = {k} must satisfy 0 < {label} < n = {n}"
        )));
    }
    Ok(())
}

/// Merge defaults, file entries, and flag overrides into a validated
/// run configuration for `command`.
pub fn resolve(command: CommandName, pairs: &[KeyValue]) -> Result<RunConfig> {
    let mut common = CommonOpts::default();
    match command {
        CommandName::Estimate => resolve_estimate(pairs, &mut common),
        CommandName::Simulate => resolve_simulate(pairs, &mut common),
        CommandName::BiasDecomp => resolve_bias_decomp(pairs, &mut common),
        CommandName::Rates => resolve_rates(pairs, &mut common),
        CommandName::Diagnostics => resolve_diagnostics(pairs, &mut common),
    }
}

fn resolve_estimate(pairs: &[KeyValue], common: &mut CommonOpts) -> Result<RunConfig> {
    let mut input: Option<PathBuf> = None;
    let mut estimand = String::from("cate");
    let mut scheme_kind = SchemeKind::ThreeWay;
    let mut iterations: Option<usize> = None;
    let mut seed = 0u64;
    let mut c_columns: Option<Vec<usize>> = None;
    let mut q_segments: Option<usize> = None;
    let mut q_degree = 1usize;
    let mut b_segments: Option<usize> = None;
    let mut b_degree = 1usize;
    let mut targets: Option<TargetsSpec> = None;

    for kv in pairs {
        if apply_common(common, kv)? {
            continue;
        }
        match kv.key.as_str() {
            "input" => {
                if kv.value.is_empty() {
                    return Err(bad(kv, "empty path"));
                }
                input = Some(PathBuf::from(&kv.value));
            }
            "estimand" => estimand = parse_estimand_name(kv)?,
            "scheme" => scheme_kind = parse_scheme(kv)?,
            "iterations" => {
                let it = parse_usize(kv)?;
                if it == 0 {
                    return Err(bad(kv, "iterations must be at least 1"));
                }
                iterations = Some(it);
            }
            "seed" => seed = parse_u64(kv)?,
            "c.indices" => {
                // "all" (the echoed default) = every covariate column.
                if kv.value == "all" {
                    c_columns = None;
                } else {
                    let cols = parse_usize_list(kv)?;
                    if cols.iter().any(|&c| c == 0) {
                        return Err(bad(kv, "column numbers are 1-based"));
                    }
                    c_columns = Some(cols);
                }
            }
            // "auto" (the echoed default) derives the count from the
            // per-fold sample size once the data is read.
            "basis.q.segments" => {
                q_segments = if kv.value == "auto" {
                    None
                } else {
                    Some(parse_usize(kv)?)
                };
            }
            "basis.q.degree" => q_degree = parse_usize(kv)?,
            "basis.b.segments" => {
                b_segments = if kv.value == "auto" {
                    None
                } else {
                    Some(parse_usize(kv)?)
                };
            }
            "basis.b.degree" => b_degree = parse_usize(kv)?,
            "targets" => targets = Some(TargetsSpec::List(parse_targets(kv)?)),
            "targets.grid" => {
                let k = parse_usize(kv)?;
                if k == 0 {
                    return Err(bad(kv, "grid needs at least one point"));
                }
                targets = Some(TargetsSpec::Grid(k));
            }
            _ => return Err(unknown(CommandName::Estimate, kv)),
        }
    }

    let input = input.ok_or_else(|| {
        Error::Validation("estimate needs an input dataset: set `input` or --input".into())
    })?;
    let targets = targets.ok_or_else(|| {
        Error::Validation("estimate needs target points: set `targets` or --targets".into())
    })?;

    let cfg = EstimateConfig {
        input,
        estimand,
        scheme_kind,
        iterations,
        seed,
        c_columns,
        q_segments,
        q_degree,
        b_segments,
        b_degree,
        targets,
    };

    let mut echo = BTreeMap::new();
    echo_common(&mut echo, CommandName::Estimate, common);
    echo.insert("input".into(), cfg.input.display().to_string());
    echo.insert("estimand".into(), cfg.estimand.clone());
    echo.insert("scheme".into(), cfg.scheme_kind.name().into());
    echo.insert(
        "iterations".into(),
        cfg.iterations
            .unwrap_or_else(|| cfg.scheme_kind.n_folds())
            .to_string(),
    );
    echo.insert("seed".into(), cfg.seed.to_string());
    echo.insert(
        "c.indices".into(),
        cfg.c_columns
            .as_ref()
            .map(|c| join_usizes(c))
            .unwrap_or_else(|| "all".into()),
    );
    echo.insert(
        "basis.q.segments".into(),
        cfg.q_segments.map(|s| s.to_string()).unwrap_or_else(|| "auto".into()),
    );
    echo.insert("basis.q.degree".into(), cfg.q_degree.to_string());
    echo.insert(
        "basis.b.segments".into(),
        cfg.b_segments.map(|s| s.to_string()).unwrap_or_else(|| "auto".into()),
    );
    echo.insert("basis.b.degree".into(), cfg.b_degree.to_string());
    match &cfg.targets {
        TargetsSpec::List(points) => {
            echo.insert("targets".into(), join_targets(points));
        }
        TargetsSpec::Grid(k) => {
            echo.insert("targets.grid".into(), k.to_string());
        }
    }

    Ok(RunConfig {
        command: CommandConfig::Estimate(cfg),
        common: common.clone(),
        echo,
    })
}

fn resolve_simulate(pairs: &[KeyValue], common: &mut CommonOpts) -> Result<RunConfig> {
    let base = simulate_default(0);
    let mut dgp_name = "cate-1d";
    let mut dgp = base.dgp.clone();
    let mut estimand = base.estimand.clone();
    let mut scheme_kind = base.scheme_kind;
    let mut n = base.n;
    let mut q_segments = base.q_spec.segments_per_dim;
    let mut q_degree = base.q_spec.degree;
    let mut b_segments = base.b_spec.segments_per_dim;
    let mut b_degree = base.b_spec.degree;
    let mut targets = TargetsSpec::List(base.targets.clone());
    let mut replications = base.replications;
    let mut seed = 0u64;

    for kv in pairs {
        if apply_common(common, kv)? {
            continue;
        }
        match kv.key.as_str() {
            "dgp" => {
                let (name, spec) = parse_dgp(kv)?;
                dgp_name = name;
                dgp = spec;
            }
            "estimand" => estimand = parse_estimand_name(kv)?,
            "scheme" => scheme_kind = parse_scheme(kv)?,
            "n" => n = parse_usize(kv)?,
            "basis.q.segments" => q_segments = parse_usize(kv)?,
            "basis.q.degree" => q_degree = parse_usize(kv)?,
            "basis.b.segments" => b_segments = parse_usize(kv)?,
            "basis.b.degree" => b_degree = parse_usize(kv)?,
            "targets" => targets = TargetsSpec::List(parse_targets(kv)?),
            "targets.grid" => {
                let k = parse_usize(kv)?;
                if k == 0 {
                    return Err(bad(kv, "grid needs at least one point"));
                }
                targets = TargetsSpec::Grid(k);
            }
            "replications" => replications = parse_usize(kv)?,
            "seed" => seed = parse_u64(kv)?,
            _ => return Err(unknown(CommandName::Simulate, kv)),
        }
    }

    if replications < 2 {
        return Err(Error::Validation(
            "simulation needs at least 2 replications".into(),
        ));
    }
    let c_dim = dgp.c_indices.len();
    let target_points = targets.expand_unit(c_dim)?;
    let q_spec = BasisSpec::new(dgp.d_x, q_segments, q_degree);
    let b_spec = BasisSpec::new(c_dim, b_segments, b_degree);
    q_spec.validate()?;
    b_spec.validate()?;
    growth_check("k_n", q_spec.basis_size(), n)?;
    growth_check("r_n", b_spec.basis_size(), n)?;

    let cfg = SimulateConfig {
        dgp,
        estimand,
        scheme_kind,
        n,
        q_spec,
        b_spec,
        targets: target_points,
        replications,
        seed,
    };

    let mut echo = BTreeMap::new();
    echo_common(&mut echo, CommandName::Simulate, common);
    echo.insert("dgp".into(), dgp_name.into());
    echo.insert("estimand".into(), cfg.estimand.clone());
    echo.insert("scheme".into(), cfg.scheme_kind.name().into());
    echo.insert("n".into(), cfg.n.to_string());
    echo.insert("basis.q.segments".into(), cfg.q_spec.segments_per_dim.to_string());
    echo.insert("basis.q.degree".into(), cfg.q_spec.degree.to_string());
    echo.insert("basis.b.segments".into(), cfg.b_spec.segments_per_dim.to_string());
    echo.insert("basis.b.degree".into(), cfg.b_spec.degree.to_string());
    echo.insert("targets".into(), join_targets(&cfg.targets));
    echo.insert("replications".into(), cfg.replications.to_string());
    echo.insert("seed".into(), cfg.seed.to_string());

    Ok(RunConfig {
        command: CommandConfig::Simulate(cfg),
        common: common.clone(),
        echo,
    })
}

fn resolve_bias_decomp(pairs: &[KeyValue], common: &mut CommonOpts) -> Result<RunConfig> {
    let mut cfg = BiasDecompConfig::default_config(0);

    for kv in pairs {
        if apply_common(common, kv)? {
            continue;
        }
        match kv.key.as_str() {
            "n" => cfg.n_per_fold = parse_usize(kv)?,
            "k.grid" => cfg.k_grid = parse_usize_list(kv)?,
            "schemes" => cfg.schemes = parse_scheme_list(kv)?,
            "scheme" => cfg.schemes = vec![parse_scheme(kv)?],
            "replications" => cfg.replications = parse_usize(kv)?,
            "seed" => cfg.seed = parse_u64(kv)?,
            _ => return Err(unknown(CommandName::BiasDecomp, kv)),
        }
    }

    if cfg.replications < 2 {
        return Err(Error::Validation(
            "bias decomposition needs at least 2 replications".into(),
        ));
    }
    for &k in &cfg.k_grid {
        growth_check("k_n", k, cfg.n_per_fold)?;
    }

    let mut echo = BTreeMap::new();
    echo_common(&mut echo, CommandName::BiasDecomp, common);
    echo.insert("n".into(), cfg.n_per_fold.to_string());
    echo.insert("k.grid".into(), join_usizes(&cfg.k_grid));
    echo.insert(
        "schemes".into(),
        cfg.schemes
            .iter()
            .map(|s| s.name().to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    echo.insert("replications".into(), cfg.replications.to_string());
    echo.insert("seed".into(), cfg.seed.to_string());

    Ok(RunConfig {
        command: CommandConfig::BiasDecomp(cfg),
        common: common.clone(),
        echo,
    })
}

fn resolve_rates(pairs: &[KeyValue], common: &mut CommonOpts) -> Result<RunConfig> {
    // The estimand picks the preset (the CATE study uses its own DGP,
    // target grid, and rules), so scan for it before applying keys.
    let wants_cate = pairs
        .iter()
        .rev()
        .find(|kv| kv.key == "estimand")
        .map(|kv| kv.value == "cate")
        .unwrap_or(false);
    let mut cfg = if wants_cate {
        cate_rates_default(0)
    } else {
        rates_default(0)
    };
    let mut dgp_name = if wants_cate { "cate-1d" } else { "rates-1d" };
    let mut targets_spec: Option<TargetsSpec> = None;

    for kv in pairs {
        if apply_common(common, kv)? {
            continue;
        }
        match kv.key.as_str() {
            "dgp" => {
                let (name, spec) = parse_dgp(kv)?;
                dgp_name = name;
                cfg.dgp = spec;
            }
            "estimand" => cfg.estimand = parse_estimand_name(kv)?,
            "scheme" => {
                let kind = parse_scheme(kv)?;
                cfg.estimators = vec![RateEstimator::Oracle, RateEstimator::Scheme(kind)];
            }
            "estimators" => cfg.estimators = parse_estimators(kv)?,
            "n.grid" => cfg.n_grid = parse_usize_list(kv)?,
            "rule.q.coef" => cfg.q_rule.coef = parse_f64(kv)?,
            "rule.q.exponent" => cfg.q_rule.exponent = parse_f64(kv)?,
            "rule.q.min" => cfg.q_rule.min_segments = parse_usize(kv)?,
            "basis.q.degree" => cfg.q_degree = parse_usize(kv)?,
            "rule.b.coef" => cfg.b_rule.coef = parse_f64(kv)?,
            "rule.b.exponent" => cfg.b_rule.exponent = parse_f64(kv)?,
            "rule.b.min" => cfg.b_rule.min_segments = parse_usize(kv)?,
            "basis.b.degree" => cfg.b_degree = parse_usize(kv)?,
            "targets" => targets_spec = Some(TargetsSpec::List(parse_targets(kv)?)),
            "targets.grid" => {
                let k = parse_usize(kv)?;
                if k == 0 {
                    return Err(bad(kv, "grid needs at least one point"));
                }
                targets_spec = Some(TargetsSpec::Grid(k));
            }
            "replications" => cfg.replications = parse_usize(kv)?,
            "seed" => cfg.seed = parse_u64(kv)?,
            "theory.exponent" => cfg.theory_exponent = parse_f64(kv)?,
            _ => return Err(unknown(CommandName::Rates, kv)),
        }
    }

    let c_dim = cfg.dgp.c_indices.len();
    // Preset targets also go through the expansion so their dimension
    // is checked against a possibly overridden DGP.
    let spec = targets_spec.unwrap_or_else(|| TargetsSpec::List(cfg.targets.clone()));
    cfg.targets = spec.expand_unit(c_dim)?;
    if cfg.replications < 2 {
        return Err(Error::Validation(
            "rate experiment needs at least 2 replications".into(),
        ));
    }
    if cfg.n_grid.len() < 3 {
        return Err(Error::Validation(
            "rate experiment needs an n grid with at least 3 sizes".into(),
        ));
    }
    if cfg.n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation(
            "rate experiment n grid must be strictly increasing".into(),
        ));
    }
    for &n in &cfg.n_grid {
        let q = BasisSpec::new(cfg.dgp.d_x, cfg.q_rule.segments_for(n), cfg.q_degree);
        let b = BasisSpec::new(c_dim, cfg.b_rule.segments_for(n), cfg.b_degree);
        growth_check("k_n", q.basis_size(), n)?;
        growth_check("r_n", b.basis_size(), n)?;
    }

    let mut echo = BTreeMap::new();
    echo_common(&mut echo, CommandName::Rates, common);
    echo.insert("dgp".into(), dgp_name.into());
    echo.insert("estimand".into(), cfg.estimand.clone());
    echo.insert("n.grid".into(), join_usizes(&cfg.n_grid));
    echo.insert("rule.q.coef".into(), format!("{}", cfg.q_rule.coef));
    echo.insert("rule.q.exponent".into(), format!("{}", cfg.q_rule.exponent));
    echo.insert("rule.q.min".into(), cfg.q_rule.min_segments.to_string());
    echo.insert("basis.q.degree".into(), cfg.q_degree.to_string());
    echo.insert("rule.b.coef".into(), format!("{}", cfg.b_rule.coef));
    echo.insert("rule.b.exponent".into(), format!("{}", cfg.b_rule.exponent));
    echo.insert("rule.b.min".into(), cfg.b_rule.min_segments.to_string());
    echo.insert("basis.b.degree".into(), cfg.b_degree.to_string());
    echo.insert(
        "estimators".into(),
        cfg.estimators
            .iter()
            .map(|e| e.name().to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    echo.insert("targets".into(), join_targets(&cfg.targets));
    echo.insert("replications".into(), cfg.replications.to_string());
    echo.insert("seed".into(), cfg.seed.to_string());
    echo.insert("theory.exponent".into(), format!("{}", cfg.theory_exponent));

    Ok(RunConfig {
        command: CommandConfig::Rates(cfg),
        common: common.clone(),
        echo,
    })
}

fn resolve_diagnostics(pairs: &[KeyValue], common: &mut CommonOpts) -> Result<RunConfig> {
    let mut cfg = diagnostics_default(0);

    for kv in pairs {
        if apply_common(common, kv)? {
            continue;
        }
        match kv.key.as_str() {
            "estimand" => {
                let name = parse_estimand_name(kv)?;
                if LinearFunctional::by_name(&name).is_none() {
                    return Err(bad(
                        kv,
                        "moment diagnostics need a single functional (cov, trt, or ctrl)",
                    ));
                }
                cfg.estimand = name;
            }
            "n" => cfg.n = parse_usize(kv)?,
            "basis.q.segments" => cfg.q_spec.segments_per_dim = parse_usize(kv)?,
            "basis.q.degree" => cfg.q_spec.degree = parse_usize(kv)?,
            "replications" => cfg.replications = parse_usize(kv)?,
            "ind.segments" => cfg.ind_q_spec.segments_per_dim = parse_usize(kv)?,
            "ind.n.grid" => cfg.ind_n_grid = parse_usize_list(kv)?,
            "ind.replications" => cfg.ind_replications = parse_usize(kv)?,
            "seed" => cfg.seed = parse_u64(kv)?,
            _ => return Err(unknown(CommandName::Diagnostics, kv)),
        }
    }

    if cfg.replications < 2 || cfg.ind_replications < 1 {
        return Err(Error::Validation("diagnostics need replications".into()));
    }
    cfg.q_spec.validate()?;
    cfg.ind_q_spec.validate()?;
    growth_check("k_n", cfg.q_spec.basis_size(), cfg.n)?;
    for &n in &cfg.ind_n_grid {
        growth_check("k_n", cfg.ind_q_spec.basis_size(), n)?;
    }

    let mut echo = BTreeMap::new();
    echo_common(&mut echo, CommandName::Diagnostics, common);
    echo.insert("estimand".into(), cfg.estimand.clone());
    echo.insert("n".into(), cfg.n.to_string());
    echo.insert("basis.q.segments".into(), cfg.q_spec.segments_per_dim.to_string());
    echo.insert("basis.q.degree".into(), cfg.q_spec.degree.to_string());
    echo.insert("replications".into(), cfg.replications.to_string());
    echo.insert("ind.segments".into(), cfg.ind_q_spec.segments_per_dim.to_string());
    echo.insert("ind.n.grid".into(), join_usizes(&cfg.ind_n_grid));
    echo.insert("ind.replications".into(), cfg.ind_replications.to_string());
    echo.insert("seed".into(), cfg.seed.to_string());

    Ok(RunConfig {
        command: CommandConfig::Diagnostics(cfg),
        common: common.clone(),
        echo,
    })
}
