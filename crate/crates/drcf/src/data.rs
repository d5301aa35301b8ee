//! Dataset CSV: header `x1,...,xd,a,y`, one observation per row.
//! Ingest validates the header and every cell, records each covariate
//! column's observed range, and rescales covariates affinely onto the
//! unit cube (the estimators' domain). The writer inverts the maps, so
//! emit-then-ingest reproduces the data.

use std::path::Path;

use drcf_core::{Error, Result};

/// Observed range of one covariate column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnRange {
    pub lo: f64,
    pub hi: f64,
}

/// Affine maps between original units and the unit cube, one per
/// covariate column.
#[derive(Debug, Clone, PartialEq)]
pub struct Rescale {
    pub ranges: Vec<ColumnRange>,
}

impl Rescale {
    pub fn d_x(&self) -> usize {
        self.ranges.len()
    }

    pub fn to_unit(&self, column: usize, v: f64) -> f64 {
        let r = &self.ranges[column];
        (v - r.lo) / (r.hi - r.lo)
    }

    pub fn to_original(&self, column: usize, u: f64) -> f64 {
        let r = &self.ranges[column];
        r.lo + u * (r.hi - r.lo)
    }
}

/// Ingested dataset: covariates rescaled to the unit cube (row-major),
/// treatment and outcome untouched, plus the recorded maps.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvData {
    pub d_x: usize,
    pub xs_unit: Vec<f64>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
    pub rescale: Rescale,
}

impl CsvData {
    pub fn n(&self) -> usize {
        self.a.len()
    }
}

fn check_header(headers: &[String]) -> Result<()> {
    for required in ["a", "y"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::Data(format!(
                "CSV header is missing column \"{required}\""
            )));
        }
    }
    let cols = headers.len();
    if cols < 3 || !headers.iter().any(|h| h == "x1") {
        return Err(Error::Data(
            "CSV header is missing column \"x1\" (expected x1,...,xd,a,y)".into(),
        ));
    }
    if headers[cols - 2] != "a" || headers[cols - 1] != "y" {
        return Err(Error::Data(format!(
            "CSV header must end with columns \"a\",\"y\"; got \"{}\",\"{}\"",
            headers[cols - 2],
            headers[cols - 1]
        )));
    }
    for (j, h) in headers[..cols - 2].iter().enumerate() {
        let expected = format!("x{}", j + 1);
        if h != &expected {
            return Err(Error::Data(format!(
                "CSV header: expected column \"{expected}\" at position {}, got \"{h}\"",
                j + 1
            )));
        }
    }
    Ok(())
}

/// Read a dataset CSV and rescale its covariates to the unit cube.
pub fn ingest_csv(path: &Path) -> Result<CsvData> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read CSV header: {e}")))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    check_header(&headers)?;
    let d_x = headers.len() - 2;

    let mut xs = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2; // 1-based, counting the header line
        let record = record.map_err(|e| Error::Data(format!("CSV row {row}: {e}")))?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "CSV row {row} has {} fields, expected {}",
                record.len(),
                headers.len()
            )));
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Data(format!(
                    "CSV row {row}, column {}: cannot parse {field:?} as a number",
                    headers[j]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "CSV row {row}, column {}: non-finite value {v}",
                    headers[j]
                )));
            }
            if j < d_x {
                xs.push(v);
            } else if j == d_x {
                a.push(v);
            } else {
                y.push(v);
            }
        }
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::Data("CSV has a header but no data rows".into()));
    }

    let mut ranges = Vec::with_capacity(d_x);
    for j in 0..d_x {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let v = xs[i * d_x + j];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi <= lo {
            return Err(Error::Data(format!(
                "covariate column x{} is constant ({lo}); cannot rescale it to the unit interval",
                j + 1
            )));
        }
        ranges.push(ColumnRange { lo, hi });
    }
    let rescale = Rescale { ranges };
    let xs_unit: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(pos, &v)| rescale.to_unit(pos % d_x, v))
        .collect();

    Ok(CsvData {
        d_x,
        xs_unit,
        a,
        y,
        rescale,
    })
}

/// Write a dataset CSV in original units, inverting the rescale maps.
/// Floats use shortest round-trip formatting, so identical data gives
/// identical bytes.
pub fn write_dataset_csv(
    path: &Path,
    d_x: usize,
    xs_unit: &[f64],
    a: &[f64],
    y: &[f64],
    rescale: &Rescale,
) -> Result<()> {
    if d_x == 0 || rescale.d_x() != d_x || xs_unit.len() != a.len() * d_x || a.len() != y.len() {
        return Err(Error::Data(
            "dataset columns disagree in length; cannot write CSV".into(),
        ));
    }
    let mut out = String::new();
    for j in 0..d_x {
        out.push_str(&format!("x{},", j + 1));
    }
    out.push_str("a,y\n");
    for i in 0..a.len() {
        for j in 0..d_x {
            let v = rescale.to_original(j, xs_unit[i * d_x + j]);
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{},{}\n", a[i], y[i]));
    }
    std::fs::write(path, out)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}
