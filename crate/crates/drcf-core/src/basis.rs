//! Tensor-product piecewise-polynomial spline bases on a box partition.
//!
//! The domain (an axis-aligned box, by default the unit hypercube) is
//! split into `segments_per_dim^dim` equal cells. Each cell carries the
//! monomials of total degree <= `degree` in local coordinates that map
//! the cell to [-1, 1] per axis. Basis functions are supported on
//! exactly one cell, so distinct cells never share support and Gram
//! matrices are block-diagonal up to ordering.
//!
//! Cells are half-open [lo, hi) except the last segment per axis, which
//! also includes its right boundary.

use alloc::{format, string::String, sync::Arc, vec, vec::Vec};
use core::ops::Range;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::mathx;

/// Axis-aligned box domain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn unit(dim: usize) -> Self {
        DomainBox {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .all(|(&v, (&lo, &hi))| v >= lo && v <= hi)
    }

    fn validate(&self) -> Result<()> {
        if self.lo.is_empty() || self.lo.len() != self.hi.len() {
            return Err(Error::Validation("domain bounds must be nonempty and of equal length".into()));
        }
        for (ax, (&lo, &hi)) in self.lo.iter().zip(self.hi.iter()).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Validation(format!(
                    "domain axis {ax} has non-ordered or non-finite bounds [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

/// Specification of a spline basis: dimension, partition fineness,
/// local polynomial degree, and domain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasisSpec {
    pub dim: usize,
    pub segments_per_dim: usize,
    pub degree: usize,
    pub domain: DomainBox,
}

impl BasisSpec {
    /// Spec on the unit hypercube.
    pub fn new(dim: usize, segments_per_dim: usize, degree: usize) -> Self {
        BasisSpec {
            dim,
            segments_per_dim,
            degree,
            domain: DomainBox::unit(dim),
        }
    }

    pub fn with_domain(mut self, domain: DomainBox) -> Self {
        self.domain = domain;
        self
    }

    /// Number of partition cells: segments^dim.
    pub fn n_cells(&self) -> usize {
        self.segments_per_dim.pow(self.dim as u32)
    }

    /// Monomials per cell: binom(dim + degree, dim).
    pub fn block_size(&self) -> usize {
        binom(self.dim + self.degree, self.dim)
    }

    /// Total basis size: n_cells * block_size.
    pub fn basis_size(&self) -> usize {
        self.n_cells() * self.block_size()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim > 8 {
            return Err(Error::Validation(format!(
                "basis dim must be in 1..=8, got {}",
                self.dim
            )));
        }
        if self.segments_per_dim == 0 {
            return Err(Error::Validation("segments_per_dim must be positive".into()));
        }
        self.domain.validate()?;
        if self.domain.dim() != self.dim {
            return Err(Error::Validation(format!(
                "domain dimension {} does not match basis dim {}",
                self.domain.dim(),
                self.dim
            )));
        }
        // Guard against overflow before the 2^31 size check.
        let cells = (self.segments_per_dim as u128).checked_pow(self.dim as u32);
        let size = cells.map(|c| c.saturating_mul(self.block_size() as u128));
        match size {
            Some(s) if s < (1u128 << 31) => Ok(()),
            _ => Err(Error::Validation(format!(
                "basis size {}^{} * {} reaches 2^31; refusing to build",
                self.segments_per_dim,
                self.dim,
                self.block_size()
            ))),
        }
    }
}

fn binom(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// Multi-indices with total degree <= degree, graded (by total degree)
/// and lexicographic within a grade. Deterministic construction order.
fn enumerate_exponents(dim: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(dim: usize, axis: usize, remaining: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if axis == dim {
            out.push(cur.clone());
            return;
        }
        for e in 0..=remaining {
            cur[axis] = e;
            rec(dim, axis + 1, remaining - e, cur, out);
        }
        cur[axis] = 0;
    }
    let mut out = Vec::new();
    let mut cur = vec![0u32; dim];
    rec(dim, 0, degree as u32, &mut cur, &mut out);
    out.sort_by_key(|e| (e.iter().sum::<u32>(), e.clone()));
    out
}

/// Segment index of `u` in [0, 1] among `segments` half-open pieces,
/// the last one right-closed.
pub(crate) fn unit_segment(u: f64, segments: usize) -> usize {
    let t = mathx::floor(u * segments as f64) as usize;
    t.min(segments - 1)
}

/// Tensor-product piecewise-polynomial basis.
#[derive(Debug, Clone)]
pub struct SplineBasis {
    spec: BasisSpec,
    exponents: Vec<Vec<u32>>,
    widths: Vec<f64>,
}

/// Build a basis from a validated spec.
pub fn build_basis(spec: &BasisSpec) -> Result<SplineBasis> {
    spec.validate()?;
    let widths = spec
        .domain
        .lo
        .iter()
        .zip(spec.domain.hi.iter())
        .map(|(&lo, &hi)| (hi - lo) / spec.segments_per_dim as f64)
        .collect();
    Ok(SplineBasis {
        exponents: enumerate_exponents(spec.dim, spec.degree),
        widths,
        spec: spec.clone(),
    })
}

impl SplineBasis {
    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    /// Id of the cell containing x. Errors on out-of-domain points.
    pub fn cell_index(&self, x: &[f64]) -> Result<usize> {
        self.cell_index_inner(x, false)
    }

    /// Id of the cell containing x, clamping out-of-domain coordinates
    /// to the nearest boundary.
    pub fn cell_index_clamped(&self, x: &[f64]) -> Result<usize> {
        self.cell_index_inner(x, true)
    }

    fn cell_index_inner(&self, x: &[f64], clamp: bool) -> Result<usize> {
        if x.len() != self.spec.dim {
            return Err(Error::Data(format!(
                "point has {} coordinates, basis expects {}",
                x.len(),
                self.spec.dim
            )));
        }
        let seg = self.spec.segments_per_dim;
        let mut id = 0usize;
        let mut stride = 1usize;
        for ax in 0..self.spec.dim {
            let (lo, hi) = (self.spec.domain.lo[ax], self.spec.domain.hi[ax]);
            let mut v = x[ax];
            if v < lo || v > hi || !v.is_finite() {
                if clamp && v.is_finite() {
                    v = v.clamp(lo, hi);
                } else {
                    return Err(Error::Data(format!(
                        "coordinate {ax} = {v} outside domain [{lo}, {hi}] with clamping disabled"
                    )));
                }
            }
            let u = (v - lo) / (hi - lo);
            id += unit_segment(u, seg) * stride;
            stride *= seg;
        }
        Ok(id)
    }

    /// True iff x and x2 fall in the same partition cell.
    pub fn same_neighborhood(&self, x: &[f64], x2: &[f64]) -> Result<bool> {
        Ok(self.cell_index(x)? == self.cell_index(x2)?)
    }

    /// Largest within-cell diameter: sqrt(sum of squared cell widths).
    pub fn max_cell_diameter(&self) -> f64 {
        mathx::sqrt(self.widths.iter().map(|w| w * w).sum())
    }

    /// Local coordinates of x in its cell, mapped to [-1, 1] per axis.
    fn local_coords(&self, x: &[f64], cell: usize, out: &mut [f64]) {
        let seg = self.spec.segments_per_dim;
        let mut rest = cell;
        for ax in 0..self.spec.dim {
            let t = rest % seg;
            rest /= seg;
            let w = self.widths[ax];
            let center = self.spec.domain.lo[ax] + (t as f64 + 0.5) * w;
            out[ax] = 2.0 * (x[ax] - center) / w;
        }
    }
}

/// Object-safe basis interface consumed by the estimation pipeline.
///
/// `eval_block` exposes the locality structure: it writes only the
/// active coefficients and reports which index range they occupy, so
/// Gram accumulation costs O(block^2) per row instead of O(size^2).
pub trait SeriesBasis: Send + Sync {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    /// Upper bound on the length of the range `eval_block` returns.
    fn max_block(&self) -> usize;
    /// Evaluate at x, writing active values into `out[..range.len()]`
    /// and returning their index range. Entries outside the range are
    /// exactly zero.
    fn eval_block(&self, x: &[f64], out: &mut [f64]) -> Result<Range<usize>>;
    /// Partition cell of x, when the basis has one (None for dense
    /// transformed bases).
    fn cell_hint(&self, x: &[f64]) -> Result<Option<usize>>;
    /// Number of partition cells, when meaningful.
    fn n_cells(&self) -> Option<usize>;

    /// Dense evaluation.
    fn evaluate(&self, x: &[f64]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.len());
        let mut buf = vec![0.0; self.max_block()];
        let range = self.eval_block(x, &mut buf)?;
        for (off, i) in range.clone().enumerate() {
            out[i] = buf[off];
        }
        Ok(out)
    }
}

impl SeriesBasis for SplineBasis {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn len(&self) -> usize {
        self.spec.basis_size()
    }

    fn max_block(&self) -> usize {
        self.spec.block_size()
    }

    fn eval_block(&self, x: &[f64], out: &mut [f64]) -> Result<Range<usize>> {
        let cell = self.cell_index(x)?;
        let block = self.spec.block_size();
        let mut local = [0.0f64; 8];
        debug_assert!(self.spec.dim <= 8, "local coordinate buffer is fixed-size");
        self.local_coords(x, cell, &mut local[..self.spec.dim]);
        for (b, exps) in self.exponents.iter().enumerate() {
            let mut v = 1.0;
            for (ax, &e) in exps.iter().enumerate() {
                if e > 0 {
                    v *= mathx::powi(local[ax], e);
                }
            }
            out[b] = v;
        }
        Ok(cell * block..(cell + 1) * block)
    }

    fn cell_hint(&self, x: &[f64]) -> Result<Option<usize>> {
        Ok(Some(self.cell_index(x)?))
    }

    fn n_cells(&self) -> Option<usize> {
        Some(self.spec.n_cells())
    }
}

/// Basis q'(x) = W q(x) for an invertible matrix W. Used to verify that
/// point estimates are invariant to basis reparameterization; support
/// is dense, so no locality is claimed.
pub struct TransformedBasis {
    inner: Arc<dyn SeriesBasis>,
    w: DMatrix<f64>,
}

impl TransformedBasis {
    /// `w` must be square with side `inner.len()` and invertible; the
    /// caller guarantees invertibility.
    pub fn new(inner: Arc<dyn SeriesBasis>, w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() != inner.len() || w.ncols() != inner.len() {
            return Err(Error::Validation(format!(
                "transform is {}x{}, basis size is {}",
                w.nrows(),
                w.ncols(),
                inner.len()
            )));
        }
        Ok(TransformedBasis { inner, w })
    }
}

impl SeriesBasis for TransformedBasis {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn len(&self) -> usize {
        self.inner.len()
    }

    fn max_block(&self) -> usize {
        self.inner.len()
    }

    fn eval_block(&self, x: &[f64], out: &mut [f64]) -> Result<Range<usize>> {
        let v = self.inner.evaluate(x)?;
        let t = &self.w * v;
        out[..self.len()].copy_from_slice(t.as_slice());
        Ok(0..self.len())
    }

    fn cell_hint(&self, _x: &[f64]) -> Result<Option<usize>> {
        Ok(None)
    }

    fn n_cells(&self) -> Option<usize> {
        None
    }
}

/// Sample Gram matrix (1/n) sum_i w_i v(x_i) v(x_i)^T.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub matrix: DMatrix<f64>,
    /// Number of rows that entered the average (the 1/n divisor).
    pub n: usize,
    /// True when weights realize the J mask, i.e. the matrix is the
    /// second moment of p = J * q rather than of raw q.
    pub j_weighted: bool,
}

impl GramMatrix {
    /// (lambda_min, lambda_max), computed on demand.
    pub fn eig_range(&self) -> (f64, f64) {
        linalg::sym_eig_range(&self.matrix)
    }
}

/// Accumulate (1/n) sum_i w_i v(x_i) v(x_i)^T over row-major points.
///
/// `weights` of None means unit weights. Set `j_weighted` when the
/// weights are a J indicator mask so the result is labeled as a
/// p-moment matrix.
pub fn gram(
    basis: &dyn SeriesBasis,
    points: &[f64],
    weights: Option<&[f64]>,
    j_weighted: bool,
) -> Result<GramMatrix> {
    let d = basis.dim();
    if points.len() % d != 0 {
        return Err(Error::Data(format!(
            "point buffer length {} is not a multiple of dim {}",
            points.len(),
            d
        )));
    }
    let n = points.len() / d;
    if n == 0 {
        return Err(Error::Data("cannot build a Gram matrix from zero points".into()));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Data(format!(
                "weights length {} does not match point count {n}",
                w.len()
            )));
        }
    }
    let k = basis.len();
    let mut g = DMatrix::zeros(k, k);
    let mut buf = vec![0.0; basis.max_block()];
    for i in 0..n {
        let w = weights.map_or(1.0, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        let range = basis.eval_block(&points[i * d..(i + 1) * d], &mut buf)?;
        let len = range.len();
        for bi in 0..len {
            let vi = w * buf[bi];
            if vi == 0.0 {
                continue;
            }
            for bj in 0..len {
                g[(range.start + bi, range.start + bj)] += vi * buf[bj];
            }
        }
    }
    g /= n as f64;
    Ok(GramMatrix {
        matrix: g,
        n,
        j_weighted,
    })
}

/// Invertible map W with W G W^T = I for a reference Gram G; applying W
/// to the basis makes the reference second moment the identity. Used
/// for eigenvalue diagnostics only, since point estimates are invariant
/// to basis linear maps.
#[derive(Debug, Clone)]
pub struct Whitener {
    pub w: DMatrix<f64>,
}

/// Symmetric inverse square root of the reference Gram.
pub fn whiten(reference: &GramMatrix) -> Result<Whitener> {
    let w = linalg::sym_inv_sqrt(&reference.matrix, 1e-12)?;
    Ok(Whitener { w })
}

impl Whitener {
    /// Second-moment matrix of the whitened basis: W G W^T.
    pub fn apply_gram(&self, g: &GramMatrix) -> DMatrix<f64> {
        &self.w * &g.matrix * self.w.transpose()
    }
}

/// Human-readable tag used in error messages naming a basis.
pub fn describe_spec(spec: &BasisSpec) -> String {
    format!(
        "dim={} segments={} degree={} (size {})",
        spec.dim,
        spec.segments_per_dim,
        spec.degree,
        spec.basis_size()
    )
}
