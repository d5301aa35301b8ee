//! In-memory dataset: covariates (row-major), treatment, outcome, and
//! the personalization index set selecting C out of X.

use alloc::{format, vec::Vec};

use crate::error::{Error, Result};
use crate::estimands::ZView;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d_x: usize,
    xs: Vec<f64>,
    a: Vec<f64>,
    y: Vec<f64>,
    c_indices: Vec<usize>,
}

impl Dataset {
    /// `xs` is n*d_x row-major. `c_indices` selects the personalization
    /// subvector C from X; must be valid, duplicate-free, and nonempty.
    /// All values must be finite.
    pub fn new(d_x: usize, xs: Vec<f64>, a: Vec<f64>, y: Vec<f64>, c_indices: Vec<usize>) -> Result<Self> {
        if d_x == 0 {
            return Err(Error::Data("dataset needs at least one covariate".into()));
        }
        if xs.len() % d_x != 0 {
            return Err(Error::Data(format!(
                "covariate buffer length {} is not a multiple of d_x = {d_x}",
                xs.len()
            )));
        }
        let n = xs.len() / d_x;
        if a.len() != n || y.len() != n {
            return Err(Error::Data(format!(
                "column lengths disagree: {n} covariate rows, {} treatments, {} outcomes",
                a.len(),
                y.len()
            )));
        }
        if let Some(i) = xs.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite covariate at row {}, column x{}",
                i / d_x + 1,
                i % d_x + 1
            )));
        }
        if let Some(i) = a.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite treatment at row {}", i + 1)));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite outcome at row {}", i + 1)));
        }
        if c_indices.is_empty() {
            return Err(Error::Data("c_indices must select at least one coordinate".into()));
        }
        for (pos, &c) in c_indices.iter().enumerate() {
            if c >= d_x {
                return Err(Error::Data(format!(
                    "c index {c} out of range for d_x = {d_x}"
                )));
            }
            if c_indices[..pos].contains(&c) {
                return Err(Error::Data(format!("duplicate c index {c}")));
            }
        }
        Ok(Dataset {
            d_x,
            xs,
            a,
            y,
            c_indices,
        })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn c_dim(&self) -> usize {
        self.c_indices.len()
    }

    pub fn c_indices(&self) -> &[usize] {
        &self.c_indices
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.d_x..(i + 1) * self.d_x]
    }

    pub fn a(&self, i: usize) -> f64 {
        self.a[i]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn z(&self, i: usize) -> ZView<'_> {
        ZView {
            x: self.x(i),
            a: self.a[i],
            y: self.y[i],
        }
    }

    pub fn xs_flat(&self) -> &[f64] {
        &self.xs
    }

    /// C rows as an n x c_dim row-major buffer.
    pub fn c_rows(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * self.c_indices.len());
        for i in 0..n {
            let row = self.x(i);
            for &c in &self.c_indices {
                out.push(row[c]);
            }
        }
        out
    }

    /// Copy of the rows at `idx`, preserving their order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut xs = Vec::with_capacity(idx.len() * self.d_x);
        let mut a = Vec::with_capacity(idx.len());
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            xs.extend_from_slice(self.x(i));
            a.push(self.a[i]);
            y.push(self.y[i]);
        }
        Dataset {
            d_x: self.d_x,
            xs,
            a,
            y,
            c_indices: self.c_indices.clone(),
        }
    }
}
