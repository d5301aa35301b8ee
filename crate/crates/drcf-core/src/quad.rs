//! Gauss-Legendre quadrature on [-1, 1], plus composite rules on [0, 1].
//!
//! Nodes and weights are computed at runtime by Newton iteration on the
//! Legendre recurrence; this is deterministic and accurate to machine
//! precision for the small orders used here.

use alloc::{vec, vec::Vec};

use crate::error::{Error, Result};
use crate::mathx;

/// Nodes and weights of the m-point Gauss-Legendre rule on [-1, 1].
///
/// Exact for polynomials of degree <= 2m-1.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(m >= 1, "quadrature order must be positive");
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    let half = m.div_ceil(2);
    for i in 0..half {
        // Tricomi initial guess, then Newton on P_m(x) = 0.
        let mut x = mathx::cos(core::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5));
        let mut dp = 0.0;
        for _ in 0..100 {
            // Legendre recurrence: (j+1) P_{j+1} = (2j+1) x P_j - j P_{j-1}.
            let mut p0 = 1.0;
            let mut p1 = x;
            for j in 1..m {
                let p2 = ((2 * j + 1) as f64 * x * p1 - j as f64 * p0) / (j + 1) as f64;
                p0 = p1;
                p1 = p2;
            }
            // P'_m(x) = m (x P_m - P_{m-1}) / (x^2 - 1).
            dp = m as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if mathx::abs(dx) < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[m - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[m - 1 - i] = w;
    }
    if m % 2 == 1 {
        nodes[m / 2] = 0.0;
    }
    (nodes, weights)
}

/// Composite rule on [0, 1]: `segments` equal panels, each carrying an
/// `order`-point Gauss-Legendre rule. Returns (points, weights) whose
/// weights sum to 1, so sums approximate averages under Uniform[0, 1].
pub fn composite_unit_rule(segments: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let (gn, gw) = gauss_legendre(order);
    let width = 1.0 / segments as f64;
    let mut points = Vec::with_capacity(segments * order);
    let mut weights = Vec::with_capacity(segments * order);
    for s in 0..segments {
        let center = (s as f64 + 0.5) * width;
        for (t, w) in gn.iter().zip(gw.iter()) {
            points.push(center + 0.5 * width * t);
            // GL weights sum to 2 on [-1,1]; scale to panel length / 2.
            weights.push(w * 0.5 * width);
        }
    }
    (points, weights)
}

/// Tensor-product rule over selected axes of the unit hypercube.
///
/// Iterates the product grid of a per-axis composite rule, calling `f`
/// with the full d-dimensional point where fixed axes hold the values
/// from `fixed` and free axes sweep the rule. Returns the weighted sum,
/// i.e. the average of `f` over the free axes under Uniform[0, 1].
pub fn integrate_free_axes(
    dim: usize,
    fixed: &[(usize, f64)],
    segments: usize,
    order: usize,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> f64 {
    let free: Vec<usize> = (0..dim)
        .filter(|ax| fixed.iter().all(|(fa, _)| fa != ax))
        .collect();
    let mut x = vec![0.0; dim];
    for (ax, v) in fixed {
        x[*ax] = *v;
    }
    if free.is_empty() {
        return f(&x);
    }
    let (pts, wts) = composite_unit_rule(segments, order);
    let m = pts.len();
    let mut idx = vec![0usize; free.len()];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for (k, &ax) in free.iter().enumerate() {
            x[ax] = pts[idx[k]];
            w *= wts[idx[k]];
        }
        total += w * f(&x);
        // Odometer increment over the product grid.
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < m {
                break;
            }
            idx[k] = 0;
            k += 1;
            if k == free.len() {
                return total;
            }
        }
    }
}

/// As `integrate_free_axes`, but refines the panel count until two
/// successive levels agree within `tol`, starting from `segments`.
pub fn integrate_free_axes_adaptive(
    dim: usize,
    fixed: &[(usize, f64)],
    segments: usize,
    order: usize,
    tol: f64,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> Result<(f64, f64)> {
    let mut s = segments.max(1);
    let mut prev = integrate_free_axes(dim, fixed, s, order, f);
    for _ in 0..6 {
        s *= 2;
        let next = integrate_free_axes(dim, fixed, s, order, f);
        let diff = mathx::abs(next - prev);
        if diff < tol {
            return Ok((next, diff));
        }
        prev = next;
    }
    Err(Error::Numeric(alloc::format!(
        "quadrature non-convergence: last refinement at {s} panels still moving"
    )))
}
