//! Central finite-difference self-check for graph-built functions.

use alloc::vec::Vec;

use rand::Rng;

use super::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Scale floor of [`relative_error`]; gradients smaller than this are
/// compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Samples `coords` coordinates uniformly over all entries of `inputs`.
pub fn sample_coords<R: Rng + ?Sized>(inputs: &[Tensor<f64>], coords: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    (0..coords)
        .map(|_| {
            let mut k = rng.random_range(0..total);
            let mut which = 0;
            while k >= inputs[which].numel() {
                k -= inputs[which].numel();
                which += 1;
            }
            (which, k)
        })
        .collect()
}

/// Central difference `(f(x + h) - f(x - h)) / 2h` at each requested coordinate.
pub fn numeric_grad<F>(inputs: &[Tensor<f64>], coords: &[(usize, usize)], h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    coords
        .iter()
        .map(|&(i, k)| {
            let base = inputs[i].data()[k];
            work[i].data_mut()[k] = base + h;
            let plus = f(&work)?;
            work[i].data_mut()[k] = base - h;
            let minus = f(&work)?;
            work[i].data_mut()[k] = base;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Compares reverse-mode gradients of `build` against central differences
/// on `coords` randomly chosen input coordinates.
pub fn check_gradients<F, R>(inputs: &[Tensor<f64>], coords: usize, h: f64, rng: &mut R, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let picks = sample_coords(inputs, coords, rng);
    let numeric = numeric_grad(inputs, &picks, h, |ts| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.input(t.clone())).collect::<Result<_>>()?;
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar(loss))
    })?;
    let mut report = GradCheckReport {
        checked: picks.len(),
        max_rel_err: 0.0,
        worst: None,
    };
    for (&(i, k), &n) in picks.iter().zip(&numeric) {
        let a = g.grad(vars[i]).map_or(0.0, |gr| gr[k]);
        let e = relative_error(a, n);
        if e > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = Some((i, k, a, n));
        }
    }
    Ok(report)
}
