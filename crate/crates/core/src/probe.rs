//! Closed-form ridge-regression linear probes.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Every feature was constant on the training split; `accuracy` is the
    /// majority-class rate.
    pub degenerate: bool,
}

/// Fits one-vs-rest ridge regression onto one-hot targets on the training split
/// (features standardised with training statistics, unpenalised bias) and
/// reports argmax accuracy on the test split.
pub fn ridge_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    n_classes: usize,
    lambda: f64,
) -> Result<ProbeResult> {
    if train_x.is_empty() || test_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::invalid("probe needs non-empty, labelled train and test splits"));
    }
    if train_y.iter().chain(test_y).any(|&y| y >= n_classes) {
        return Err(Error::invalid("probe label out of range"));
    }
    let dim = train_x[0].len();
    if train_x.iter().chain(test_x).any(|r| r.len() != dim) {
        return Err(Error::shape("ridge_probe", "rows differ in width"));
    }
    let n = train_x.len();

    let mut mean = vec![0.0; dim];
    for r in train_x {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let mut sd = vec![0.0; dim];
    for r in train_x {
        for j in 0..dim {
            sd[j] += (r[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let keep: Vec<usize> = (0..dim).filter(|&j| sd[j].sqrt() > 1e-12).collect();

    if keep.is_empty() {
        let mut counts = vec![0usize; n_classes];
        for &y in train_y {
            counts[y] += 1;
        }
        let majority = (0..n_classes).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap_or(0);
        let hits = test_y.iter().filter(|&&y| y == majority).count();
        return Ok(ProbeResult { accuracy: hits as f64 / test_y.len() as f64, degenerate: true });
    }

    let p = keep.len() + 1;
    let design = |rows: &[Vec<f64>]| {
        DMatrix::from_fn(rows.len(), p, |i, j| {
            if j == keep.len() {
                1.0
            } else {
                let c = keep[j];
                (rows[i][c] - mean[c]) / sd[c].sqrt()
            }
        })
    };
    let x = design(train_x);
    let y = DMatrix::from_fn(n, n_classes, |i, c| if train_y[i] == c { 1.0 } else { 0.0 });
    let mut gram = x.transpose() * &x;
    for j in 0..keep.len() {
        gram[(j, j)] += lambda;
    }
    // tiny jitter on the bias keeps the system positive definite
    gram[(p - 1, p - 1)] += 1e-10;
    let rhs = x.transpose() * y;
    let chol = gram.cholesky().ok_or_else(|| Error::domain("ridge_probe", "normal equations not positive definite"))?;
    let w = chol.solve(&rhs);

    let scores = design(test_x) * w;
    let mut hits = 0;
    for (i, &y) in test_y.iter().enumerate() {
        let row: DVector<f64> = scores.row(i).transpose();
        let mut best = 0;
        for c in 1..n_classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == y {
            hits += 1;
        }
    }
    Ok(ProbeResult { accuracy: hits as f64 / test_y.len() as f64, degenerate: false })
}
