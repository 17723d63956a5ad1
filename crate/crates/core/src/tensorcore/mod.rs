//! Minimal reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! Only the primitives the acoustic model needs are provided: matrix
//! products, the LSTM nonlinearities, column/row plumbing, and a fused
//! softmax + cross-entropy. [`check_gradients`] compares analytic gradients
//! against central finite differences.

mod gradcheck;
mod graph;
mod matrix;

pub use gradcheck::{check_gradients, Evaluation, GradCheck};
pub use graph::{Elementwise, Graph, NodeId, OpKind};
pub use matrix::Matrix;

#[cfg(test)]
use graph::sigmoid;

use crate::error::{Error, Result};

/// Row-wise softmax with max-shifting.
pub fn row_softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

/// Per-frame cross entropy `−log softmax(logits[t])[labels[t]]` via
/// log-sum-exp, together with the row softmax used by the backward rule.
///
/// Both the training graph and the scoring code go through this function, so
/// their CE values agree bitwise.
pub fn softmax_ce_rows(logits: &Matrix, labels: &[u32]) -> Result<(Vec<f64>, Matrix)> {
    let (rows, k) = logits.shape();
    if labels.len() != rows {
        return Err(Error::validation(format!(
            "{} labels for {rows} frames",
            labels.len()
        )));
    }
    let mut probs = Matrix::zeros(rows, k);
    let mut ce = Vec::with_capacity(rows);
    for (t, &label) in labels.iter().enumerate() {
        if label as usize >= k {
            return Err(Error::validation(format!(
                "label {label} at frame {t} outside [0, {k})"
            )));
        }
        let row = logits.row(t);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let p = probs.row_mut(t);
        for (pi, &x) in p.iter_mut().zip(row) {
            *pi = (x - max).exp();
            total += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= total;
        }
        let log_z = max + total.ln();
        ce.push(log_z - row[label as usize]);
    }
    Ok((ce, probs))
}
