//! Forward evaluation of the element- and row-wise nonlinearities.
//!
//! These are the value paths used by [`Tape`](super::Tape); they can also be
//! called directly on plain matrices.

use super::Matrix;
use crate::error::{Error, Result};

fn ensure_finite(x: &Matrix, op: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite input to {op}")))
    }
}

pub fn relu(x: &Matrix) -> Result<Matrix> {
    ensure_finite(x, "relu")?;
    Ok(x.map(|v| if v > 0.0 { v } else { 0.0 }))
}

#[inline]
pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Result<Matrix> {
    ensure_finite(x, "sigmoid")?;
    Ok(x.map(sigmoid_scalar))
}

pub fn softmax(x: &Matrix) -> Result<Matrix> {
    ensure_finite(x, "softmax")?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Row-wise `exp(z_c) / (num_classes + Σ exp(z_c'))`.
///
/// Evaluated as `exp(z_c - m) / (num_classes·exp(-m) + Σ exp(z_c' - m))` with
/// `m = max(0, max_c z_c)`, which cannot overflow.
pub fn leaky_softmax(z: &Matrix, num_classes: usize) -> Result<Matrix> {
    if z.cols() != num_classes {
        return Err(Error::shape(format!(
            "leaky_softmax over {num_classes} classes given {} columns",
            z.cols()
        )));
    }
    ensure_finite(z, "leaky_softmax")?;
    let k = num_classes as f64;
    let mut out = z.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(0.0_f64, f64::max);
        let mut denom = k * (-m).exp();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    Ok(out)
}

/// Per-row mass the leaky softmax leaves unassigned,
/// `num_classes / (num_classes + Σ exp(z_c))`, evaluated without cancellation.
pub fn leaky_softmax_remainder(z: &Matrix, num_classes: usize) -> Result<Vec<f64>> {
    if z.cols() != num_classes {
        return Err(Error::shape(format!(
            "leaky_softmax over {num_classes} classes given {} columns",
            z.cols()
        )));
    }
    ensure_finite(z, "leaky_softmax")?;
    let k = num_classes as f64;
    Ok((0..z.rows())
        .map(|r| {
            let row = z.row(r);
            let m = row.iter().copied().fold(0.0_f64, f64::max);
            let leak = k * (-m).exp();
            leak / (leak + row.iter().map(|v| (v - m).exp()).sum::<f64>())
        })
        .collect())
}
