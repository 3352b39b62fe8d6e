//! Vector statistics over flattened tensors.

use super::tensor::{check_finite, Tensor};
use crate::error::{Error, Result};

pub fn l2_norm(t: &Tensor) -> Result<f64> {
    l2_norm_slice(t.data())
}

pub fn l2_norm_slice(data: &[f64]) -> Result<f64> {
    check_finite(data, "l2_norm input")?;
    Ok(sum_sq(data).sqrt())
}

pub(crate) fn sum_sq(data: &[f64]) -> f64 {
    data.iter().map(|x| x * x).sum()
}

/// Root mean squared difference.
pub fn rmsd(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("rmsd", a, b)?;
    Ok(rmsd_slice(a.data(), b.data()))
}

pub(crate) fn rmsd_slice(a: &[f64], b: &[f64]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}

/// Cosine similarity of the flattened tensors. Identical inputs (including
/// two zero vectors) give exactly 1; one zero vector gives 0.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("cosine_similarity", a, b)?;
    Ok(cosine_slice(a.data(), b.data()))
}

pub(crate) fn cosine_slice(a: &[f64], b: &[f64]) -> f64 {
    // rounding in the norms would otherwise leave identical inputs a few ulps short of 1
    if a == b {
        return 1.0;
    }
    let na = sum_sq(a).sqrt();
    let nb = sum_sq(b).sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (d / (na * nb)).clamp(-1.0, 1.0)
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}
