//! Small dense-vector helpers shared by the registry and the meta dictionary.
//!
//! Embeddings are plain `Vec<f64>`; everything stored by this crate is unit length,
//! which turns cosine similarity into a dot product.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VectorError {
    #[error("vector is empty")]
    Empty,
    #[error("vector has zero norm and cannot be normalized")]
    ZeroNorm,
    #[error("vector contains a non-finite component")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine similarity. Returns 0 when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

/// Vectors whose norm is this close to 1 are already unit and are returned untouched, so
/// normalizing twice is bit-identical to normalizing once.
const UNIT_TOLERANCE: f64 = 1e-12;

/// L2-normalizes `v`, rejecting empty, zero and non-finite input.
pub fn normalized(v: &[f64]) -> Result<Vec<f64>, VectorError> {
    if v.is_empty() {
        return Err(VectorError::Empty);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(VectorError::NonFinite);
    }
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(VectorError::ZeroNorm);
    }
    if (n - 1.0).abs() <= UNIT_TOLERANCE {
        return Ok(v.to_vec());
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Arithmetic mean of equally sized vectors.
pub fn mean<'a, I>(vectors: I) -> Result<Vec<f64>, VectorError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next().ok_or(VectorError::Empty)?;
    let mut acc = first.to_vec();
    let mut count = 1usize;
    for v in iter {
        if v.len() != acc.len() {
            return Err(VectorError::DimensionMismatch {
                expected: acc.len(),
                actual: v.len(),
            });
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
        count += 1;
    }
    let n = count as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// L2-normalized mean, the aggregate used for concept and scenario embeddings.
///
/// Summation runs over the inputs sorted lexicographically so the result does not depend on
/// input order, down to the last bit.
pub fn normalized_mean<'a, I>(vectors: I) -> Result<Vec<f64>, VectorError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut sorted: Vec<&[f64]> = vectors.into_iter().collect();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or_else(|| a.len().cmp(&b.len()))
    });
    normalized(&mean(sorted)?)
}

/// Index of the maximum element, lowest index on ties. `None` for empty input.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_three_four() {
        assert_eq!(normalized(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn rejects_zero_vector() {
        assert_eq!(normalized(&[0.0, 0.0]), Err(VectorError::ZeroNorm));
        assert_eq!(normalized(&[]), Err(VectorError::Empty));
        assert_eq!(normalized(&[f64::NAN, 1.0]), Err(VectorError::NonFinite));
    }

    #[test]
    fn mean_checks_dimensions() {
        let a = [1.0, 0.0];
        let b = [1.0, 0.0, 0.0];
        assert!(matches!(
            mean([&a[..], &b[..]]),
            Err(VectorError::DimensionMismatch { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.9, 0.9, 0.1]), Some(1));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn normalized_mean_is_order_independent_bitwise() {
        let a = [0.3, 0.1, 0.7];
        let b = [0.11, 0.93, 0.2];
        let c = [0.5, 0.5, 0.01];
        let x = normalized_mean([&a[..], &b[..], &c[..]]).unwrap();
        let y = normalized_mean([&c[..], &a[..], &b[..]]).unwrap();
        assert_eq!(x, y);
    }
}
