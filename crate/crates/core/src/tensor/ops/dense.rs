//! Row-wise ops over `N × D` matrices.

use crate::tensor::gemm::{gemm, MatRef};
use crate::tensor::{Scalar, TensorError};

pub(crate) fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize), TensorError> {
    match shape {
        [n, d] => Ok((*n, *d)),
        _ => Err(TensorError::ShapeMismatch { op, detail: format!("expected an N×D matrix, got {shape:?}") }),
    }
}

/// `y = x Wᵀ + b`, one row at a time so a row never depends on its batch.
pub(crate) fn fc_forward<T: Scalar>(x: &[T], weights: &[T], bias: &[T], n: usize, d: usize, k: usize) -> Vec<T> {
    // each output element accumulates over `d` in the same order for any `n`
    let mut out = bias.repeat(n);
    gemm(MatRef::row_major(x, n, d), MatRef::transposed(weights, d, k), &mut out, true);
    out
}

pub(crate) struct FcGrads<T> {
    pub input: Option<Vec<T>>,
    pub weights: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn fc_backward<T: Scalar>(
    x: &[T],
    weights: &[T],
    dy: &[T],
    n: usize,
    d: usize,
    k: usize,
    need: [bool; 3],
) -> FcGrads<T> {
    let input = need[0].then(|| {
        let mut dx = vec![T::zero(); n * d];
        gemm(MatRef::row_major(dy, n, k), MatRef::row_major(weights, k, d), &mut dx, false);
        dx
    });
    let weights = need[1].then(|| {
        let mut dw = vec![T::zero(); k * d];
        gemm(MatRef::transposed(dy, k, n), MatRef::row_major(x, n, d), &mut dw, false);
        dw
    });
    let bias = need[2].then(|| {
        let mut db = vec![T::zero(); k];
        for row in dy.chunks(k) {
            db.iter_mut().zip(row).for_each(|(a, g)| *a += *g);
        }
        db
    });
    FcGrads { input, weights, bias }
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, y) in x.chunks(k).zip(out.chunks_mut(k)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (yv, xv) in y.iter_mut().zip(row) {
            *yv = (*xv - max).exp();
            total += *yv;
        }
        y.iter_mut().for_each(|v| *v = *v / total);
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], k: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dr), out) in y.chunks(k).zip(dy.chunks(k)).zip(dx.chunks_mut(k)) {
        let dot: T = yr.iter().zip(dr).map(|(a, b)| *a * *b).sum();
        for ((o, yv), dv) in out.iter_mut().zip(yr).zip(dr) {
            *o = *yv * (*dv - dot);
        }
    }
    dx
}

/// Divide every row by its Euclidean norm. Returns the output and the norms.
pub(crate) fn l2_normalize_rows<T: Scalar>(x: &[T], d: usize) -> Result<(Vec<T>, Vec<T>), TensorError> {
    let mut out = vec![T::zero(); x.len()];
    let mut norms = Vec::with_capacity(x.len() / d);
    for (row_idx, (row, y)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(TensorError::ZeroNorm { row: row_idx });
        }
        let norm = T::of(norm);
        y.iter_mut().zip(row).for_each(|(yv, xv)| *yv = *xv / norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

pub(crate) fn l2_normalize_backward<T: Scalar>(y: &[T], norms: &[T], dy: &[T], d: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for (((yr, dr), out), norm) in y.chunks(d).zip(dy.chunks(d)).zip(dx.chunks_mut(d)).zip(norms) {
        let dot: T = yr.iter().zip(dr).map(|(a, b)| *a * *b).sum();
        for ((o, yv), dv) in out.iter_mut().zip(yr).zip(dr) {
            *o = (*dv - *yv * dot) / *norm;
        }
    }
    dx
}

/// Mean cross-entropy of `softmax(logits)` against class indices.
/// Returns the loss and the softmax probabilities.
pub(crate) fn cross_entropy<T: Scalar>(
    logits: &[T],
    labels: &[usize],
    k: usize,
) -> Result<(T, Vec<T>), TensorError> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::LabelOutOfRange { label: bad, classes: k });
    }
    let probs = softmax_rows(logits, k);
    let mut total = 0.0f64;
    for (row, &label) in logits.chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max).as_f64();
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        total += lse - row[label].as_f64();
    }
    Ok((T::of(total / labels.len() as f64), probs))
}

pub(crate) fn cross_entropy_backward<T: Scalar>(probs: &[T], labels: &[usize], k: usize, upstream: T) -> Vec<T> {
    let scale = upstream / T::of(labels.len() as f64);
    let mut dx: Vec<T> = probs.iter().map(|p| *p * scale).collect();
    for (row, &label) in dx.chunks_mut(k).zip(labels) {
        row[label] -= scale;
    }
    dx
}
