//! Group normalization over `[N, C, ...]` tensors.

use rayon::prelude::*;

use crate::tensor::{Scalar, TensorError};

#[derive(Clone, Copy, Debug)]
pub(crate) struct GroupGeometry {
    pub c: usize,
    pub spatial: usize,
    pub groups: usize,
}

impl GroupGeometry {
    pub fn new(shape: &[usize], groups: usize, gamma: &[usize], beta: &[usize]) -> Result<Self, TensorError> {
        if shape.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "group_norm",
                detail: format!("input must be at least [N, C], got {shape:?}"),
            });
        }
        let c = shape[1];
        if groups == 0 || groups > c || !c.is_multiple_of(groups) {
            return Err(TensorError::InvalidGroups { channels: c, groups });
        }
        if gamma != [c] || beta != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "group_norm",
                detail: format!("gamma {gamma:?} and beta {beta:?} must both be [{c}]"),
            });
        }
        Ok(Self { c, spatial: shape[2..].iter().product(), groups })
    }

    fn group_len(&self) -> usize {
        self.c / self.groups * self.spatial
    }

    fn sample_len(&self) -> usize {
        self.c * self.spatial
    }
}

/// Per `(sample, group)` mean and reciprocal standard deviation.
pub(crate) struct GroupStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn forward<T: Scalar>(
    geo: &GroupGeometry,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, GroupStats<T>) {
    let mut out = vec![T::zero(); x.len()];
    let gl = geo.group_len();
    let cpg = geo.c / geo.groups;
    let stats: Vec<(T, T)> = out
        .par_chunks_mut(gl)
        .zip(x.par_chunks(gl))
        .enumerate()
        .map(|(idx, (y, xg))| {
            let g = idx % geo.groups;
            let mean = xg.iter().map(|v| v.as_f64()).sum::<f64>() / gl as f64;
            let var = xg.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / gl as f64;
            let rstd = T::of(1.0 / (var + eps).sqrt());
            let mean = T::of(mean);
            for (ci, (yc, xc)) in y.chunks_mut(geo.spatial).zip(xg.chunks(geo.spatial)).enumerate() {
                let ch = g * cpg + ci;
                for (yv, xv) in yc.iter_mut().zip(xc) {
                    *yv = gamma[ch] * ((*xv - mean) * rstd) + beta[ch];
                }
            }
            (mean, rstd)
        })
        .collect();
    let (mean, rstd) = stats.into_iter().unzip();
    (out, GroupStats { mean, rstd })
}

pub(crate) struct GroupNormGrads<T> {
    pub input: Option<Vec<T>>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub(crate) fn backward<T: Scalar>(
    geo: &GroupGeometry,
    x: &[T],
    gamma: &[T],
    stats: &GroupStats<T>,
    dy: &[T],
    need_input: bool,
) -> GroupNormGrads<T> {
    let gl = geo.group_len();
    let cpg = geo.c / geo.groups;
    let m = T::of(gl as f64);
    let mut dgamma = vec![T::zero(); geo.c];
    let mut dbeta = vec![T::zero(); geo.c];
    for (s, (xs, dys)) in x.chunks(geo.sample_len()).zip(dy.chunks(geo.sample_len())).enumerate() {
        for ch in 0..geo.c {
            let idx = s * geo.groups + ch / cpg;
            let (mean, rstd) = (stats.mean[idx], stats.rstd[idx]);
            let span = ch * geo.spatial..(ch + 1) * geo.spatial;
            for (xv, g) in xs[span.clone()].iter().zip(&dys[span]) {
                dgamma[ch] += *g * (*xv - mean) * rstd;
                dbeta[ch] += *g;
            }
        }
    }
    let input = need_input.then(|| {
        let mut dx = vec![T::zero(); x.len()];
        dx.par_chunks_mut(gl).zip(x.par_chunks(gl)).zip(dy.par_chunks(gl)).enumerate().for_each(
            |(idx, ((dxg, xg), dyg))| {
                let g = idx % geo.groups;
                let (mean, rstd) = (stats.mean[idx], stats.rstd[idx]);
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for (ci, (xc, dc)) in xg.chunks(geo.spatial).zip(dyg.chunks(geo.spatial)).enumerate() {
                    let gm = gamma[g * cpg + ci];
                    for (xv, d) in xc.iter().zip(dc) {
                        let dxhat = *d * gm;
                        sum_d += dxhat;
                        sum_dx += dxhat * (*xv - mean) * rstd;
                    }
                }
                for (ci, ((out, xc), dc)) in
                    dxg.chunks_mut(geo.spatial).zip(xg.chunks(geo.spatial)).zip(dyg.chunks(geo.spatial)).enumerate()
                {
                    let gm = gamma[g * cpg + ci];
                    for ((o, xv), d) in out.iter_mut().zip(xc).zip(dc) {
                        let xhat = (*xv - mean) * rstd;
                        *o = rstd / m * (m * *d * gm - sum_d - xhat * sum_dx);
                    }
                }
            },
        );
        dx
    });
    GroupNormGrads { input, gamma: dgamma, beta: dbeta }
}
