use crate::tensor::{Scalar, TensorError};

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeometry {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeometry {
    pub fn new(shape: &[usize], window: usize, stride: usize) -> Result<Self, TensorError> {
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "max_pool2d",
                detail: format!("input must be NCHW, got {shape:?}"),
            });
        }
        if window == 0 || stride == 0 {
            return Err(TensorError::InvalidArgument("max_pool2d window and stride must be positive".into()));
        }
        let (h, w) = (shape[2], shape[3]);
        if window > h || window > w {
            return Err(TensorError::EmptyOutput {
                op: "max_pool2d",
                detail: format!("window {window} larger than {h}×{w} input"),
            });
        }
        Ok(Self {
            planes: shape[0] * shape[1],
            h,
            w,
            window,
            stride,
            ho: (h - window) / stride + 1,
            wo: (w - window) / stride + 1,
        })
    }
}

/// Windowed maximum. Returns the output and, per output cell, the flat input
/// index of the first row-major maximum.
pub(crate) fn forward<T: Scalar>(geo: &PoolGeometry, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let out_len = geo.planes * geo.ho * geo.wo;
    let mut out = Vec::with_capacity(out_len);
    let mut argmax = Vec::with_capacity(out_len);
    for p in 0..geo.planes {
        let base = p * geo.h * geo.w;
        for i in 0..geo.ho {
            for j in 0..geo.wo {
                let mut best_idx = base + i * geo.stride * geo.w + j * geo.stride;
                let mut best = x[best_idx];
                for u in 0..geo.window {
                    for v in 0..geo.window {
                        let idx = base + (i * geo.stride + u) * geo.w + j * geo.stride + v;
                        // strict comparison keeps the first maximum on ties;
                        // a NaN wins so that it propagates
                        if x[idx] > best || (x[idx].is_nan() && !best.is_nan()) {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn backward<T: Scalar>(input_len: usize, argmax: &[usize], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (idx, g) in argmax.iter().zip(dy) {
        dx[*idx] += *g;
    }
    dx
}
