//! Independent oracles shared by the integration tests: naive-loop reference
//! kernels, brute-force metric sweeps and a central finite-difference checker.
#![allow(dead_code)]

use nestnet_core::tensor::{Graph, NodeId, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_values(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let len = shape.iter().product();
    let values = random_values(rng, len).into_iter().map(T::of).collect();
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// Six nested loops, straight from the definition of cross-correlation.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (o, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                    continue;
                                }
                                acc += x[((b * c + ic) * h + y as usize) * w + xx as usize]
                                    * k[((oc * c + ic) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((b * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

pub fn naive_max_pool(x: &[f64], (planes, h, w): (usize, usize, usize), window: usize, stride: usize) -> Vec<f64> {
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let mut out = Vec::new();
    for p in 0..planes {
        for i in 0..ho {
            for j in 0..wo {
                let mut best = f64::NEG_INFINITY;
                for u in 0..window {
                    for v in 0..window {
                        best = best.max(x[(p * h + i * stride + u) * w + j * stride + v]);
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Relative error with a floor on the denominator so that gradients which
/// are zero up to round-off compare as absolute differences.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of `loss` with respect to one input of an op.
///
/// `build` receives fresh leaf nodes for `inputs` (all requiring grad) and
/// returns a scalar node. Checks `coords` (or every coordinate when `None`)
/// of input `which` and returns the worst relative error.
pub fn finite_difference_worst(
    inputs: &[Tensor<f64>],
    which: usize,
    coords: Option<&[usize]>,
    rel_step: f64,
    build: &dyn Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> f64 {
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.input(t.clone(), false)).collect();
        let out = build(&mut g, &ids);
        g.value(out).item().unwrap()
    };
    let mut g = Graph::<f64>::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, &ids);
    g.backward(out).unwrap();
    let analytic = g.grad(ids[which]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[which].len()]);
    let all: Vec<usize> = (0..inputs[which].len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut worst = 0.0f64;
    for &idx in coords {
        let x0 = inputs[which].values()[idx];
        let h = rel_step * x0.abs().max(1.0);
        let mut plus = inputs.to_vec();
        plus[which].values_mut()[idx] = x0 + h;
        let mut minus = inputs.to_vec();
        minus[which].values_mut()[idx] = x0 - h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        worst = worst.max(rel_err(analytic[idx], numeric));
    }
    worst
}

/// Fraction of impostor scores accepted and genuine scores rejected.
pub fn brute_rates(genuine: &[f32], impostor: &[f32], t: f32) -> (f64, f64) {
    let fm = impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
    let fnm = genuine.iter().filter(|&&s| s < t).count() as f64 / genuine.len() as f64;
    (fm, fnm)
}

/// Exhaustive EER: every score value, every midpoint and both infinities are
/// tried; the lowest threshold with the smallest |FMR − FNMR| wins.
pub fn brute_force_eer(genuine: &[f32], impostor: &[f32]) -> (f64, f64, f64) {
    let mut candidates: Vec<f32> = genuine.iter().chain(impostor).copied().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut thresholds = vec![f32::NEG_INFINITY, f32::INFINITY];
    for w in candidates.windows(2) {
        thresholds.push(w[0]);
        thresholds.push(w[1]);
        thresholds.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    thresholds.extend(candidates.iter().copied());
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<(f64, f32, f64, f64)> = None;
    for t in thresholds {
        let (fm, fnm) = brute_rates(genuine, impostor, t);
        let gap = (fm - fnm).abs();
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, t, fm, fnm));
        }
    }
    let (_, _, fm, fnm) = best.unwrap();
    ((fm + fnm) / 2.0, fm, fnm)
}
