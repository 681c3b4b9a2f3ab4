//! 2-D cross-correlation (no kernel flip) over NCHW inputs and OIHW kernels.
//!
//! Two interchangeable kernels sit behind one contract: im2col + GEMM for
//! small kernels, and zero-padded FFT products for large ones. Both compute
//! each image independently, so results never depend on batch composition.

use std::ops::Range;

use rayon::prelude::*;

use crate::tensor::fft::{bins, bins_mut, mac, mac_conj, next_fast_len, Fft2d};
use crate::tensor::gemm::{gemm, MatRef};
use crate::tensor::{Scalar, TensorError};

/// Selects the convolution kernel. `Auto` picks FFT for stride-1 kernels of
/// at least 5×5 and im2col otherwise.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvAlgorithm {
    #[default]
    Auto,
    Direct,
    Fft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(
        x: &[usize],
        weights: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let mismatch = |detail: String| TensorError::ShapeMismatch { op: "conv2d", detail };
        if x.len() != 4 {
            return Err(mismatch(format!("input must be NCHW, got shape {x:?}")));
        }
        if weights.len() != 4 {
            return Err(mismatch(format!("weights must be OIHW, got shape {weights:?}")));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (n, c, h, w) = (x[0], x[1], x[2], x[3]);
        let (o, i, kh, kw) = (weights[0], weights[1], weights[2], weights[3]);
        if c != i {
            return Err(mismatch(format!("input has {c} channels but weights expect {i} (weights {weights:?})")));
        }
        if bias != [o] {
            return Err(mismatch(format!("bias shape {bias:?} does not match {o} output channels")));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::EmptyOutput {
                op: "conv2d",
                detail: format!("{kh}×{kw} kernel does not fit a {h}×{w} input with padding {padding}"),
            });
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        Ok(Self { n, c, h, w, o, kh, kw, stride, padding, ho, wo })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.ho, self.wo]
    }

    fn resolve(&self, algo: ConvAlgorithm) -> ConvAlgorithm {
        match algo {
            ConvAlgorithm::Auto if self.stride == 1 && self.kh * self.kw >= 25 => ConvAlgorithm::Fft,
            ConvAlgorithm::Auto => ConvAlgorithm::Direct,
            other => other,
        }
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.o * self.ho * self.wo
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }
}

/// Forward-pass state kept for the backward pass.
pub(crate) enum ConvSaved<T: Scalar> {
    Direct,
    Fft(FftSaved<T>),
}

pub(crate) struct FftSaved<T: Scalar> {
    rows: usize,
    cols: usize,
    /// `[n][c]` spectra of the padded input.
    x_spectra: Vec<T>,
    /// `[o][c]` kernel spectra.
    w_spectra: Vec<T>,
}

pub(crate) fn forward<T: Scalar>(
    geo: &ConvGeometry,
    x: &[T],
    weights: &[T],
    bias: &[T],
    algo: ConvAlgorithm,
    keep: bool,
) -> (Vec<T>, ConvSaved<T>) {
    match geo.resolve(algo) {
        ConvAlgorithm::Fft => {
            let (out, saved) = fft_forward(geo, x, weights, bias, keep);
            (out, ConvSaved::Fft(saved))
        }
        _ => (direct_forward(geo, x, weights, bias), ConvSaved::Direct),
    }
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weights: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    geo: &ConvGeometry,
    x: &[T],
    weights: &[T],
    saved: &ConvSaved<T>,
    dy: &[T],
    need_input: bool,
    need_weights: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let bias = need_bias.then(|| bias_grad(geo, dy));
    let (input, weights) = if !need_input && !need_weights {
        (None, None)
    } else {
        match saved {
            ConvSaved::Direct => direct_backward(geo, x, weights, dy, need_input, need_weights),
            ConvSaved::Fft(s) => fft_backward(geo, s, dy, need_input, need_weights),
        }
    };
    ConvGrads { input, weights, bias }
}

fn bias_grad<T: Scalar>(geo: &ConvGeometry, dy: &[T]) -> Vec<T> {
    let plane = geo.ho * geo.wo;
    let mut db = vec![T::zero(); geo.o];
    for img in dy.chunks(geo.out_len()) {
        for (o, g) in db.iter_mut().enumerate() {
            *g += img[o * plane..(o + 1) * plane].iter().copied().sum::<T>();
        }
    }
    db
}

// ---- im2col path -----------------------------------------------------------

fn im2col<T: Scalar>(geo: &ConvGeometry, x: &[T], col: &mut [T]) {
    let p = geo.ho * geo.wo;
    let pad = geo.padding as isize;
    for c in 0..geo.c {
        for u in 0..geo.kh {
            for v in 0..geo.kw {
                let row = &mut col[((c * geo.kh + u) * geo.kw + v) * p..][..p];
                for i in 0..geo.ho {
                    let y = (i * geo.stride + u) as isize - pad;
                    let dst = &mut row[i * geo.wo..(i + 1) * geo.wo];
                    if y < 0 || y >= geo.h as isize {
                        dst.iter_mut().for_each(|d| *d = T::zero());
                        continue;
                    }
                    let src = &x[(c * geo.h + y as usize) * geo.w..][..geo.w];
                    for (j, d) in dst.iter_mut().enumerate() {
                        let xx = (j * geo.stride + v) as isize - pad;
                        *d = if xx < 0 || xx >= geo.w as isize { T::zero() } else { src[xx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(geo: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let p = geo.ho * geo.wo;
    let pad = geo.padding as isize;
    for c in 0..geo.c {
        for u in 0..geo.kh {
            for v in 0..geo.kw {
                let row = &col[((c * geo.kh + u) * geo.kw + v) * p..][..p];
                for i in 0..geo.ho {
                    let y = (i * geo.stride + u) as isize - pad;
                    if y < 0 || y >= geo.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * geo.h + y as usize) * geo.w..][..geo.w];
                    for j in 0..geo.wo {
                        let xx = (j * geo.stride + v) as isize - pad;
                        if xx >= 0 && xx < geo.w as isize {
                            dst[xx as usize] += row[i * geo.wo + j];
                        }
                    }
                }
            }
        }
    }
}

fn direct_forward<T: Scalar>(geo: &ConvGeometry, x: &[T], weights: &[T], bias: &[T]) -> Vec<T> {
    let p = geo.ho * geo.wo;
    let k = geo.patch_len();
    let mut out = vec![T::zero(); geo.n * geo.out_len()];
    out.par_chunks_mut(geo.out_len()).zip(x.par_chunks(geo.in_len())).for_each(|(y, xi)| {
        let mut col = vec![T::zero(); k * p];
        im2col(geo, xi, &mut col);
        gemm(MatRef::row_major(weights, geo.o, k), MatRef::row_major(&col, k, p), y, false);
        for (o, b) in bias.iter().enumerate() {
            y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += *b);
        }
    });
    out
}

fn direct_backward<T: Scalar>(
    geo: &ConvGeometry,
    x: &[T],
    weights: &[T],
    dy: &[T],
    need_input: bool,
    need_weights: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = geo.ho * geo.wo;
    let k = geo.patch_len();
    let per_image: Vec<(Vec<T>, Vec<T>)> = x
        .par_chunks(geo.in_len())
        .zip(dy.par_chunks(geo.out_len()))
        .map(|(xi, dyi)| {
            let mut col = vec![T::zero(); k * p];
            let mut dw = Vec::new();
            if need_weights {
                im2col(geo, xi, &mut col);
                dw = vec![T::zero(); geo.o * k];
                gemm(MatRef::row_major(dyi, geo.o, p), MatRef::transposed(&col, p, k), &mut dw, false);
            }
            let mut dx = Vec::new();
            if need_input {
                gemm(MatRef::transposed(weights, k, geo.o), MatRef::row_major(dyi, geo.o, p), &mut col, false);
                dx = vec![T::zero(); geo.in_len()];
                col2im(geo, &col, &mut dx);
            }
            (dx, dw)
        })
        .collect();
    let input = need_input.then(|| per_image.iter().flat_map(|(dx, _)| dx.iter().copied()).collect());
    let weights_grad = need_weights.then(|| {
        let mut acc = vec![T::zero(); geo.o * k];
        for (_, dw) in &per_image {
            acc.iter_mut().zip(dw).for_each(|(a, g)| *a += *g);
        }
        acc
    });
    (input, weights_grad)
}

// ---- FFT path --------------------------------------------------------------
//
// Spectral products run over blocks of bins, with the reduction index in a
// fixed ascending order, so every output value sees the same sequence of
// operations whatever the batch size.

const BIN_BLOCK: usize = 512;

fn fft_plan<T: Scalar>(geo: &ConvGeometry) -> Fft2d<T> {
    Fft2d::new(next_fast_len(geo.h + 2 * geo.padding), next_fast_len(geo.w + 2 * geo.padding))
}

fn block_ranges(f: usize) -> impl Iterator<Item = Range<usize>> {
    (0..f).step_by(BIN_BLOCK).map(move |b| b..(b + BIN_BLOCK).min(f))
}

/// Spectra of `count` planes of `h × w`, placed at `(oy, ox)`.
#[allow(clippy::too_many_arguments)]
fn spectra<T: Scalar>(fft: &Fft2d<T>, planes: &[T], count: usize, h: usize, w: usize, oy: usize, ox: usize) -> Vec<T> {
    let s = 2 * fft.bins();
    let mut out = vec![T::zero(); count * s];
    out.par_chunks_mut(s).zip(planes.par_chunks(h * w)).for_each_init(
        || fft.workspace(),
        |ws, (spec, plane)| fft.forward(plane, h, w, oy, ox, spec, ws),
    );
    out
}

fn fft_forward<T: Scalar>(
    geo: &ConvGeometry,
    x: &[T],
    weights: &[T],
    bias: &[T],
    keep: bool,
) -> (Vec<T>, FftSaved<T>) {
    let fft = fft_plan::<T>(geo);
    let f = fft.bins();
    let s = 2 * f;
    let (n, c) = (geo.n, geo.c);
    let w_spectra = spectra(&fft, weights, geo.o * c, geo.kh, geo.kw, 0, 0);
    let x_spectra = spectra(&fft, x, n * c, geo.h, geo.w, geo.padding, geo.padding);
    // [o][n] output spectra: y(n, o) = Σ_c x(n, c) · conj(w(o, c))
    let mut y_spectra = vec![T::zero(); geo.o * n * s];
    y_spectra.par_chunks_mut(n * s).enumerate().for_each(|(o, ys)| {
        let w = |ci: usize| &w_spectra[(o * c + ci) * s..][..s];
        let x = |img: usize, ci: usize| &x_spectra[(img * c + ci) * s..][..s];
        for r in block_ranges(f) {
            let mut ci = 0;
            while ci + 4 <= c {
                let ws = [0, 1, 2, 3].map(|j| bins(w(ci + j), f, r.clone()));
                for (img, acc) in ys.chunks_mut(s).enumerate() {
                    let xs = [0, 1, 2, 3].map(|j| bins(x(img, ci + j), f, r.clone()));
                    mac_conj(bins_mut(acc, f, r.clone()), xs, ws);
                }
                ci += 4;
            }
            for ci in ci..c {
                for (img, acc) in ys.chunks_mut(s).enumerate() {
                    mac_conj(bins_mut(acc, f, r.clone()), [bins(x(img, ci), f, r.clone())], [bins(w(ci), f, r.clone())]);
                }
            }
        }
    });
    let mut out = vec![T::zero(); n * geo.out_len()];
    let used_rows = (geo.ho - 1) * geo.stride + 1;
    out.par_chunks_mut(geo.out_len()).enumerate().for_each_init(
        || (fft.workspace(), vec![T::zero(); used_rows * fft.cols]),
        |(ws, frame), (img, y)| {
            for (o, yo) in y.chunks_mut(geo.ho * geo.wo).enumerate() {
                fft.inverse(&y_spectra[(o * n + img) * s..][..s], 0..used_rows, frame, ws);
                for i in 0..geo.ho {
                    let row = &frame[i * geo.stride * fft.cols..];
                    for j in 0..geo.wo {
                        yo[i * geo.wo + j] = row[j * geo.stride] + bias[o];
                    }
                }
            }
        },
    );
    let saved = FftSaved {
        rows: fft.rows,
        cols: fft.cols,
        x_spectra: if keep { x_spectra } else { Vec::new() },
        w_spectra: if keep { w_spectra } else { Vec::new() },
    };
    (out, saved)
}

fn fft_backward<T: Scalar>(
    geo: &ConvGeometry,
    saved: &FftSaved<T>,
    dy: &[T],
    need_input: bool,
    need_weights: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let fft = Fft2d::<T>::new(saved.rows, saved.cols);
    let f = fft.bins();
    let s = 2 * f;
    let (n, c, o) = (geo.n, geo.c, geo.o);
    // stride-1 extent of the correlation before subsampling
    let full_h = geo.h + 2 * geo.padding - geo.kh + 1;
    let full_w = geo.w + 2 * geo.padding - geo.kw + 1;
    let expanded: Vec<T> = if geo.stride == 1 {
        dy.to_vec()
    } else {
        let mut e = vec![T::zero(); n * o * full_h * full_w];
        for (dst, src) in e.chunks_mut(full_h * full_w).zip(dy.chunks(geo.ho * geo.wo)) {
            for i in 0..geo.ho {
                for j in 0..geo.wo {
                    dst[i * geo.stride * full_w + j * geo.stride] = src[i * geo.wo + j];
                }
            }
        }
        e
    };
    let dy_spectra = spectra(&fft, &expanded, n * o, full_h, full_w, 0, 0);
    drop(expanded);

    let input = need_input.then(|| {
        // [c][n] spectra: dx(n, c) = Σ_o dy(n, o) · w(o, c)
        let mut dx_spectra = vec![T::zero(); c * n * s];
        dx_spectra.par_chunks_mut(n * s).enumerate().for_each(|(ci, acc)| {
            let w = |oi: usize| &saved.w_spectra[(oi * c + ci) * s..][..s];
            let d = |img: usize, oi: usize| &dy_spectra[(img * o + oi) * s..][..s];
            for r in block_ranges(f) {
                let mut oi = 0;
                while oi + 4 <= o {
                    let ws = [0, 1, 2, 3].map(|j| bins(w(oi + j), f, r.clone()));
                    for (img, a) in acc.chunks_mut(s).enumerate() {
                        let ds = [0, 1, 2, 3].map(|j| bins(d(img, oi + j), f, r.clone()));
                        mac(bins_mut(a, f, r.clone()), ds, ws);
                    }
                    oi += 4;
                }
                for oi in oi..o {
                    for (img, a) in acc.chunks_mut(s).enumerate() {
                        mac(bins_mut(a, f, r.clone()), [bins(d(img, oi), f, r.clone())], [bins(w(oi), f, r.clone())]);
                    }
                }
            }
        });
        let mut dx = vec![T::zero(); n * geo.in_len()];
        let rows = geo.padding..geo.padding + geo.h;
        dx.par_chunks_mut(geo.in_len()).enumerate().for_each_init(
            || (fft.workspace(), vec![T::zero(); geo.h * fft.cols]),
            |(ws, frame), (img, dxi)| {
                for (ci, dst) in dxi.chunks_mut(geo.h * geo.w).enumerate() {
                    fft.inverse(&dx_spectra[(ci * n + img) * s..][..s], rows.clone(), frame, ws);
                    for (y, d) in dst.chunks_mut(geo.w).enumerate() {
                        d.copy_from_slice(&frame[y * fft.cols + geo.padding..][..geo.w]);
                    }
                }
            },
        );
        dx
    });

    let weights = need_weights.then(|| {
        let kk = geo.kh * geo.kw;
        let mut dw = vec![T::zero(); o * c * kk];
        dw.par_chunks_mut(c * kk).enumerate().for_each_init(
            || (fft.workspace(), vec![T::zero(); c * s], vec![T::zero(); geo.kh * fft.cols]),
            |(ws, acc, frame), (oi, dwo)| {
                // dw(o, c) = Σ_n x(n, c) · conj(dy(n, o))
                acc.iter_mut().for_each(|v| *v = T::zero());
                let d = |img: usize| &dy_spectra[(img * o + oi) * s..][..s];
                let x = |img: usize, ci: usize| &saved.x_spectra[(img * c + ci) * s..][..s];
                for r in block_ranges(f) {
                    let mut img = 0;
                    while img + 4 <= n {
                        let ds = [0, 1, 2, 3].map(|j| bins(d(img + j), f, r.clone()));
                        for (ci, a) in acc.chunks_mut(s).enumerate() {
                            let xs = [0, 1, 2, 3].map(|j| bins(x(img + j, ci), f, r.clone()));
                            mac_conj(bins_mut(a, f, r.clone()), xs, ds);
                        }
                        img += 4;
                    }
                    for img in img..n {
                        for (ci, a) in acc.chunks_mut(s).enumerate() {
                            mac_conj(bins_mut(a, f, r.clone()), [bins(x(img, ci), f, r.clone())], [bins(d(img), f, r.clone())]);
                        }
                    }
                }
                for (ci, dst) in dwo.chunks_mut(kk).enumerate() {
                    fft.inverse(&acc[ci * s..(ci + 1) * s], 0..geo.kh, frame, ws);
                    for (u, d) in dst.chunks_mut(geo.kw).enumerate() {
                        d.copy_from_slice(&frame[u * fft.cols..][..geo.kw]);
                    }
                }
            },
        );
        dw
    });
    (input, weights)
}
