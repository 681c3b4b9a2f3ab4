//! Zero-padded 2-D real FFTs used by the large-kernel convolution path.
//!
//! A spectrum of a `rows × cols` frame has `f = half · rows` bins, stored as
//! `2f` reals: all real parts, then all imaginary parts. Bins are ordered
//! column-major over the half-spectrum; pointwise products never care about
//! the order, so the transpose back is skipped.

use std::ops::Range;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::Scalar;

/// Smallest integer `>= n` whose only prime factors are 2, 3, 5 and 7.
pub(crate) fn next_fast_len(n: usize) -> usize {
    let mut candidate = n.max(1);
    loop {
        let mut rest = candidate;
        for p in [2, 3, 5, 7] {
            while rest.is_multiple_of(p) {
                rest /= p;
            }
        }
        if rest == 1 {
            return candidate;
        }
        candidate += 1;
    }
}

pub(crate) struct Fft2d<T: Scalar> {
    pub rows: usize,
    pub cols: usize,
    pub half: usize,
    r2c: Arc<dyn RealToComplex<T>>,
    c2r: Arc<dyn ComplexToReal<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

/// Per-thread scratch space for one `Fft2d`.
pub(crate) struct FftWorkspace<T: Scalar> {
    row_real: Vec<T>,
    row_spec: Vec<Complex<T>>,
    real_scratch: Vec<Complex<T>>,
    col_scratch: Vec<Complex<T>>,
    transposed: Vec<Complex<T>>,
}

impl<T: Scalar> Fft2d<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut real_planner = RealFftPlanner::<T>::new();
        let mut planner = FftPlanner::<T>::new();
        Self {
            rows,
            cols,
            half: cols / 2 + 1,
            r2c: real_planner.plan_fft_forward(cols),
            c2r: real_planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    /// Number of complex bins `f`; a stored spectrum holds `2f` reals.
    pub fn bins(&self) -> usize {
        self.half * self.rows
    }

    pub fn workspace(&self) -> FftWorkspace<T> {
        let real_scratch = self.r2c.get_scratch_len().max(self.c2r.get_scratch_len());
        let col_scratch = self.col_fwd.get_inplace_scratch_len().max(self.col_inv.get_inplace_scratch_len());
        FftWorkspace {
            row_real: vec![T::zero(); self.cols],
            row_spec: vec![Complex::default(); self.half],
            real_scratch: vec![Complex::default(); real_scratch],
            col_scratch: vec![Complex::default(); col_scratch],
            transposed: vec![Complex::default(); self.bins()],
        }
    }

    /// Transform the `h × w` block `src`, placed at `(oy, ox)` in an
    /// otherwise zero `rows × cols` frame.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(&self, src: &[T], h: usize, w: usize, oy: usize, ox: usize, out: &mut [T], ws: &mut FftWorkspace<T>) {
        debug_assert!(oy + h <= self.rows && ox + w <= self.cols);
        let f = self.bins();
        debug_assert_eq!(out.len(), 2 * f);
        let rows = self.rows;
        let spec = &mut ws.transposed;
        for r in 0..rows {
            if r < oy || r >= oy + h {
                for k in 0..self.half {
                    spec[k * rows + r] = Complex::default();
                }
                continue;
            }
            ws.row_real.iter_mut().for_each(|v| *v = T::zero());
            let sr = r - oy;
            ws.row_real[ox..ox + w].copy_from_slice(&src[sr * w..(sr + 1) * w]);
            self.r2c
                .process_with_scratch(&mut ws.row_real, &mut ws.row_spec, &mut ws.real_scratch)
                .expect("row fft buffer sizes are fixed at planning time");
            for (k, v) in ws.row_spec.iter().enumerate() {
                spec[k * rows + r] = *v;
            }
        }
        self.col_fwd.process_with_scratch(spec, &mut ws.col_scratch);
        let (re, im) = out.split_at_mut(f);
        for ((r, i), v) in re.iter_mut().zip(im.iter_mut()).zip(spec.iter()) {
            *r = v.re;
            *i = v.im;
        }
    }

    /// Normalized inverse transform of `spec`, producing only the frame rows
    /// in `rows`; `out` receives `rows.len() × cols` values.
    pub fn inverse(&self, spec: &[T], rows: Range<usize>, out: &mut [T], ws: &mut FftWorkspace<T>) {
        let f = self.bins();
        debug_assert_eq!(spec.len(), 2 * f);
        debug_assert!(rows.end <= self.rows && out.len() == rows.len() * self.cols);
        let (re, im) = spec.split_at(f);
        for ((v, r), i) in ws.transposed.iter_mut().zip(re).zip(im) {
            *v = Complex::new(*r, *i);
        }
        self.col_inv.process_with_scratch(&mut ws.transposed, &mut ws.col_scratch);
        let scale = T::one() / T::of((self.rows * self.cols) as f64);
        let n = self.rows;
        for (dst, r) in out.chunks_mut(self.cols).zip(rows) {
            for k in 0..self.half {
                ws.row_spec[k] = ws.transposed[k * n + r];
            }
            ws.row_spec[0].im = T::zero();
            if self.cols.is_multiple_of(2) {
                ws.row_spec[self.half - 1].im = T::zero();
            }
            self.c2r
                .process_with_scratch(&mut ws.row_spec, &mut ws.row_real, &mut ws.real_scratch)
                .expect("imaginary parts of the real-valued bins are zeroed above");
            for (d, v) in dst.iter_mut().zip(&ws.row_real) {
                *d = *v * scale;
            }
        }
    }
}

/// Split views of the bins `range` of a stored spectrum.
#[inline]
pub(crate) fn bins<T>(spec: &[T], f: usize, range: Range<usize>) -> (&[T], &[T]) {
    (&spec[range.start..range.end], &spec[f + range.start..f + range.end])
}

#[inline]
pub(crate) fn bins_mut<T>(spec: &mut [T], f: usize, range: Range<usize>) -> (&mut [T], &mut [T]) {
    let (re, im) = spec.split_at_mut(f);
    (&mut re[range.clone()], &mut im[range])
}

/// Split re/im views of one stored spectrum block.
pub(crate) type Bins<'a, T> = (&'a [T], &'a [T]);

macro_rules! dispatch {
    ($name:ident, $body:ident) => {
        /// `acc += Σ_j a[j] ⊗ b[j]` over a block of bins, adding the terms in
        /// order `j = 0, 1, ...`.
        #[inline]
        pub(crate) fn $name<T: Scalar, const N: usize>(acc: (&mut [T], &mut [T]), a: [Bins<'_, T>; N], b: [Bins<'_, T>; N]) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide<T: Scalar, const N: usize>(acc: (&mut [T], &mut [T]), a: [Bins<'_, T>; N], b: [Bins<'_, T>; N]) {
                    $body(acc, a, b)
                }
                if std::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { wide(acc, a, b) };
                }
            }
            $body(acc, a, b)
        }
    };
}

// Plain multiplies and adds only (no fused multiply-add), so the wide and
// narrow variants round identically. Keeping the running sum in a register
// across the `N` terms does not change the order of additions.
#[inline(always)]
fn mac_conj_body<T: Scalar, const N: usize>((sr, si): (&mut [T], &mut [T]), a: [Bins<'_, T>; N], b: [Bins<'_, T>; N]) {
    let n = sr.len();
    let si = &mut si[..n];
    let a = a.map(|(r, i)| (&r[..n], &i[..n]));
    let b = b.map(|(r, i)| (&r[..n], &i[..n]));
    for k in 0..n {
        let (mut re, mut im) = (sr[k], si[k]);
        for j in 0..N {
            re += a[j].0[k] * b[j].0[k] + a[j].1[k] * b[j].1[k];
            im += a[j].1[k] * b[j].0[k] - a[j].0[k] * b[j].1[k];
        }
        sr[k] = re;
        si[k] = im;
    }
}

#[inline(always)]
fn mac_body<T: Scalar, const N: usize>((sr, si): (&mut [T], &mut [T]), a: [Bins<'_, T>; N], b: [Bins<'_, T>; N]) {
    let n = sr.len();
    let si = &mut si[..n];
    let a = a.map(|(r, i)| (&r[..n], &i[..n]));
    let b = b.map(|(r, i)| (&r[..n], &i[..n]));
    for k in 0..n {
        let (mut re, mut im) = (sr[k], si[k]);
        for j in 0..N {
            re += a[j].0[k] * b[j].0[k] - a[j].1[k] * b[j].1[k];
            im += a[j].0[k] * b[j].1[k] + a[j].1[k] * b[j].0[k];
        }
        sr[k] = re;
        si[k] = im;
    }
}

dispatch!(mac_conj, mac_conj_body);
dispatch!(mac, mac_body);
