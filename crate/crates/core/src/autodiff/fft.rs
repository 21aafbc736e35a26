//! Batched 2D FFT over interleaved complex buffers.
//!
//! Convention: the forward transform is unnormalized, the inverse carries the
//! full 1/(H*W) factor, so `ifft2(fft2(x)) = x`. Buffers hold interleaved
//! `(re, im)` pairs; a map of shape `[.., H, W, 2]` is a batch of
//! `leading-dims` many H x W spectra.

use crate::tensor::Scalar;
use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

/// View an interleaved (re, im) buffer as complex values without copying.
///
/// SAFETY: `Complex<T>` is `repr(C)` with exactly two `T` fields, so a slice
/// of interleaved pairs has identical size and alignment.
fn as_complex_mut<T: Scalar>(buf: &mut [T]) -> &mut [Complex<T>] {
    debug_assert_eq!(buf.len() % 2, 0);
    unsafe {
        std::slice::from_raw_parts_mut(buf.as_mut_ptr() as *mut Complex<T>, buf.len() / 2)
    }
}

/// Cache-blocked out-of-place transpose.
fn transpose<T: Copy>(src: &[Complex<T>], rows: usize, cols: usize, dst: &mut [Complex<T>]) {
    const B: usize = 32;
    for rb in (0..rows).step_by(B) {
        let r_end = (rb + B).min(rows);
        for cb in (0..cols).step_by(B) {
            let c_end = (cb + B).min(cols);
            for r in rb..r_end {
                for c in cb..c_end {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Blocked transpose that keeps only the real parts.
fn transpose_re<T: Scalar>(src: &[Complex<T>], rows: usize, cols: usize, dst: &mut [T]) {
    const B: usize = 32;
    for rb in (0..rows).step_by(B) {
        let r_end = (rb + B).min(rows);
        for cb in (0..cols).step_by(B) {
            let c_end = (cb + B).min(cols);
            for r in rb..r_end {
                for c in cb..c_end {
                    dst[c * rows + r] = src[r * cols + c].re;
                }
            }
        }
    }
}

/// Reusable planner plus working buffers, owned by one graph.
pub struct FftContext<T: Scalar> {
    planner: FftPlanner<T>,
    tmp: Vec<Complex<T>>,
    work: Vec<Complex<T>>,
    scratch: Vec<Complex<T>>,
}

impl<T: Scalar> Default for FftContext<T> {
    fn default() -> Self {
        FftContext {
            planner: FftPlanner::new(),
            tmp: Vec::new(),
            work: Vec::new(),
            scratch: Vec::new(),
        }
    }
}

impl<T: Scalar> FftContext<T> {
    /// Transform each H x W image in `data` (interleaved complex,
    /// batch-major). `normalize` applies the 1/(H*W) factor used by the
    /// inverse convention.
    pub fn fft2_batch(
        &mut self,
        data: &[T],
        batch: usize,
        h: usize,
        w: usize,
        direction: FftDirection,
        normalize: bool,
    ) -> Vec<T> {
        let fft_w = self.planner.plan_fft(w, direction);
        let fft_h = self.planner.plan_fft(h, direction);
        let mut out = data.to_vec();
        let zero = Complex::new(T::zero(), T::zero());
        self.tmp.resize(h * w, zero);
        let scratch_len = fft_w
            .get_inplace_scratch_len()
            .max(fft_h.get_inplace_scratch_len());
        if self.scratch.len() < scratch_len {
            self.scratch.resize(scratch_len, zero);
        }
        let scale = T::one() / T::of_f64((h * w) as f64);
        for b in 0..batch {
            let img = as_complex_mut(&mut out[b * h * w * 2..][..h * w * 2]);
            for row in img.chunks_exact_mut(w) {
                fft_w.process_with_scratch(row, &mut self.scratch);
            }
            transpose(img, h, w, &mut self.tmp);
            for col in self.tmp.chunks_exact_mut(h) {
                fft_h.process_with_scratch(col, &mut self.scratch);
            }
            transpose(&self.tmp, w, h, img);
            if normalize {
                for c in img.iter_mut() {
                    c.re = c.re * scale;
                    c.im = c.im * scale;
                }
            }
        }
        out
    }

    fn prepare(&mut self, h: usize, w: usize, direction: FftDirection) -> (std::sync::Arc<dyn rustfft::Fft<T>>, std::sync::Arc<dyn rustfft::Fft<T>>) {
        let fft_w = self.planner.plan_fft(w, direction);
        let fft_h = self.planner.plan_fft(h, direction);
        let zero = Complex::new(T::zero(), T::zero());
        self.tmp.resize(h * w, zero);
        self.work.resize(h * w, zero);
        let scratch_len = fft_w
            .get_inplace_scratch_len()
            .max(fft_h.get_inplace_scratch_len());
        if self.scratch.len() < scratch_len {
            self.scratch.resize(scratch_len, zero);
        }
        (fft_w, fft_h)
    }

    /// Run the two-pass transform over `self.work`, then write the real part
    /// of the normalized inverse into `dst`.
    fn finish_real(
        &mut self,
        fft_w: &dyn rustfft::Fft<T>,
        fft_h: &dyn rustfft::Fft<T>,
        h: usize,
        w: usize,
        dst: &mut [T],
    ) {
        for row in self.work.chunks_exact_mut(w) {
            fft_w.process_with_scratch(row, &mut self.scratch);
        }
        transpose(&self.work, h, w, &mut self.tmp);
        for col in self.tmp.chunks_exact_mut(h) {
            fft_h.process_with_scratch(col, &mut self.scratch);
        }
        // tmp is laid out w x h; extract real parts back to h x w
        transpose_re(&self.tmp, w, h, dst);
        let scale = T::one() / T::of_f64((h * w) as f64);
        for v in dst.iter_mut() {
            *v = *v * scale;
        }
    }

    /// Real part of the normalized inverse transform of each image.
    pub fn ifft2_realpart(&mut self, src: &[T], batch: usize, h: usize, w: usize) -> Vec<T> {
        let (fft_w, fft_h) = self.prepare(h, w, FftDirection::Inverse);
        let mut out = vec![T::zero(); batch * h * w];
        for b in 0..batch {
            let img = &src[b * h * w * 2..][..h * w * 2];
            for (wv, pair) in self.work.iter_mut().zip(img.chunks_exact(2)) {
                *wv = Complex::new(pair[0], pair[1]);
            }
            self.finish_real(fft_w.as_ref(), fft_h.as_ref(), h, w, &mut out[b * h * w..][..h * w]);
        }
        out
    }

    /// Real part of the normalized inverse transform of i*factor .* z per
    /// image (Riesz-filtered quadrature component).
    pub fn ifft2_realpart_mul_imag(
        &mut self,
        src: &[T],
        factor: &[T],
        batch: usize,
        h: usize,
        w: usize,
    ) -> Vec<T> {
        let (fft_w, fft_h) = self.prepare(h, w, FftDirection::Inverse);
        let mut out = vec![T::zero(); batch * h * w];
        for b in 0..batch {
            let img = &src[b * h * w * 2..][..h * w * 2];
            for (p, (wv, pair)) in self.work.iter_mut().zip(img.chunks_exact(2)).enumerate() {
                // i*f * (re + i*im) = -f*im + i*f*re
                let f = factor[p];
                *wv = Complex::new(-f * pair[1], f * pair[0]);
            }
            self.finish_real(fft_w.as_ref(), fft_h.as_ref(), h, w, &mut out[b * h * w..][..h * w]);
        }
        out
    }

    /// Forward transform of a real image batch, embedded as complex with zero
    /// imaginary part. `normalize` applies the 1/(H*W) inverse-side factor
    /// (used by adjoint computations).
    pub fn fft2_embed_real(
        &mut self,
        src: &[T],
        batch: usize,
        h: usize,
        w: usize,
        normalize: bool,
    ) -> Vec<T> {
        let (fft_w, fft_h) = self.prepare(h, w, FftDirection::Forward);
        let mut out = vec![T::zero(); batch * h * w * 2];
        let scale = T::one() / T::of_f64((h * w) as f64);
        for b in 0..batch {
            let img = &src[b * h * w..][..h * w];
            for (wv, &v) in self.work.iter_mut().zip(img) {
                *wv = Complex::new(v, T::zero());
            }
            for row in self.work.chunks_exact_mut(w) {
                fft_w.process_with_scratch(row, &mut self.scratch);
            }
            transpose(&self.work, h, w, &mut self.tmp);
            for col in self.tmp.chunks_exact_mut(h) {
                fft_h.process_with_scratch(col, &mut self.scratch);
            }
            let dst = as_complex_mut(&mut out[b * h * w * 2..][..h * w * 2]);
            transpose(&self.tmp, w, h, dst);
            if normalize {
                for c in dst.iter_mut() {
                    c.re = c.re * scale;
                    c.im = c.im * scale;
                }
            }
        }
        out
    }
}

/// One-off batched transform (tests and small callers).
pub fn fft2_batch<T: Scalar>(
    data: &[T],
    batch: usize,
    h: usize,
    w: usize,
    direction: FftDirection,
    normalize: bool,
) -> Vec<T> {
    let mut ctx = FftContext::default();
    ctx.fft2_batch(data, batch, h, w, direction, normalize)
}
