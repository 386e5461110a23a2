//! 2-D FFT helpers over row-major complex buffers.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};

/// Forward/inverse plans for one `width x height` grid.
#[derive(Clone)]
pub struct Fft2d<T: FftNum> {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: FftNum> std::fmt::Debug for Fft2d<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Fft2d({}x{})", self.width, self.height)
    }
}

impl<T: FftNum> Fft2d<T> {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn forward(&self, buf: &mut [Complex<T>]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    /// Unnormalised inverse; divide by `width * height` to invert [`Self::forward`].
    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        self.run(buf, &self.row_inv, &self.col_inv);
    }

    fn run(&self, buf: &mut [Complex<T>], rows: &Arc<dyn Fft<T>>, cols: &Arc<dyn Fft<T>>) {
        let (w, h) = (self.width, self.height);
        assert_eq!(buf.len(), w * h, "fft buffer size");
        rows.process(buf);
        let mut col = vec![Complex::new(T::zero(), T::zero()); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            cols.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
    }

    /// FFT of a real row-major image.
    pub fn forward_real(&self, data: &[T]) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = data.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.forward(&mut buf);
        buf
    }

    /// Normalised inverse, keeping only the real part.
    pub fn inverse_real(&self, mut spectrum: Vec<Complex<T>>) -> Vec<T> {
        self.inverse(&mut spectrum);
        let scale = T::from_usize(self.width * self.height).unwrap();
        spectrum.into_iter().map(|c| c.re / scale).collect()
    }
}

/// Signed frequency index of DFT bin `k` on an `n`-point axis.
#[inline]
pub fn signed_index(k: usize, n: usize) -> f64 {
    if k <= n / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Moves the DC bin to the centre (`n/2`) for display.
pub fn fftshift<T: Copy>(data: &[T], width: usize, height: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for y in 0..height {
        for x in 0..width {
            let sx = (x + width / 2) % width;
            let sy = (y + height / 2) % height;
            out[sy * width + sx] = data[y * width + x];
        }
    }
    out
}
