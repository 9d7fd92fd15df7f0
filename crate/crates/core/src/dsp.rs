//! Small signal-processing helpers shared by the frontend and augmentation.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// Periodic Hann window of `len` samples.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Forward/inverse FFT pair of a fixed size.
pub struct FftPair {
    pub size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftPair {
    pub fn new(size: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            size,
            forward: planner.plan_fft_forward(size),
            inverse: planner.plan_fft_inverse(size),
        }
    }

    /// Spectrum of a real frame zero-padded to the FFT size.
    pub fn spectrum(&self, frame: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = frame
            .iter()
            .map(|&x| Complex::new(x, 0.0))
            .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
            .take(self.size)
            .collect();
        self.forward.process(&mut buf);
        buf
    }

    /// Real part of the inverse transform, scaled by 1/N.
    pub fn inverse_real(&self, mut spec: Vec<Complex<f64>>) -> Vec<f64> {
        self.inverse.process(&mut spec);
        let scale = 1.0 / self.size as f64;
        spec.into_iter().map(|c| c.re * scale).collect()
    }
}

/// Linear convolution via FFT, returning the full `a.len() + b.len() - 1` output.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    let fft = FftPair::new(out_len.next_power_of_two());
    let fa = fft.spectrum(a);
    let fb = fft.spectrum(b);
    let prod = fa.iter().zip(&fb).map(|(x, y)| x * y).collect();
    let mut out = fft.inverse_real(prod);
    out.truncate(out_len);
    out
}

/// Short-time Fourier transform with weighted overlap-add resynthesis.
///
/// The signal is padded by one window on each side so every original sample
/// sits under a fully overlapped region.
pub struct Stft {
    pub win: usize,
    pub hop: usize,
    window: Vec<f64>,
    fft: FftPair,
}

impl Stft {
    pub fn new(win: usize, hop: usize) -> Self {
        Self {
            win,
            hop,
            window: hann(win),
            fft: FftPair::new(win),
        }
    }

    /// Apply `edit` to every frame's spectrum and resynthesize a signal of the
    /// same length as `x`.
    pub fn process<F>(&self, x: &[f64], mut edit: F) -> Vec<f64>
    where
        F: FnMut(&mut [Complex<f64>]),
    {
        let pad = self.win;
        let total = x.len() + 2 * pad;
        let mut padded = vec![0.0; total];
        padded[pad..pad + x.len()].copy_from_slice(x);
        let mut acc = vec![0.0; total];
        let mut norm = vec![0.0; total];
        let mut start = 0;
        let mut frame = vec![0.0; self.win];
        while start + self.win <= total {
            for (i, f) in frame.iter_mut().enumerate() {
                *f = padded[start + i] * self.window[i];
            }
            let mut spec = self.fft.spectrum(&frame);
            edit(&mut spec);
            let y = self.fft.inverse_real(spec);
            for i in 0..self.win {
                acc[start + i] += y[i] * self.window[i];
                norm[start + i] += self.window[i] * self.window[i];
            }
            start += self.hop;
        }
        (0..x.len())
            .map(|i| {
                let n = norm[pad + i];
                if n > 1e-12 {
                    acc[pad + i] / n
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn fft_size(&self) -> usize {
        self.fft.size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fft_convolution_matches_direct() {
        let a: Vec<f64> = (0..37).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..9).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let fast = fft_convolve(&a, &b);
        for (n, v) in fast.iter().enumerate() {
            let direct: f64 = (0..b.len())
                .filter(|&k| n >= k && n - k < a.len())
                .map(|k| a[n - k] * b[k])
                .sum();
            assert!((v - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn stft_identity_reconstructs() {
        let x: Vec<f64> = (0..1000).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        let stft = Stft::new(256, 64);
        let y = stft.process(&x, |_| {});
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }
}
