//! Short-time Fourier transform with centered, reflect-padded framing.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::mat::Matrix;

use super::StftConfig;

/// Complex spectrogram, [n_bins x n_frames] row-major.
#[derive(Debug, Clone)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex<f32>>,
}

impl ComplexMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> Complex<f32> {
        self.data[r * self.cols + c]
    }

    pub fn magnitude(&self) -> Matrix {
        let data = self.data.iter().map(|z| z.norm()).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("shape preserved")
    }

    /// Squared magnitudes.
    pub fn power(&self) -> Matrix {
        let data = self.data.iter().map(|z| z.norm_sqr()).collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("shape preserved")
    }
}

/// Periodic Hamming window.
pub(crate) fn hamming(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| (0.54 - 0.46 * (std::f64::consts::TAU * i as f64 / n as f64).cos()) as f32)
        .collect()
}

/// Index into a length-n signal, reflecting at both ends without repeating
/// the edge sample (x[-1] = x[1], x[n] = x[n-2]).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Centered STFT: frame t is the Hamming-windowed slice of the reflect-padded
/// signal around sample t * hop. Output has window_len/2 + 1 bins and
/// 1 + floor(n / hop) frames.
pub fn stft(samples: &[f32], cfg: &StftConfig) -> Result<ComplexMatrix> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("stft input signal".into()));
    }
    let w = cfg.window_len;
    let n = samples.len();
    let n_bins = w / 2 + 1;
    let n_frames = 1 + n / cfg.hop;
    let window = hamming(w);
    let fft = FftPlanner::<f32>::new().plan_fft_forward(w);
    let mut data = vec![Complex::new(0.0, 0.0); n_bins * n_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); w];
    let half = (w / 2) as isize;
    for t in 0..n_frames {
        let start = (t * cfg.hop) as isize - half;
        for (j, slot) in buf.iter_mut().enumerate() {
            let idx = reflect_index(start + j as isize, n);
            *slot = Complex::new(samples[idx] * window[j], 0.0);
        }
        fft.process(&mut buf);
        for (k, row) in buf.iter().take(n_bins).enumerate() {
            data[k * n_frames + t] = *row;
        }
    }
    Ok(ComplexMatrix {
        rows: n_bins,
        cols: n_frames,
        data,
    })
}
