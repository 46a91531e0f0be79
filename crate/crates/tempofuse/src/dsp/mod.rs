//! Feature extraction front end: Mel-spectrograms, novelty curves, and the
//! two tempogram representations, plus global tempo estimation.
//!
//! All transforms share one framing rule: centered windows on a reflect-padded
//! signal, n_frames = 1 + floor(n / hop). Mel frames, novelty frames, and
//! tempogram frames therefore live on the same time grid.

mod mel;
mod novelty;
mod stft;
mod tempogram;

pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz};
pub use novelty::novelty_curve;
pub use stft::{stft, ComplexMatrix};
pub use tempogram::{autocorrelation_tempogram, estimate_global_tempo, fourier_tempogram};

use crate::error::{Error, Result};
use crate::mat::Matrix;

pub const DEFAULT_N_MELS: usize = 128;
pub const DEFAULT_TEMPO_WINDOW: usize = 384;

/// Analysis window for the audio STFT.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_len: 2048,
            hop: 512,
        }
    }
}

impl StftConfig {
    pub fn new(window_len: usize, hop: usize) -> Result<Self> {
        if hop == 0 || hop > window_len {
            return Err(Error::InvalidArgument(format!(
                "need 0 < hop <= window_len, got hop {hop} with window_len {window_len}"
            )));
        }
        Ok(StftConfig { window_len, hop })
    }

    /// Frames per second of the resulting spectrogram.
    pub fn frame_rate(&self, sample_rate: u32) -> f64 {
        sample_rate as f64 / self.hop as f64
    }
}

/// Power Mel-spectrogram, [n_mels x n_frames].
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    pub values: Matrix,
    pub frame_rate: f64,
}

/// Onset-strength signal on the spectrogram frame grid. Non-negative.
#[derive(Debug, Clone)]
pub struct NoveltyCurve {
    pub values: Vec<f32>,
    pub frame_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TempogramKind {
    Fourier,
    Autocorrelation,
}

/// Tempo-salience matrix, [n_bins x n_frames].
///
/// Fourier bins sit on a linear BPM grid; autocorrelation bins keep their
/// native lag axis and carry derived BPM labels (lag 0 labeled +inf).
#[derive(Debug, Clone)]
pub struct Tempogram {
    pub kind: TempogramKind,
    pub values: Matrix,
    pub bpm_axis: Vec<f64>,
}
