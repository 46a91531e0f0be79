//! HTK-scale Mel filterbank with Slaney area normalization.

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::mat::{matmul, Matrix};

use super::{stft, MelSpectrogram, StftConfig, DEFAULT_N_MELS};

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters spanning 0 Hz to sample_rate/2 on the Mel scale,
/// each scaled by 2 / (f_hi - f_lo) so filter areas are equal.
pub fn mel_filterbank(n_mels: usize, n_fft_bins: usize, sample_rate: u32) -> Result<Matrix> {
    if n_mels == 0 {
        return Err(Error::InvalidArgument("n_mels must be >= 1".into()));
    }
    if n_fft_bins < 2 || sample_rate == 0 {
        return Err(Error::InvalidArgument(format!(
            "need n_fft_bins >= 2 and a positive sample rate, got {n_fft_bins} bins at {sample_rate} Hz"
        )));
    }
    let n_fft = (n_fft_bins - 1) * 2;
    let mel_hi = hz_to_mel(sample_rate as f64 / 2.0);
    let edges_hz: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_hi * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Matrix::zeros(n_mels, n_fft_bins);
    for m in 0..n_mels {
        let (lo, ctr, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let norm = 2.0 / (hi - lo);
        for k in 0..n_fft_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let up = (f - lo) / (ctr - lo);
            let down = (hi - f) / (hi - ctr);
            let w = up.min(down).max(0.0);
            fb.set(m, k, (w * norm) as f32);
        }
    }
    Ok(fb)
}

/// Power spectrogram (|STFT|^2) mapped through the 128-band Mel filterbank.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &StftConfig) -> Result<MelSpectrogram> {
    let power = stft(clip.samples(), cfg)?.power();
    let fb = mel_filterbank(DEFAULT_N_MELS, power.rows(), clip.sample_rate())?;
    let values = matmul(&fb, &power);
    debug_assert!(values.all_finite());
    Ok(MelSpectrogram {
        values,
        frame_rate: cfg.frame_rate(clip.sample_rate()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mel_scale_round_trips() {
        for hz in [0.0, 440.0, 1000.0, 11_025.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-6 * hz.max(1.0));
        }
        // Anchor of the HTK formula: 1 kHz sits at 1000 mel within a percent.
        assert!((hz_to_mel(1000.0) - 999.99).abs() < 1.0);
    }

    #[test]
    fn filterbank_shape_is_128_by_1025() {
        let fb = mel_filterbank(128, 1025, 22_050).unwrap();
        assert_eq!(fb.rows(), 128);
        assert_eq!(fb.cols(), 1025);
        assert!(fb.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn filterbank_centers_strictly_increase() {
        let fb = mel_filterbank(128, 1025, 22_050).unwrap();
        let mut prev = -1.0f64;
        for m in 0..128 {
            let row = fb.row(m);
            let argmax = (0..1025)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            let center_hz = argmax as f64 * 22_050.0 / 2048.0;
            assert!(center_hz > prev, "filter {m}");
            prev = center_hz;
        }
    }

    #[test]
    fn filterbank_covers_every_bin_between_first_and_last_center() {
        let fb = mel_filterbank(128, 1025, 22_050).unwrap();
        let mel_hi = hz_to_mel(11_025.0);
        let first_center = mel_to_hz(mel_hi / 129.0);
        let last_center = mel_to_hz(mel_hi * 128.0 / 129.0);
        let k_lo = (first_center * 2048.0 / 22_050.0).ceil() as usize;
        let k_hi = (last_center * 2048.0 / 22_050.0).floor() as usize;
        for k in k_lo..=k_hi {
            let col_sum: f32 = (0..128).map(|m| fb.get(m, k)).sum();
            assert!(col_sum > 0.0, "bin {k} uncovered");
        }
    }

    #[test]
    fn mel_spectrogram_of_zero_signal_is_zero() {
        let clip = AudioClip::from_samples(vec![0.0; 22_050], 22_050).unwrap();
        let mel = mel_spectrogram(&clip, &StftConfig::default()).unwrap();
        assert_eq!(mel.values.rows(), 128);
        assert!(mel.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mel_frame_count_for_120s_preview() {
        // 25 chunks of 200 frames plus a 168-frame remainder.
        let clip = AudioClip::from_samples(vec![0.0; 22_050 * 120], 22_050).unwrap();
        let mel = mel_spectrogram(&clip, &StftConfig::default()).unwrap();
        assert_eq!(mel.values.cols(), 5168);
        assert_eq!(mel.values.cols(), 25 * 200 + 168);
    }

    #[test]
    fn mel_of_white_noise_is_strictly_positive_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let samples: Vec<f32> = (0..22_050).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let clip = AudioClip::from_samples(samples, 22_050).unwrap();
        let mel = mel_spectrogram(&clip, &StftConfig::default()).unwrap();
        for t in 3..mel.values.cols() - 3 {
            for m in 0..mel.values.rows() {
                assert!(mel.values.get(m, t) > 0.0, "band {m} frame {t}");
            }
        }
    }

    #[test]
    fn mel_power_scales_quadratically() {
        let samples: Vec<f32> = (0..8192)
            .map(|i| (0.3 * (std::f64::consts::TAU * 620.0 * i as f64 / 22_050.0).sin()) as f32)
            .collect();
        let half: Vec<f32> = samples.iter().map(|&s| 0.5 * s).collect();
        let a = mel_spectrogram(
            &AudioClip::from_samples(samples, 22_050).unwrap(),
            &StftConfig::default(),
        )
        .unwrap();
        let b = mel_spectrogram(
            &AudioClip::from_samples(half, 22_050).unwrap(),
            &StftConfig::default(),
        )
        .unwrap();
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            assert!((0.25 * x - y).abs() <= 1e-4 * x.abs().max(1e-6));
        }
    }
}
