//! Audio decoding, resampling, and slicing.
//!
//! Everything downstream assumes mono clips; stereo input is mixed down by
//! channel average at decode time. 16-bit samples are scaled by 1/32768 so
//! that the most negative code maps exactly to -1.0.

use std::path::Path;

use crate::error::{Error, Result};

/// Mono PCM signal. Samples are finite; decoded audio stays within [-1, 1],
/// resampled audio may overshoot slightly near transients.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn from_samples(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidAudio("sample_rate must be positive".into()));
        }
        if let Some(pos) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidAudio(format!(
                "non-finite sample at index {pos}"
            )));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Decode a RIFF/WAVE file into a mono clip.
///
/// Accepts 16-bit PCM and 32-bit IEEE float, 1 or 2 channels. Stereo is
/// mixed down by channel average. Float samples are clamped to [-1, 1].
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::UnsupportedWav {
            path: path.to_path_buf(),
            detail: format!("channels = {} (want 1 or 2)", spec.channels),
        });
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            let mut out = Vec::with_capacity(reader.len() as usize);
            for s in reader.into_samples::<i16>() {
                let s = s.map_err(|e| Error::Wav {
                    path: path.to_path_buf(),
                    detail: e.to_string(),
                })?;
                out.push(s as f32 / 32768.0);
            }
            out
        }
        (hound::SampleFormat::Float, 32) => {
            let mut out = Vec::with_capacity(reader.len() as usize);
            for s in reader.into_samples::<f32>() {
                let s = s.map_err(|e| Error::Wav {
                    path: path.to_path_buf(),
                    detail: e.to_string(),
                })?;
                if !s.is_finite() {
                    return Err(Error::InvalidAudio(format!(
                        "non-finite float sample in {}",
                        path.display()
                    )));
                }
                out.push(s.clamp(-1.0, 1.0));
            }
            out
        }
        (fmt, bits) => {
            return Err(Error::UnsupportedWav {
                path: path.to_path_buf(),
                detail: format!("sample_format = {fmt:?}, bits_per_sample = {bits} (want Int/16 or Float/32)"),
            });
        }
    };
    let samples = if spec.channels == 2 {
        interleaved
            .chunks_exact(2)
            .map(|lr| 0.5 * (lr[0] + lr[1]))
            .collect()
    } else {
        interleaved
    };
    AudioClip::from_samples(samples, spec.sample_rate)
}

/// Duration in seconds from the header alone; sample data stays unread.
pub fn wav_duration_s(path: &Path) -> Result<f64> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav {
            path: path.to_path_buf(),
            detail: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.sample_rate == 0 {
        return Err(Error::UnsupportedWav {
            path: path.to_path_buf(),
            detail: "sample_rate = 0".into(),
        });
    }
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}

/// Write a mono clip as 16-bit PCM.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    for &s in clip.samples() {
        let q = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| Error::Wav {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| Error::Wav {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    Ok(())
}

// Zero crossings per side of the sinc kernel, measured at the band-limit rate.
const SINC_ZERO_CROSSINGS: usize = 64;
const KAISER_BETA: f64 = 12.0;

/// Band-limited sample-rate conversion with a Kaiser-windowed sinc kernel.
///
/// Output length is round(len * target / source). Equal rates return the
/// clip unchanged. Out-of-range source positions are treated as zeros, so
/// a few samples at each edge carry windowing error.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::InvalidArgument("target_rate must be positive".into()));
    }
    if target_rate == clip.sample_rate() {
        return Ok(clip.clone());
    }
    let src = clip.samples();
    let ratio = target_rate as f64 / clip.sample_rate() as f64;
    let out_len = (src.len() as f64 * ratio).round() as usize;
    // Cutoff at the lower of the two Nyquist rates.
    let scale = ratio.min(1.0);
    let half_width = SINC_ZERO_CROSSINGS as f64 / scale;
    let i0_beta = bessel_i0(KAISER_BETA);

    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let t = j as f64 / ratio;
        let lo = (t - half_width).ceil().max(0.0) as usize;
        let hi_f = (t + half_width).floor();
        if hi_f < 0.0 {
            out.push(0.0);
            continue;
        }
        let hi = (hi_f as usize).min(src.len().saturating_sub(1));
        let mut acc = 0.0f64;
        for (i, &x) in src.iter().enumerate().take(hi + 1).skip(lo) {
            let u = t - i as f64;
            acc += x as f64 * scale * sinc(scale * u) * kaiser(u / half_width, i0_beta);
        }
        out.push(acc as f32);
    }
    AudioClip::from_samples(out, target_rate)
}

/// Extract the window [start_s, end_s) as a new clip.
///
/// The result has exactly round((end - start) * rate) samples.
pub fn slice_segment(clip: &AudioClip, start_s: f64, end_s: f64) -> Result<AudioClip> {
    if !(start_s >= 0.0 && start_s < end_s) {
        return Err(Error::InvalidArgument(format!(
            "need 0 <= start < end, got [{start_s}, {end_s}]"
        )));
    }
    let rate = clip.sample_rate() as f64;
    let start_idx = (start_s * rate).round() as usize;
    let n = ((end_s - start_s) * rate).round() as usize;
    if start_idx + n > clip.len() {
        return Err(Error::InvalidArgument(format!(
            "slice [{start_s}, {end_s}] s exceeds clip of {:.3} s",
            clip.duration_s()
        )));
    }
    AudioClip::from_samples(
        clip.samples()[start_idx..start_idx + n].to_vec(),
        clip.sample_rate(),
    )
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser window on u in [-1, 1]; zero outside.
fn kaiser(u: f64, i0_beta: f64) -> f64 {
    let q = 1.0 - u * u;
    if q <= 0.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * q.sqrt()) / i0_beta
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let half_x = x / 2.0;
    for k in 1..64 {
        term *= (half_x / k as f64) * (half_x / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::TAU;

    fn sine_clip(freq: f64, rate: u32, n: usize) -> AudioClip {
        let samples = (0..n)
            .map(|i| (0.8 * (TAU * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        AudioClip::from_samples(samples, rate).unwrap()
    }

    #[test]
    fn from_samples_validates() {
        assert!(AudioClip::from_samples(vec![0.0], 0).is_err());
        assert!(AudioClip::from_samples(vec![f32::NAN], 22_050).is_err());
        assert!(AudioClip::from_samples(vec![0.5, -0.5], 22_050).is_ok());
    }

    #[test]
    fn load_wav_silence_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        let clip = AudioClip::from_samples(vec![0.0; 22_050], 22_050).unwrap();
        write_wav(&path, &clip).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.len(), 22_050);
        assert_eq!(back.sample_rate(), 22_050);
        assert!(back.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn load_wav_symmetric_stereo_mixdown_is_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 22_050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..1000 {
            w.write_sample(16384i16).unwrap(); // +0.5
            w.write_sample(-16384i16).unwrap(); // -0.5
        }
        w.finalize().unwrap();
        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.len(), 1000);
        assert!(clip.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn load_wav_int16_min_maps_to_minus_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("min.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22_050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(i16::MIN).unwrap();
        w.write_sample(16384i16).unwrap();
        w.finalize().unwrap();
        let clip = load_wav(&path).unwrap();
        // Scaling rule: integer / 32768.
        assert_eq!(clip.samples()[0], -1.0);
        assert_eq!(clip.samples()[1], 0.5);
    }

    #[test]
    fn load_wav_rejects_unsupported_bit_depth() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22_050,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(1i32 << 20).unwrap();
        w.finalize().unwrap();
        match load_wav(&path) {
            Err(Error::UnsupportedWav { detail, .. }) => {
                assert!(detail.contains("bits_per_sample = 24"), "{detail}");
            }
            other => panic!("expected UnsupportedWav, got {other:?}"),
        }
    }

    #[test]
    fn load_wav_missing_file_is_io_error() {
        match load_wav(Path::new("/nonexistent/nope.wav")) {
            Err(Error::Io { .. }) => {}
            other => panic!("expected Io error, got {other:?}"),
        }
    }

    #[test]
    fn resample_identity_at_equal_rate() {
        let clip = sine_clip(100.0, 22_050, 4410);
        let out = resample(&clip, 22_050).unwrap();
        assert_eq!(out.samples(), clip.samples());
    }

    #[test]
    fn resample_halves_length() {
        let clip = AudioClip::from_samples(vec![0.0; 44_100], 44_100).unwrap();
        let out = resample(&clip, 22_050).unwrap();
        assert_eq!(out.len(), 22_050);
    }

    #[test]
    fn resample_sine_tracks_analytic_oracle() {
        // 100 Hz sine at 44.1 kHz downsampled to 22.05 kHz must match the
        // analytic sine at the new rate away from the edges.
        let clip = sine_clip(100.0, 44_100, 44_100);
        let out = resample(&clip, 22_050).unwrap();
        assert_eq!(out.len(), 22_050);
        let trim = 2 * SINC_ZERO_CROSSINGS; // edge taps see zero padding
        let mut max_err = 0.0f64;
        for j in trim..out.len() - trim {
            let expected = 0.8 * (TAU * 100.0 * j as f64 / 22_050.0).sin();
            max_err = max_err.max((out.samples()[j] as f64 - expected).abs());
        }
        assert!(max_err < 1e-3, "max_err = {max_err}");
    }

    #[test]
    fn resample_preserves_silence() {
        let clip = AudioClip::from_samples(vec![0.0; 10_000], 44_100).unwrap();
        let out = resample(&clip, 22_050).unwrap();
        assert!(out.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn slice_whole_clip_is_identity() {
        let clip = sine_clip(50.0, 22_050, 22_050);
        let out = slice_segment(&clip, 0.0, 1.0).unwrap();
        assert_eq!(out.samples(), clip.samples());
    }

    #[test]
    fn slice_15_45_of_120s_has_661500_samples() {
        let clip = AudioClip::from_samples(vec![0.0; 22_050 * 120], 22_050).unwrap();
        let out = slice_segment(&clip, 15.0, 45.0).unwrap();
        assert_eq!(out.len(), 661_500);
    }

    #[test]
    fn slice_beyond_duration_errors() {
        let clip = AudioClip::from_samples(vec![0.0; 22_050 * 20], 22_050).unwrap();
        assert!(slice_segment(&clip, 15.0, 45.0).is_err());
        assert!(slice_segment(&clip, -1.0, 5.0).is_err());
        assert!(slice_segment(&clip, 5.0, 5.0).is_err());
    }

    #[test]
    fn load_slice_resample_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.wav");
        write_wav(&path, &sine_clip(220.0, 44_100, 44_100)).unwrap();
        let a = resample(&slice_segment(&load_wav(&path).unwrap(), 0.2, 0.8).unwrap(), 22_050).unwrap();
        let b = resample(&slice_segment(&load_wav(&path).unwrap(), 0.2, 0.8).unwrap(), 22_050).unwrap();
        assert_eq!(a.samples(), b.samples());
    }
}
