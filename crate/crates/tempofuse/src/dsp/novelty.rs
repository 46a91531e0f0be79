//! Spectral-flux novelty curve: onset strength per spectrogram frame.

use super::{MelSpectrogram, NoveltyCurve};

// Half-width of the local-mean window in seconds; 2h+1 frames span ~0.37 s.
const LOCAL_MEAN_HALF_S: f64 = 0.185;

/// Log-compress the Mel bands (log(1 + 1000 * S)), sum positive per-band
/// time differences, average across bands, then subtract a centered local
/// mean and half-wave rectify. The first frame has no predecessor and is 0.
pub fn novelty_curve(mel: &MelSpectrogram) -> NoveltyCurve {
    let n_bands = mel.values.rows();
    let n_frames = mel.values.cols();
    let mut raw = vec![0.0f64; n_frames];
    for b in 0..n_bands {
        let row = mel.values.row(b);
        let mut prev = compress(row[0]);
        for (t, &s) in row.iter().enumerate().skip(1) {
            let cur = compress(s);
            if cur > prev {
                raw[t] += cur - prev;
            }
            prev = cur;
        }
    }
    for v in raw.iter_mut() {
        *v /= n_bands as f64;
    }
    let h = (LOCAL_MEAN_HALF_S * mel.frame_rate).round() as usize;
    let mut values = vec![0.0f32; n_frames];
    for t in 0..n_frames {
        let lo = t.saturating_sub(h);
        let hi = (t + h + 1).min(n_frames);
        let local_mean = raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        values[t] = (raw[t] - local_mean).max(0.0) as f32;
    }
    values[0] = 0.0;
    NoveltyCurve {
        values,
        frame_rate: mel.frame_rate,
    }
}

fn compress(s: f32) -> f64 {
    (1.0 + 1000.0 * s as f64).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Matrix;

    fn mel_from(values: Matrix) -> MelSpectrogram {
        MelSpectrogram {
            values,
            frame_rate: 22_050.0 / 512.0,
        }
    }

    #[test]
    fn constant_spectrogram_has_zero_novelty() {
        let mut m = Matrix::zeros(128, 64);
        m.data_mut().fill(0.75);
        let nov = novelty_curve(&mel_from(m));
        assert_eq!(nov.values.len(), 64);
        assert!(nov.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_loud_frame_peaks_exactly_there() {
        let mut m = Matrix::zeros(128, 100);
        for b in 0..128 {
            m.set(b, 50, 2.0);
        }
        let nov = novelty_curve(&mel_from(m));
        let argmax = (0..100)
            .max_by(|&a, &b| nov.values[a].partial_cmp(&nov.values[b]).unwrap())
            .unwrap();
        assert_eq!(argmax, 50);
        assert!(nov.values[50] > 0.0);
        assert_eq!(nov.values[0], 0.0);
    }

    #[test]
    fn novelty_is_nonnegative_and_finite() {
        let mut m = Matrix::zeros(16, 50);
        for t in 0..50 {
            for b in 0..16 {
                m.set(b, t, ((t * 31 + b * 7) % 11) as f32 * 0.1);
            }
        }
        let nov = novelty_curve(&mel_from(m));
        assert!(nov.values.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn click_track_peaks_are_a_beat_period_apart() {
        // 120 BPM at 43.07 frames/s puts onsets ~21.5 frames apart.
        let clip = crate::testutil::click_track(120.0, 22_050, 10.0);
        let mel = crate::dsp::mel_spectrogram(&clip, &Default::default()).unwrap();
        let nov = novelty_curve(&mel);
        let max = nov.values.iter().cloned().fold(0.0f32, f32::max);
        assert!(max > 0.0);
        // One onset per cluster of above-threshold frames, timed at the
        // first crossing; a soft attack can leave a small secondary bump a
        // few frames after the main pulse, which the clustering absorbs.
        let mut onsets: Vec<usize> = Vec::new();
        let mut last_hit: Option<usize> = None;
        for (t, &v) in nov.values.iter().enumerate() {
            if v > 0.15 * max {
                if last_hit.map_or(true, |l| t - l > 8) {
                    onsets.push(t);
                }
                last_hit = Some(t);
            }
        }
        assert!(onsets.len() >= 15, "found {} onsets", onsets.len());
        let mut gaps = Vec::new();
        for pair in onsets.windows(2) {
            let gap = pair[1] - pair[0];
            assert!((20..=23).contains(&gap), "gap {gap}");
            gaps.push(gap);
        }
        let mean = gaps.iter().sum::<usize>() as f64 / gaps.len() as f64;
        assert!((21.0..=22.0).contains(&mean), "mean gap {mean}");
    }
}
