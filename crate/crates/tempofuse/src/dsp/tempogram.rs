//! Fourier and autocorrelation tempograms plus global tempo estimation.

use crate::error::{Error, Result};
use crate::mat::Matrix;

use super::stft::{hamming, reflect_index};
use super::{stft, NoveltyCurve, StftConfig, Tempogram, TempogramKind};

/// STFT of the novelty curve itself: Hamming window of tempo_window frames,
/// hop 1, centered. Bin k is labeled 60 * k * frame_rate / tempo_window BPM.
pub fn fourier_tempogram(nov: &NoveltyCurve, tempo_window: usize) -> Result<Tempogram> {
    if tempo_window < 2 || tempo_window % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "tempo_window must be even and >= 2, got {tempo_window}"
        )));
    }
    check_novelty_len(nov)?;
    let cfg = StftConfig::new(tempo_window, 1)?;
    let values = stft(&nov.values, &cfg)?.magnitude();
    let bpm_axis = (0..values.rows())
        .map(|k| 60.0 * k as f64 * nov.frame_rate / tempo_window as f64)
        .collect();
    Ok(Tempogram {
        kind: TempogramKind::Fourier,
        values,
        bpm_axis,
    })
}

/// Windowed local autocorrelation of the novelty curve at lags
/// 0..tempo_window-1, hop 1, centered on the same frame grid as the Fourier
/// tempogram. Each column is normalized by its lag-0 energy when nonzero;
/// lag l > 0 is labeled 60 * frame_rate / l BPM.
pub fn autocorrelation_tempogram(nov: &NoveltyCurve, tempo_window: usize) -> Result<Tempogram> {
    if tempo_window < 2 {
        return Err(Error::InvalidArgument(format!(
            "tempo_window must be >= 2, got {tempo_window}"
        )));
    }
    check_novelty_len(nov)?;
    let w = tempo_window;
    let n = nov.values.len();
    let n_frames = 1 + n;
    let window = hamming(w);
    let mut values = Matrix::zeros(w, n_frames);
    let mut seg = vec![0.0f64; w];
    let half = (w / 2) as isize;
    for t in 0..n_frames {
        let start = t as isize - half;
        for (j, s) in seg.iter_mut().enumerate() {
            *s = nov.values[reflect_index(start + j as isize, n)] as f64 * window[j] as f64;
        }
        let energy: f64 = seg.iter().map(|&y| y * y).sum();
        for lag in 0..w {
            let mut acc = 0.0f64;
            for i in 0..w - lag {
                acc += seg[i] * seg[i + lag];
            }
            if energy > 0.0 {
                acc /= energy;
            }
            values.set(lag, t, acc as f32);
        }
    }
    let bpm_axis = (0..w)
        .map(|lag| {
            if lag == 0 {
                f64::INFINITY
            } else {
                60.0 * nov.frame_rate / lag as f64
            }
        })
        .collect();
    Ok(Tempogram {
        kind: TempogramKind::Autocorrelation,
        values,
        bpm_axis,
    })
}

/// Average a Fourier tempogram over time and return the BPM label of the
/// strongest bin inside [bpm_min, bpm_max].
pub fn estimate_global_tempo(tg: &Tempogram, bpm_min: f64, bpm_max: f64) -> Result<f64> {
    if tg.kind != TempogramKind::Fourier {
        return Err(Error::InvalidArgument(
            "global tempo estimation expects a Fourier tempogram".into(),
        ));
    }
    if !(bpm_min < bpm_max) {
        return Err(Error::InvalidArgument(format!(
            "need bpm_min < bpm_max, got [{bpm_min}, {bpm_max}]"
        )));
    }
    let n_frames = tg.values.cols();
    let mut best: Option<(f64, f64)> = None;
    for (bin, &bpm) in tg.bpm_axis.iter().enumerate() {
        if bpm < bpm_min || bpm > bpm_max {
            continue;
        }
        let mean = tg.values.row(bin).iter().map(|&v| v as f64).sum::<f64>() / n_frames as f64;
        if best.map_or(true, |(m, _)| mean > m) {
            best = Some((mean, bpm));
        }
    }
    match best {
        None => Err(Error::NoTempo(format!(
            "no tempogram bins inside [{bpm_min}, {bpm_max}] BPM"
        ))),
        Some((mean, _)) if mean <= 0.0 => {
            Err(Error::NoTempo("tempogram is zero everywhere in range".into()))
        }
        Some((_, bpm)) => Ok(bpm),
    }
}

fn check_novelty_len(nov: &NoveltyCurve) -> Result<()> {
    if nov.values.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "novelty curve of {} frame(s); tempograms need at least 2",
            nov.values.len()
        )));
    }
    Ok(())
}
