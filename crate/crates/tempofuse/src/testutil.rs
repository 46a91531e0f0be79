//! Shared helpers for unit tests.

use std::f64::consts::TAU;

use crate::audio::AudioClip;

/// Click train with soft 15 ms raised-cosine attacks and 25 ms exponential
/// decays. The soft attack spreads each novelty pulse over a few frames,
/// which keeps tempo harmonics well below the fundamental.
pub(crate) fn click_track(bpm: f64, rate: u32, dur_s: f64) -> AudioClip {
    let n = (dur_s * rate as f64).round() as usize;
    let mut x = vec![0.0f32; n];
    let period = 60.0 / bpm * rate as f64;
    let attack = (0.015 * rate as f64).round() as usize;
    let burst = (0.080 * rate as f64).round() as usize;
    // Keep the first onset clear of the reflect-padded signal edge.
    let offset = 0.1 * rate as f64;
    let mut k = 0usize;
    loop {
        let at = (offset + k as f64 * period).round() as usize;
        if at >= n {
            break;
        }
        for j in 0..burst.min(n - at) {
            let t = j as f64 / rate as f64;
            let env = if j < attack {
                0.5 - 0.5 * (TAU / 2.0 * (j as f64 / attack as f64)).cos()
            } else {
                (-(t - 0.015) / 0.025).exp()
            };
            x[at + j] += (0.8 * env * (TAU * 1500.0 * t).sin()) as f32;
        }
        k += 1;
    }
    AudioClip::from_samples(x, rate).unwrap()
}
