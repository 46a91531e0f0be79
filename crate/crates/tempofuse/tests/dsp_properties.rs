//! Property tests for the DSP front end.

use proptest::prelude::*;
use tempofuse::audio::AudioClip;
use tempofuse::dsp::{
    autocorrelation_tempogram, fourier_tempogram, mel_spectrogram, novelty_curve, stft,
    NoveltyCurve, StftConfig,
};

fn arb_clip() -> impl Strategy<Value = AudioClip> {
    (1024usize..6000, any::<u64>()).prop_map(|(n, seed)| {
        // Cheap deterministic noise; amplitude within [-1, 1].
        let mut state = seed | 1;
        let samples: Vec<f32> = (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 33) as f64 / (1u64 << 31) as f64 - 1.0) as f32 * 0.9
            })
            .collect();
        AudioClip::from_samples(samples, 22_050).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dsp_outputs_are_finite_and_nonnegative(clip in arb_clip()) {
        let mel = mel_spectrogram(&clip, &StftConfig::default()).unwrap();
        prop_assert!(mel.values.all_finite());
        prop_assert!(mel.values.min_value() >= 0.0);

        let nov = novelty_curve(&mel);
        prop_assert!(nov.values.iter().all(|v| v.is_finite() && *v >= 0.0));

        let ftg = fourier_tempogram(&nov, 384).unwrap();
        prop_assert!(ftg.values.all_finite());
        prop_assert!(ftg.values.min_value() >= 0.0);

        let actg = autocorrelation_tempogram(&nov, 384).unwrap();
        prop_assert!(actg.values.all_finite());
        prop_assert!(actg.values.min_value() >= -1e-6);
    }

    #[test]
    fn stft_scaling_is_linear_and_argmax_stable(clip in arb_clip(), alpha in 0.05f32..0.95) {
        let cfg = StftConfig::default();
        let scaled = AudioClip::from_samples(
            clip.samples().iter().map(|&s| alpha * s).collect(),
            clip.sample_rate(),
        ).unwrap();
        let a = stft(clip.samples(), &cfg).unwrap().magnitude();
        let b = stft(scaled.samples(), &cfg).unwrap().magnitude();
        let scale_ref = a.max_value().max(1e-12);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((alpha * x - y).abs() <= 1e-4 * scale_ref);
        }
        for t in 0..a.cols() {
            let argmax = |m: &tempofuse::mat::Matrix| (0..m.rows())
                .max_by(|&p, &q| m.get(p, t).partial_cmp(&m.get(q, t)).unwrap())
                .unwrap();
            prop_assert_eq!(argmax(&a), argmax(&b));
        }
    }

    #[test]
    fn tempogram_bin_counts_follow_window(
        tw2 in 1usize..200,
        n in 2usize..320,
        seed in any::<u64>(),
    ) {
        let tempo_window = 2 * tw2;
        let mut state = seed | 1;
        let values: Vec<f32> = (0..n).map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 40) & 0xff) as f32 / 255.0
        }).collect();
        let nov = NoveltyCurve { values, frame_rate: 43.07 };
        let ftg = fourier_tempogram(&nov, tempo_window).unwrap();
        prop_assert_eq!(ftg.values.rows(), tempo_window / 2 + 1);
        prop_assert_eq!(ftg.values.cols(), n + 1);
        prop_assert_eq!(ftg.bpm_axis.len(), ftg.values.rows());
        let actg = autocorrelation_tempogram(&nov, tempo_window).unwrap();
        prop_assert_eq!(actg.values.rows(), tempo_window);
        prop_assert_eq!(actg.values.cols(), n + 1);
        prop_assert!(actg.values.all_finite());
    }

    #[test]
    fn mel_power_scales_quadratically_prop(clip in arb_clip()) {
        let cfg = StftConfig::default();
        let half = AudioClip::from_samples(
            clip.samples().iter().map(|&s| 0.5 * s).collect(),
            clip.sample_rate(),
        ).unwrap();
        let a = mel_spectrogram(&clip, &cfg).unwrap();
        let b = mel_spectrogram(&half, &cfg).unwrap();
        let scale_ref = a.values.max_value().max(1e-12);
        for (x, y) in a.values.data().iter().zip(b.values.data()) {
            prop_assert!((0.25 * x - y).abs() <= 1e-4 * scale_ref);
        }
    }
}
