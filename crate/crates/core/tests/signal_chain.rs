use std::f64::consts::PI;

use eegtok_core::signal::{
    bandpass_notch, dft_target, patch, quantile, resample, robust_scale, FilterSpec, PatchedSignal,
    Recording,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tone(freq: f64, fs: f64, secs: f64, amp: f64) -> Vec<f64> {
    let n = (fs * secs) as usize;
    (0..n)
        .map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin())
        .collect()
}

fn rec(row: Vec<f64>, fs: f64) -> Recording {
    Recording::new(vec!["Cz".into()], fs, vec![row]).unwrap()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Amplitude of the `freq` component by direct correlation over whole cycles.
fn amplitude_at(x: &[f64], freq: f64, fs: f64) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let ph = 2.0 * PI * freq * i as f64 / fs;
        s += v * ph.sin();
        c += v * ph.cos();
    }
    2.0 * (s * s + c * c).sqrt() / x.len() as f64
}

const CLINICAL: FilterSpec = FilterSpec {
    low: 0.1,
    high: 75.0,
    notch: 50.0,
};

#[test]
fn ten_hz_passes_band() {
    let out = bandpass_notch(&rec(tone(10.0, 200.0, 10.0, 1.0), 200.0), &CLINICAL).unwrap();
    let a = amplitude_at(out.channel(0), 10.0, 200.0);
    assert!((1.0 - a).abs() < 0.05, "amplitude {a}");
}

#[test]
fn fifty_hz_is_notched() {
    let x = tone(50.0, 200.0, 10.0, 1.0);
    let out = bandpass_notch(&rec(x.clone(), 200.0), &CLINICAL).unwrap();
    let ratio = rms(out.channel(0)) / rms(&x);
    assert!(ratio < 0.1, "rms ratio {ratio}");
}

#[test]
fn dc_offset_is_rejected() {
    let out = bandpass_notch(&rec(vec![100.0; 200 * 60], 200.0), &CLINICAL).unwrap();
    let mean = out.channel(0).iter().sum::<f64>() / out.n_samples() as f64;
    assert!(mean.abs() < 5.0, "mean {mean}");
}

#[test]
fn resample_keeps_tone_peak_and_amplitude() {
    let out = resample(&rec(tone(10.0, 400.0, 4.0, 1.0), 400.0), 200.0).unwrap();
    assert_eq!(out.fs(), 200.0);
    assert_eq!(out.n_samples(), 800);
    let ps = patch(&out, 200).unwrap();
    let spec = dft_target(&ps);
    for r in 0..ps.rows() {
        let row = spec.row(r);
        let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(arg, 10);
    }
    // interior avoids the edge taper of a finite kernel
    let a = amplitude_at(&out.channel(0)[200..600], 10.0, 200.0);
    assert!((a - 1.0).abs() < 0.02, "amplitude {a}");
}

#[test]
fn parseval_on_random_patches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = 200;
    let data: Vec<f64> = (0..3 * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ps = PatchedSignal {
        channels: 3,
        patches: 1,
        width: w,
        data: data.clone(),
    };
    let spec = dft_target(&ps);
    for r in 0..3 {
        let m = spec.row(r);
        let two_sided: f64 = m[0] * m[0]
            + 2.0 * m[1..w / 2].iter().map(|v| v * v).sum::<f64>()
            + m[w / 2] * m[w / 2];
        let energy: f64 = data[r * w..(r + 1) * w].iter().map(|v| v * v).sum();
        assert!((two_sided / w as f64 - energy).abs() < 1e-9);
    }
}

#[test]
fn dft_matches_naive_sum() {
    let x: Vec<f64> = (0..32).map(|i| ((i * i) as f64 * 0.1).cos()).collect();
    let ps = PatchedSignal {
        channels: 1,
        patches: 1,
        width: 32,
        data: x.clone(),
    };
    let spec = dft_target(&ps);
    for k in 0..=16 {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, v) in x.iter().enumerate() {
            let ph = -2.0 * PI * (k * n) as f64 / 32.0;
            re += v * ph.cos();
            im += v * ph.sin();
        }
        assert!((spec.row(0)[k] - re.hypot(im)).abs() < 1e-9);
    }
}

#[test]
fn robust_scale_median_zero_iqr_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows: Vec<Vec<f64>> = (0..4)
        .map(|_| (0..301).map(|_| rng.random_range(-50.0..80.0)).collect())
        .collect();
    let r = Recording::new(
        vec!["Fz".into(), "Cz".into(), "Pz".into(), "Oz".into()],
        200.0,
        rows,
    )
    .unwrap();
    let s = robust_scale(&r).unwrap();
    for row in s.recording.data() {
        let mut v = row.clone();
        v.sort_by(f64::total_cmp);
        assert!(quantile(&v, 0.5).abs() < 1e-12);
        assert!((quantile(&v, 0.75) - quantile(&v, 0.25) - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn robust_scale_affine_invariant(
        x in prop::collection::vec(-100.0f64..100.0, 8..64),
        a in 0.1f64..10.0,
        b in -50.0f64..50.0,
    ) {
        let base = robust_scale(&rec(x.clone(), 100.0)).unwrap();
        prop_assume!(!base.degenerate[0]);
        let moved = robust_scale(&rec(x.iter().map(|v| a * v + b).collect(), 100.0)).unwrap();
        for (p, q) in base.recording.channel(0).iter().zip(moved.recording.channel(0)) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn robust_scale_idempotent(x in prop::collection::vec(-100.0f64..100.0, 8..64)) {
        let once = robust_scale(&rec(x, 100.0)).unwrap();
        prop_assume!(!once.degenerate[0]);
        let twice = robust_scale(&once.recording).unwrap();
        for (p, q) in once.recording.channel(0).iter().zip(twice.recording.channel(0)) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn patches_concatenate_to_prefix(t in 10usize..500, w in 1usize..60) {
        prop_assume!(t >= w);
        let x: Vec<f64> = (0..t).map(|i| i as f64).collect();
        let ps = patch(&rec(x.clone(), 100.0), w).unwrap();
        prop_assert_eq!(ps.patches, t / w);
        prop_assert_eq!(&ps.data[..], &x[..ps.patches * w]);
    }
}
