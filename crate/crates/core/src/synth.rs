//! Synthetic EEG: integer-Hz sinusoid mixtures with optional
//! class-dependent band signatures.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::signal::{Recording, SignalResult};

/// Dominant frequency of each class, one per classical band.
pub const CLASS_TONES: [f64; 5] = [2.0, 6.0, 10.0, 20.0, 35.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub channels: Vec<String>,
    pub fs: f64,
    pub seconds: f64,
    pub classes: usize,
    pub per_class: usize,
    /// Standard deviation of additive white noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            channels: ["C3", "C4"].iter().map(|s| s.to_string()).collect(),
            fs: 200.0,
            seconds: 5.0,
            classes: 3,
            per_class: 10,
            noise: 0.1,
        }
    }
}

/// Tones available to unlabelled mixtures.
pub const MIXTURE_PALETTE: [f64; 6] = [3.0, 6.0, 10.0, 15.0, 22.0, 30.0];

/// Sum of `(freq, amplitude)` tones plus Gaussian noise. Phases are drawn
/// per channel and tone when `random_phase`, else zero.
pub fn sinusoid_mixture(
    channels: &[String],
    fs: f64,
    samples: usize,
    tones: &[(f64, f64)],
    random_phase: bool,
    noise: f64,
    rng: &mut impl Rng,
) -> SignalResult<Recording> {
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite deviation");
    let data = channels
        .iter()
        .map(|_| {
            let phases: Vec<f64> = tones
                .iter()
                .map(|_| if random_phase { rng.random_range(0.0..2.0 * PI) } else { 0.0 })
                .collect();
            (0..samples)
                .map(|i| {
                    let t = i as f64 / fs;
                    let s: f64 = tones
                        .iter()
                        .zip(&phases)
                        .map(|(&(f, a), ph)| a * (2.0 * PI * f * t + ph).sin())
                        .sum();
                    s + normal.sample(rng)
                })
                .collect()
        })
        .collect();
    Recording::new(channels.to_vec(), fs, data)
}

/// An unlabelled, zero-phase mixture of two distinct palette tones, the
/// second at half amplitude.
pub fn random_mixture(cfg: &SynthConfig, rng: &mut impl Rng) -> SignalResult<Recording> {
    let a = rng.random_range(0..MIXTURE_PALETTE.len());
    let b = (a + rng.random_range(1..MIXTURE_PALETTE.len())) % MIXTURE_PALETTE.len();
    let tones = [(MIXTURE_PALETTE[a], 1.0), (MIXTURE_PALETTE[b], 0.5)];
    let samples = (cfg.seconds * cfg.fs).round() as usize;
    sinusoid_mixture(&cfg.channels, cfg.fs, samples, &tones, false, cfg.noise, rng)
}

/// One recording of class `k`: its signature tone dominates a weaker
/// random background tone.
pub fn class_recording(cfg: &SynthConfig, k: usize, rng: &mut impl Rng) -> SignalResult<Recording> {
    let dominant = CLASS_TONES[k % CLASS_TONES.len()];
    let background = loop {
        let f = rng.random_range(1..=40) as f64;
        if (f - dominant).abs() > 2.0 {
            break f;
        }
    };
    let tones = [
        (dominant, rng.random_range(0.9..1.1)),
        (background, rng.random_range(0.1..0.3)),
    ];
    let samples = (cfg.seconds * cfg.fs).round() as usize;
    sinusoid_mixture(&cfg.channels, cfg.fs, samples, &tones, true, cfg.noise, rng)
}

/// `per_class` recordings of each class, interleaved by class.
pub fn labeled_corpus(cfg: &SynthConfig, rng: &mut impl Rng) -> SignalResult<Vec<(Recording, usize)>> {
    let mut out = Vec::with_capacity(cfg.classes * cfg.per_class);
    for _ in 0..cfg.per_class {
        for k in 0..cfg.classes {
            out.push((class_recording(cfg, k, rng)?, k));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_determinism() {
        let cfg = SynthConfig::default();
        let a = labeled_corpus(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = labeled_corpus(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a[0].0.n_samples(), 1000);
        assert_eq!(a[4].1, 1);
        assert_eq!(a[0].0.data(), b[0].0.data());
    }
}
