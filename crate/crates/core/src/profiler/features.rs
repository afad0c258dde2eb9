//! Physical features: temporal moments, Welch spectra and region summaries.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{ProfileError, ProfileResult};
use crate::signal::Recording;
use crate::topology::{zone_description, Hierarchy};

/// Canonical EEG bands, `(name, low, high)` in Hz.
pub const BANDS: [(&str, f64, f64); 5] = [
    ("Delta", 0.5, 4.0),
    ("Theta", 4.0, 8.0),
    ("Alpha", 8.0, 13.0),
    ("Beta", 13.0, 30.0),
    ("Gamma", 30.0, 100.0),
];

/// Welch segment length in seconds; overlap is half a segment.
pub const WELCH_SECONDS: f64 = 2.0;
pub const DEFAULT_TOP_K: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalStats {
    pub mean: f64,
    pub std: f64,
    pub energy: f64,
    pub peak_to_peak: f64,
    /// Non-excess population kurtosis; 0 when `std == 0`.
    pub kurtosis: f64,
    pub flat: bool,
}

pub fn phi_stat(x: &[f64]) -> ProfileResult<TemporalStats> {
    if x.len() < 2 {
        return Err(ProfileError::Parameter(format!(
            "temporal stats need at least 2 samples, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    let energy = x.iter().map(|v| v * v).sum();
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let flat = std == 0.0;
    let kurtosis = if flat {
        0.0
    } else {
        x.iter().map(|v| ((v - mean) / std).powi(4)).sum::<f64>() / n
    };
    Ok(TemporalStats {
        mean,
        std,
        energy,
        peak_to_peak: hi - lo,
        kurtosis,
        flat,
    })
}

/// One-sided power spectral density.
#[derive(Clone, Debug, PartialEq)]
pub struct Psd {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
}

/// Welch estimate: periodic Hann segments of `WELCH_SECONDS`, 50% overlap,
/// per-segment mean removal, density scaling.
pub fn welch(x: &[f64], fs: f64) -> ProfileResult<Psd> {
    let seg = (WELCH_SECONDS * fs).round() as usize;
    if seg < 2 || x.len() < seg {
        return Err(ProfileError::Parameter(format!(
            "Welch needs {seg} samples per segment, record has {}",
            x.len()
        )));
    }
    let step = seg / 2;
    let window: Vec<f64> = (0..seg)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / seg as f64).cos())
        .collect();
    let wss: f64 = window.iter().map(|w| w * w).sum();
    let bins = seg / 2 + 1;
    let fft = rustfft::FftPlanner::<f64>::new().plan_fft_forward(seg);
    let mut acc = vec![0.0; bins];
    let mut buf = vec![rustfft::num_complex::Complex::new(0.0, 0.0); seg];
    let mut count = 0usize;
    let mut start = 0;
    while start + seg <= x.len() {
        let s = &x[start..start + seg];
        let m = s.iter().sum::<f64>() / seg as f64;
        for ((b, v), w) in buf.iter_mut().zip(s).zip(&window) {
            *b = rustfft::num_complex::Complex::new((v - m) * w, 0.0);
        }
        fft.process(&mut buf);
        for (a, c) in acc.iter_mut().zip(&buf[..bins]) {
            *a += c.norm_sqr();
        }
        count += 1;
        start += step;
    }
    let scale = 1.0 / (fs * wss * count as f64);
    let power = acc
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let edge = k == 0 || (seg.is_multiple_of(2) && k == bins - 1);
            a * scale * if edge { 1.0 } else { 2.0 }
        })
        .collect();
    let freqs = (0..bins).map(|k| k as f64 * fs / seg as f64).collect();
    Ok(Psd { freqs, power })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralRecord {
    /// Band power over total power in `[0.5, min(100, fs/2)]` Hz, in
    /// [`BANDS`] order.
    pub rel_power: [f64; 5],
    pub peak_freq: f64,
    pub peak_power: f64,
    pub degenerate: bool,
}

fn span(fs: f64) -> (f64, f64) {
    (BANDS[0].1, BANDS[4].2.min(fs / 2.0))
}

pub fn phi_spec(x: &[f64], fs: f64) -> ProfileResult<SpectralRecord> {
    let psd = welch(x, fs)?;
    let (lo, hi) = span(fs);
    let in_span = |f: f64| f >= lo && f <= hi;
    let total: f64 = psd
        .freqs
        .iter()
        .zip(&psd.power)
        .filter(|(f, _)| in_span(**f))
        .map(|(_, p)| p)
        .sum();
    let mut rel = [0.0; 5];
    let (mut peak_freq, mut peak_power) = (0.0, 0.0);
    let degenerate = total <= 0.0;
    if !degenerate {
        for (i, &(_, b_lo, b_hi)) in BANDS.iter().enumerate() {
            let last = i == BANDS.len() - 1;
            let band: f64 = psd
                .freqs
                .iter()
                .zip(&psd.power)
                .filter(|(f, _)| in_span(**f) && **f >= b_lo && (**f < b_hi || (last && **f <= b_hi)))
                .map(|(_, p)| p)
                .sum();
            rel[i] = band / total;
        }
        for (f, p) in psd.freqs.iter().zip(&psd.power) {
            if in_span(*f) && *p > peak_power {
                peak_freq = *f;
                peak_power = *p;
            }
        }
    }
    Ok(SpectralRecord {
        rel_power: rel,
        peak_freq,
        peak_power,
        degenerate,
    })
}

/// Mean of per-channel features over one group of a hierarchy level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    /// `"band"` or `"zone"`.
    pub level: String,
    pub name: String,
    pub channels: Vec<String>,
    pub mean_std: f64,
    pub mean_energy: f64,
    pub mean_rel_power: [f64; 5],
    pub mean_peak_freq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeChannel {
    pub label: String,
    pub zone: String,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialRecord {
    pub regions: Vec<RegionSummary>,
    pub top: Vec<RepresentativeChannel>,
}

/// Indices of the `k` highest values, descending, ties by lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

pub fn phi_spat(
    labels: &[String],
    stats: &[TemporalStats],
    spectra: &[SpectralRecord],
    hier: &Hierarchy,
    k: usize,
) -> ProfileResult<SpatialRecord> {
    if k == 0 {
        return Err(ProfileError::Parameter("top-k needs k >= 1".into()));
    }
    if labels.len() != hier.channels || stats.len() != hier.channels || spectra.len() != hier.channels {
        return Err(ProfileError::Parameter(format!(
            "{} labels, {} stats, {} spectra for a {}-channel hierarchy",
            labels.len(),
            stats.len(),
            spectra.len(),
            hier.channels
        )));
    }
    let mut regions = Vec::new();
    for (level, tag) in [(1usize, "band"), (2, "zone")] {
        for (members, name) in hier.levels[level].iter().zip(&hier.names[level]) {
            let n = members.len() as f64;
            let mut rel = [0.0; 5];
            for &c in members {
                for (r, v) in rel.iter_mut().zip(&spectra[c].rel_power) {
                    *r += v / n;
                }
            }
            regions.push(RegionSummary {
                level: tag.into(),
                name: name.clone(),
                channels: members.iter().map(|&c| labels[c].clone()).collect(),
                mean_std: members.iter().map(|&c| stats[c].std).sum::<f64>() / n,
                mean_energy: members.iter().map(|&c| stats[c].energy).sum::<f64>() / n,
                mean_rel_power: rel,
                mean_peak_freq: members.iter().map(|&c| spectra[c].peak_freq).sum::<f64>() / n,
            });
        }
    }
    let zone_of = hier.group_of(2);
    let var: Vec<f64> = stats.iter().map(|s| s.std * s.std).collect();
    let top = top_k(&var, k)
        .into_iter()
        .map(|c| RepresentativeChannel {
            label: labels[c].clone(),
            zone: zone_description(&hier.names[2][zone_of[c]]).to_string(),
            variance: var[c],
        })
        .collect();
    Ok(SpatialRecord { regions, top })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalFeatures {
    pub labels: Vec<String>,
    pub fs: f64,
    pub samples: usize,
    /// Moments over all channels pooled together.
    pub global: TemporalStats,
    pub channels: Vec<TemporalStats>,
    pub spectra: Vec<SpectralRecord>,
    pub spatial: SpatialRecord,
    pub flat_channels: Vec<String>,
}

/// Runs all three operators on a recording.
pub fn extract(rec: &Recording, hier: &Hierarchy, k: usize) -> ProfileResult<PhysicalFeatures> {
    let channels = rec
        .data()
        .iter()
        .map(|row| phi_stat(row))
        .collect::<ProfileResult<Vec<_>>>()?;
    let spectra = rec
        .data()
        .iter()
        .map(|row| phi_spec(row, rec.fs()))
        .collect::<ProfileResult<Vec<_>>>()?;
    let pooled: Vec<f64> = rec.data().concat();
    let global = phi_stat(&pooled)?;
    let spatial = phi_spat(rec.channels(), &channels, &spectra, hier, k)?;
    let flat_channels = rec
        .channels()
        .iter()
        .zip(&channels)
        .filter(|(_, s)| s.flat)
        .map(|(l, _)| l.clone())
        .collect();
    Ok(PhysicalFeatures {
        labels: rec.channels().to_vec(),
        fs: rec.fs(),
        samples: rec.n_samples(),
        global,
        channels,
        spectra,
        spatial,
        flat_channels,
    })
}
