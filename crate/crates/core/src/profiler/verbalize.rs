//! Templated English rendering of physical features.

use std::fmt::Write;

use super::features::{PhysicalFeatures, BANDS};
use crate::topology::zone_description;

/// Four significant digits, plain decimal for moderate magnitudes and
/// scientific notation otherwise. Independent of locale.
pub fn sig4(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.3e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("integer exponent");
    if (-3..4).contains(&exp) {
        let decimals = (3 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        sci
    }
}

fn pct(x: f64) -> String {
    format!("{}%", sig4(100.0 * x))
}

fn dominant(rel: &[f64; 5]) -> &'static str {
    let mut best = 0;
    for i in 1..5 {
        if rel[i] > rel[best] {
            best = i;
        }
    }
    BANDS[best].0
}

pub const TEMPORAL_HEADING: &str = "1. Temporal Stats";
pub const SPECTRAL_HEADING: &str = "2. Spectral Features";
pub const SPATIAL_HEADING: &str = "3. Spatial Features";
pub const QUALITY_HEADING: &str = "4. Data Quality";

/// Renders the feature set. Pure function of its input.
pub fn verbalize(f: &PhysicalFeatures) -> String {
    let mut s = String::new();
    let g = &f.global;
    let _ = writeln!(
        s,
        "{TEMPORAL_HEADING}: Mean {}, Std {}, Energy {}, Peak-to-Peak {}, Kurtosis {}.",
        sig4(g.mean),
        sig4(g.std),
        sig4(g.energy),
        sig4(g.peak_to_peak),
        sig4(g.kurtosis)
    );
    let per: Vec<String> = f
        .labels
        .iter()
        .zip(&f.channels)
        .map(|(l, c)| format!("{l} std {} kurtosis {}", sig4(c.std), sig4(c.kurtosis)))
        .collect();
    let _ = writeln!(s, "Per channel: {}.", per.join("; "));

    let live: Vec<usize> = (0..f.spectra.len()).filter(|&c| !f.spectra[c].degenerate).collect();
    let n = live.len().max(1) as f64;
    let mean_peak_f = live.iter().map(|&c| f.spectra[c].peak_freq).sum::<f64>() / n;
    let mean_peak_p = live.iter().map(|&c| f.spectra[c].peak_power).sum::<f64>() / n;
    let mut mean_rel = [0.0; 5];
    for &c in &live {
        for (m, v) in mean_rel.iter_mut().zip(&f.spectra[c].rel_power) {
            *m += v / n;
        }
    }
    let bands: Vec<String> = BANDS
        .iter()
        .zip(&mean_rel)
        .map(|((name, _, _), v)| format!("{name} Power {}", sig4(*v)))
        .collect();
    let _ = writeln!(
        s,
        "{SPECTRAL_HEADING}: Mean Peak Freq {}Hz, Mean Peak Power {}, {}.",
        sig4(mean_peak_f),
        sig4(mean_peak_p),
        bands.join(", ")
    );
    let _ = writeln!(s, "Dominant band across channels: {}.", dominant(&mean_rel));
    let peaks: Vec<String> = f
        .labels
        .iter()
        .zip(&f.spectra)
        .filter(|(_, r)| !r.degenerate)
        .map(|(l, r)| {
            format!(
                "{l} peak {}Hz power {} ({} {})",
                sig4(r.peak_freq),
                sig4(r.peak_power),
                dominant(&r.rel_power),
                pct(r.rel_power.iter().cloned().fold(0.0, f64::max))
            )
        })
        .collect();
    if !peaks.is_empty() {
        let _ = writeln!(s, "Per channel: {}.", peaks.join("; "));
    }

    let _ = writeln!(s, "{SPATIAL_HEADING}:");
    for r in &f.spatial.regions {
        let name = if r.level == "zone" {
            zone_description(&r.name).to_string()
        } else {
            r.name.clone()
        };
        let _ = writeln!(
            s,
            "Region {name} ({}): std {}, peak freq {}Hz, {} {}.",
            r.channels.join(", "),
            sig4(r.mean_std),
            sig4(r.mean_peak_freq),
            dominant(&r.mean_rel_power),
            pct(r.mean_rel_power.iter().cloned().fold(0.0, f64::max))
        );
    }
    for c in &f.spatial.top {
        let _ = writeln!(
            s,
            "Channel {} ({}) shows variance {}.",
            c.label,
            c.zone,
            sig4(c.variance)
        );
    }

    if f.flat_channels.is_empty() {
        let _ = writeln!(s, "{QUALITY_HEADING}: No flat channels detected.");
    } else {
        let _ = writeln!(
            s,
            "{QUALITY_HEADING}: Flat channel notice: {} constant over the record; their statistics are reported as 0.",
            f.flat_channels.join(", ")
        );
    }
    s
}
