//! Per-channel median/IQR scaling.

use super::{Recording, SignalError, SignalResult};

/// Quantile with linear interpolation between order statistics of a sorted
/// slice (position `q * (n - 1)`).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scaled {
    pub recording: Recording,
    /// Channels whose IQR was zero; their output is all zeros.
    pub degenerate: Vec<bool>,
}

pub fn robust_scale(rec: &Recording) -> SignalResult<Scaled> {
    if rec.n_samples() < 4 {
        return Err(SignalError::TooShort {
            needed: 4,
            got: rec.n_samples(),
        });
    }
    let mut degenerate = Vec::with_capacity(rec.n_channels());
    let data = rec
        .data()
        .iter()
        .map(|row| {
            let mut s = row.clone();
            s.sort_by(f64::total_cmp);
            let med = quantile(&s, 0.5);
            let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
            if iqr > 0.0 {
                degenerate.push(false);
                row.iter().map(|v| (v - med) / iqr).collect()
            } else {
                degenerate.push(true);
                vec![0.0; row.len()]
            }
        })
        .collect();
    Ok(Scaled {
        recording: rec.with_data(rec.fs(), data),
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(row: Vec<f64>) -> Recording {
        Recording::new(vec!["a".into()], 100.0, vec![row]).unwrap()
    }

    #[test]
    fn five_point_example() {
        let s = robust_scale(&one(vec![1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        assert_eq!(s.recording.channel(0), &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(s.degenerate, vec![false]);
    }

    #[test]
    fn constant_channel_is_flagged() {
        let s = robust_scale(&one(vec![7.0; 4])).unwrap();
        assert_eq!(s.recording.channel(0), &[0.0; 4]);
        assert_eq!(s.degenerate, vec![true]);
    }

    #[test]
    fn too_short_rejected() {
        assert!(robust_scale(&one(vec![1.0, 2.0, 3.0])).is_err());
    }
}
