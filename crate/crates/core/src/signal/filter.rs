//! Zero-phase IIR filtering: 4th-order Butterworth high-pass and low-pass
//! cascades plus a Q=30 notch, as second-order sections run forward and
//! backward over a padded copy with steady-state initial conditions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Recording, SignalError, SignalResult};

pub const BUTTER_ORDER: usize = 4;
pub const NOTCH_Q: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    /// Normalized so `a0 == 1`; holds `[a1, a2]`.
    pub a: [f64; 2],
}

impl Biquad {
    fn from_raw(b: [f64; 3], a0: f64, a1: f64, a2: f64) -> Self {
        Self {
            b: [b[0] / a0, b[1] / a0, b[2] / a0],
            a: [a1 / a0, a2 / a0],
        }
    }

    pub fn lowpass(f0: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let (sn, cs) = w0.sin_cos();
        let alpha = sn / (2.0 * q);
        let k = (1.0 - cs) / 2.0;
        Self::from_raw([k, 1.0 - cs, k], 1.0 + alpha, -2.0 * cs, 1.0 - alpha)
    }

    pub fn highpass(f0: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let (sn, cs) = w0.sin_cos();
        let alpha = sn / (2.0 * q);
        let k = (1.0 + cs) / 2.0;
        Self::from_raw([k, -(1.0 + cs), k], 1.0 + alpha, -2.0 * cs, 1.0 - alpha)
    }

    pub fn notch(f0: f64, fs: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * f0 / fs;
        let (sn, cs) = w0.sin_cos();
        let alpha = sn / (2.0 * q);
        Self::from_raw([1.0, -2.0 * cs, 1.0], 1.0 + alpha, -2.0 * cs, 1.0 - alpha)
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Magnitude response at `f` Hz.
    pub fn gain(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let z1 = (w.cos(), -w.sin());
        let z2 = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (
            self.b[0] + self.b[1] * z1.0 + self.b[2] * z2.0,
            self.b[1] * z1.1 + self.b[2] * z2.1,
        );
        let den = (
            1.0 + self.a[0] * z1.0 + self.a[1] * z2.0,
            self.a[0] * z1.1 + self.a[1] * z2.1,
        );
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }
}

/// Butterworth section quality factors for an even order.
fn butterworth_qs(order: usize) -> Vec<f64> {
    (0..order / 2)
        .map(|k| 1.0 / (2.0 * (PI * (2 * k + 1) as f64 / (2 * order) as f64).sin()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub low: f64,
    pub high: f64,
    pub notch: f64,
}

impl FilterSpec {
    pub fn validate(&self, fs: f64) -> SignalResult<()> {
        let nyq = fs / 2.0;
        if !(self.low > 0.0 && self.low < self.high && self.high < nyq) {
            return Err(SignalError::Parameter(format!(
                "band edges must satisfy 0 < low < high < fs/2; got low={} high={} fs/2={nyq}",
                self.low, self.high
            )));
        }
        if !(self.notch > self.low && self.notch < self.high) {
            return Err(SignalError::Parameter(format!(
                "notch {} Hz must lie inside the band ({}, {})",
                self.notch, self.low, self.high
            )));
        }
        Ok(())
    }

    pub fn sections(&self, fs: f64) -> Vec<Biquad> {
        let qs = butterworth_qs(BUTTER_ORDER);
        let mut out: Vec<Biquad> = qs.iter().map(|&q| Biquad::highpass(self.low, fs, q)).collect();
        out.extend(qs.iter().map(|&q| Biquad::lowpass(self.high, fs, q)));
        out.push(Biquad::notch(self.notch, fs, NOTCH_Q));
        out
    }
}

/// Single pass of a section cascade (transposed direct form II), with each
/// section's state initialised to its steady state for a constant input
/// equal to the mean of the first `lead` samples.
fn sosfilt_steady(sos: &[Biquad], x: &mut [f64], lead: usize) {
    let lead = lead.clamp(1, x.len());
    let mut level = x[..lead].iter().sum::<f64>() / lead as f64;
    for s in sos {
        let y_ss = s.dc_gain() * level;
        let mut z1 = y_ss - s.b[0] * level;
        let mut z2 = s.b[2] * level - s.a[1] * y_ss;
        for v in x.iter_mut() {
            let xi = *v;
            let y = s.b[0] * xi + z1;
            z1 = s.b[1] * xi - s.a[0] * y + z2;
            z2 = s.b[2] * xi - s.a[1] * y;
            *v = y;
        }
        level = y_ss;
    }
}

/// Highest prediction order used to extend the edges.
pub const EXTEND_ORDER: usize = 16;

/// Burg estimate of a forward predictor `x[n] ~ -sum a[k] x[n-k]`; returns
/// `a[1..]`. Stops early once the prediction error vanishes.
fn burg(x: &[f64], order: usize) -> Vec<f64> {
    let n = x.len();
    let mut a = vec![1.0];
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if n < 2 || energy == 0.0 {
        return Vec::new();
    }
    let (mut f, mut b) = (x.to_vec(), x.to_vec());
    for m in 0..order.min(n - 1) {
        let (mut num, mut den) = (0.0, 0.0);
        for i in m + 1..n {
            num += f[i] * b[i - 1];
            den += f[i] * f[i] + b[i - 1] * b[i - 1];
        }
        if den <= 1e-20 * energy {
            break;
        }
        let k = -2.0 * num / den;
        let mut next = a.clone();
        next.push(0.0);
        for j in 1..next.len() {
            next[j] += k * a.get(next.len() - 1 - j).copied().unwrap_or(0.0);
        }
        a = next;
        for i in (m + 1..n).rev() {
            let (fi, bi) = (f[i], b[i - 1]);
            f[i] = fi + k * bi;
            b[i] = bi + k * fi;
        }
    }
    a[1..].to_vec()
}

/// `len` samples continuing `seg` past its end: an AR fit to the
/// mean-removed segment, extrapolated, with the mean added back.
fn extrapolate(seg: &[f64], len: usize) -> Vec<f64> {
    let mean = seg.iter().sum::<f64>() / seg.len() as f64;
    let centred: Vec<f64> = seg.iter().map(|v| v - mean).collect();
    let coef = burg(&centred, EXTEND_ORDER.min(seg.len() / 4));
    let mut hist = centred;
    for _ in 0..len {
        let t = hist.len();
        let y: f64 = coef.iter().enumerate().map(|(k, c)| -c * hist[t - 1 - k]).sum();
        hist.push(y);
    }
    hist[seg.len()..].iter().map(|v| v + mean).collect()
}

/// Forward-backward filtering with `pad` predicted samples per side.
///
/// Mirror and odd reflections both put a kink into a tone (at a zero
/// crossing or at a peak), and a narrow notch rings on it for a few hundred
/// milliseconds inside the kept span. A linear-prediction extension
/// continues stationary content smoothly and a constant as a constant.
pub fn filtfilt(sos: &[Biquad], x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = pad.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    if pad > 0 {
        let head: Vec<f64> = x[..=pad].iter().rev().copied().collect();
        ext.extend(extrapolate(&head, pad).into_iter().rev());
    }
    ext.extend_from_slice(x);
    if pad > 0 {
        ext.extend(extrapolate(&x[n - 1 - pad..], pad));
    }
    sosfilt_steady(sos, &mut ext, pad);
    ext.reverse();
    sosfilt_steady(sos, &mut ext, pad);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Band-pass `[low, high]` plus notch, zero phase. Padding is three seconds
/// (capped at `T-1`) so the slow high-pass transient settles outside the
/// kept span.
pub fn bandpass_notch(rec: &Recording, spec: &FilterSpec) -> SignalResult<Recording> {
    spec.validate(rec.fs())?;
    let sos = spec.sections(rec.fs());
    let pad = (3.0 * rec.fs()).round() as usize;
    let data = rec.data().iter().map(|row| filtfilt(&sos, row, pad)).collect();
    Ok(rec.with_data(rec.fs(), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn butterworth_qs_for_order_four() {
        let q = butterworth_qs(4);
        assert!((q[0] - 1.306_562_964_876_377).abs() < 1e-12);
        assert!((q[1] - 0.541_196_100_146_197).abs() < 1e-12);
    }

    #[test]
    fn cascade_is_minus_3db_at_corner() {
        let spec = FilterSpec {
            low: 0.5,
            high: 40.0,
            notch: 20.0,
        };
        let qs = butterworth_qs(4);
        let g: f64 = qs
            .iter()
            .map(|&q| Biquad::lowpass(spec.high, 200.0, q).gain(40.0, 200.0))
            .product();
        assert!((g - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn notch_zero_at_center() {
        let n = Biquad::notch(50.0, 200.0, NOTCH_Q);
        assert!(n.gain(50.0, 200.0) < 1e-12);
        assert!((n.gain(10.0, 200.0) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn invalid_edges_rejected() {
        let spec = FilterSpec {
            low: 10.0,
            high: 5.0,
            notch: 7.0,
        };
        assert!(spec.validate(200.0).is_err());
        let spec = FilterSpec {
            low: 0.1,
            high: 75.0,
            notch: 80.0,
        };
        assert!(spec.validate(200.0).is_err());
    }

    #[test]
    fn tone_continues_past_the_edge() {
        let w = 0.3f64;
        let x: Vec<f64> = (0..200).map(|i| (w * i as f64 + 0.4).sin()).collect();
        let ext = extrapolate(&x, 50);
        for (j, v) in ext.iter().enumerate() {
            let t = (200 + j) as f64;
            let e = (v - (w * t + 0.4).sin()).abs();
            assert!(e < 1e-3, "j={j} err={e}");
        }
    }

    #[test]
    fn constant_extends_as_constant() {
        assert!(extrapolate(&[3.0; 40], 10).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn zero_in_zero_out() {
        let rec = Recording::new(vec!["a".into()], 200.0, vec![vec![0.0; 500]]).unwrap();
        let out = bandpass_notch(
            &rec,
            &FilterSpec {
                low: 0.1,
                high: 75.0,
                notch: 50.0,
            },
        )
        .unwrap();
        assert!(out.channel(0).iter().all(|&v| v == 0.0));
    }
}
