//! Kaiser-windowed sinc interpolation to an arbitrary target rate.

use std::f64::consts::PI;

use super::{Recording, SignalError, SignalResult};

pub const KAISER_BETA: f64 = 8.6;
/// Kernel length in zero crossings of the interpolating sinc.
pub const TAPS: usize = 64;
/// Cutoff as a fraction of the lower of the two Nyquist rates.
pub const ROLLOFF: f64 = 0.945;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Output length is `floor(T * target_fs / fs)`. When downsampling the
/// kernel is stretched so its cutoff sits below the new Nyquist rate. Weights
/// are renormalised per output sample, so constants pass through unchanged
/// (edges included).
pub fn resample(rec: &Recording, target_fs: f64) -> SignalResult<Recording> {
    if !(target_fs > 0.0 && target_fs.is_finite()) {
        return Err(SignalError::Parameter(format!(
            "target rate {target_fs} must be positive"
        )));
    }
    if target_fs == rec.fs() {
        return Ok(rec.clone());
    }
    let ratio = target_fs / rec.fs();
    let t_in = rec.n_samples();
    let t_out = (t_in as f64 * ratio).floor() as usize;
    if t_out == 0 {
        return Err(SignalError::TooShort {
            needed: (rec.fs() / target_fs).ceil() as usize,
            got: t_in,
        });
    }
    // cutoff in cycles per input sample, relative to input Nyquist
    let fc = ROLLOFF * ratio.min(1.0);
    let half = (TAPS / 2) as f64 / fc;
    let i0b = bessel_i0(KAISER_BETA);

    let plan: Vec<(usize, Vec<f64>)> = (0..t_out)
        .map(|j| {
            let u = j as f64 / ratio;
            let lo = (u - half).ceil().max(0.0) as usize;
            let hi = ((u + half).floor() as usize).min(t_in - 1);
            let mut w: Vec<f64> = (lo..=hi)
                .map(|i| {
                    let d = i as f64 - u;
                    let r = d / half;
                    let win = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / i0b;
                    fc * sinc(fc * d) * win
                })
                .collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            (lo, w)
        })
        .collect();

    let data = rec
        .data()
        .iter()
        .map(|row| {
            plan.iter()
                .map(|(lo, w)| w.iter().zip(&row[*lo..]).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(rec.with_data(target_fs, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_known_value() {
        // I0(1) = 1.2660658777520082
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_2).abs() < 1e-15);
    }

    #[test]
    fn identity_when_rate_matches() {
        let rec = Recording::new(vec!["a".into()], 200.0, vec![vec![1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(resample(&rec, 200.0).unwrap(), rec);
    }

    #[test]
    fn constant_is_preserved() {
        let rec = Recording::new(vec!["a".into()], 400.0, vec![vec![7.5; 801]]).unwrap();
        let out = resample(&rec, 200.0).unwrap();
        assert_eq!(out.n_samples(), 400);
        assert!(out.channel(0).iter().all(|v| (v - 7.5).abs() < 1e-12));
        let up = resample(&rec, 512.0).unwrap();
        assert!(up.channel(0).iter().all(|v| (v - 7.5).abs() < 1e-12));
    }
}
