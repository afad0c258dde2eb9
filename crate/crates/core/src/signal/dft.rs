//! One-sided DFT magnitudes per patch.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::PatchedSignal;

/// `C x P x (W/2 + 1)` magnitudes, rows ordered like the patches.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralTarget {
    pub bins: usize,
    pub magnitudes: Vec<f64>,
}

impl SpectralTarget {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.magnitudes[r * self.bins..(r + 1) * self.bins]
    }
}

pub fn dft_target(ps: &PatchedSignal) -> SpectralTarget {
    let w = ps.width;
    let bins = w / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(w);
    let mut buf = vec![Complex::new(0.0, 0.0); w];
    let mut magnitudes = Vec::with_capacity(ps.rows() * bins);
    for r in 0..ps.rows() {
        for (b, x) in buf.iter_mut().zip(&ps.data[r * w..(r + 1) * w]) {
            *b = Complex::new(*x, 0.0);
        }
        fft.process(&mut buf);
        magnitudes.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    SpectralTarget { bins, magnitudes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: Vec<f64>) -> PatchedSignal {
        PatchedSignal {
            channels: 1,
            patches: 1,
            width: x.len(),
            data: x,
        }
    }

    #[test]
    fn integer_cycle_sinusoid_peaks_at_its_bin() {
        let x = (0..200)
            .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / 200.0).sin())
            .collect();
        let t = dft_target(&single(x));
        assert_eq!(t.bins, 101);
        let (arg, _) = t
            .row(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert_eq!(arg, 10);
    }

    #[test]
    fn zero_patch_zero_spectrum() {
        let t = dft_target(&single(vec![0.0; 16]));
        assert!(t.magnitudes.iter().all(|&m| m == 0.0));
    }
}
