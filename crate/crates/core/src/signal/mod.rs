//! Recordings, ingestion and the preprocessing chain
//! (resample, band-pass with notch, robust scaling), patching and the
//! per-patch magnitude spectrum.

mod dft;
mod filter;
mod io;
mod patch;
mod resample;
mod scale;

use std::path::PathBuf;

use thiserror::Error;

pub use dft::{dft_target, SpectralTarget};
pub use filter::{bandpass_notch, filtfilt, Biquad, FilterSpec, BUTTER_ORDER, NOTCH_Q};
pub use io::{load_recording, read_container, read_csv, write_container, ContainerManifest};
pub use patch::{patch, PatchedSignal};
pub use resample::resample;
pub use scale::{quantile, robust_scale, Scaled};

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("ingestion error in {path} at {location}: {msg}")]
    Ingest {
        path: PathBuf,
        location: String,
        msg: String,
    },
    #[error("invalid recording: {0}")]
    Invalid(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("signal too short: need {needed} samples, have {got}")]
    TooShort { needed: usize, got: usize },
}

pub type SignalResult<T> = Result<T, SignalError>;

/// Multi-channel recording; `data[c]` is channel `c` in microvolts.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    channels: Vec<String>,
    fs: f64,
    data: Vec<Vec<f64>>,
}

impl Recording {
    pub fn new(channels: Vec<String>, fs: f64, data: Vec<Vec<f64>>) -> SignalResult<Self> {
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(SignalError::Invalid(format!("sampling rate {fs} must be positive")));
        }
        if channels.len() != data.len() || channels.is_empty() {
            return Err(SignalError::Invalid(format!(
                "{} channel labels for {} data rows",
                channels.len(),
                data.len()
            )));
        }
        let t = data[0].len();
        if t == 0 {
            return Err(SignalError::Invalid("recording has no samples".into()));
        }
        if let Some((c, row)) = data.iter().enumerate().find(|(_, r)| r.len() != t) {
            return Err(SignalError::Invalid(format!(
                "channel {c} has {} samples, expected {t}",
                row.len()
            )));
        }
        for (i, a) in channels.iter().enumerate() {
            if channels[..i].contains(a) {
                return Err(SignalError::Invalid(format!("duplicate channel label `{a}`")));
            }
        }
        Ok(Self { channels, fs, data })
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn data(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c]
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_samples(&self) -> usize {
        self.data[0].len()
    }

    pub fn duration(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }

    /// Same labels and extents, new samples (internal transforms).
    pub(crate) fn with_data(&self, fs: f64, data: Vec<Vec<f64>>) -> Self {
        Self {
            channels: self.channels.clone(),
            fs,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_labels() {
        let r = Recording::new(
            vec!["Fz".into(), "Fz".into()],
            200.0,
            vec![vec![0.0; 4], vec![0.0; 4]],
        );
        assert!(matches!(r, Err(SignalError::Invalid(_))));
    }

    #[test]
    fn rejects_ragged_rows() {
        let r = Recording::new(
            vec!["a".into(), "b".into()],
            200.0,
            vec![vec![0.0; 4], vec![0.0; 3]],
        );
        assert!(r.is_err());
    }
}
