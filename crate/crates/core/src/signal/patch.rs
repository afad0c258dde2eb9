//! Non-overlapping fixed-length patches.

use super::{Recording, SignalError, SignalResult};

/// `C x P x W` samples, row-major; patch `p` of channel `c` covers samples
/// `[p*W, (p+1)*W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchedSignal {
    pub channels: usize,
    pub patches: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PatchedSignal {
    pub fn patch(&self, c: usize, p: usize) -> &[f64] {
        let start = (c * self.patches + p) * self.width;
        &self.data[start..start + self.width]
    }

    /// Rows of length `W`, ordered `c * P + p`.
    pub fn rows(&self) -> usize {
        self.channels * self.patches
    }
}

pub fn patch(rec: &Recording, width: usize) -> SignalResult<PatchedSignal> {
    if width == 0 {
        return Err(SignalError::Parameter("patch length must be at least 1".into()));
    }
    let t = rec.n_samples();
    if t < width {
        return Err(SignalError::TooShort {
            needed: width,
            got: t,
        });
    }
    let p = t / width;
    let mut data = Vec::with_capacity(rec.n_channels() * p * width);
    for row in rec.data() {
        data.extend_from_slice(&row[..p * width]);
    }
    Ok(PatchedSignal {
        channels: rec.n_channels(),
        patches: p,
        width,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize) -> Recording {
        Recording::new(vec!["a".into()], 200.0, vec![(0..t).map(|i| i as f64).collect()]).unwrap()
    }

    #[test]
    fn floor_semantics() {
        let ps = patch(&ramp(450), 200).unwrap();
        assert_eq!(ps.patches, 2);
        assert_eq!(ps.patch(0, 1)[0], 200.0);
    }

    #[test]
    fn exact_fit_is_identity() {
        let r = ramp(200);
        let ps = patch(&r, 200).unwrap();
        assert_eq!(ps.patches, 1);
        assert_eq!(ps.patch(0, 0), r.channel(0));
    }

    #[test]
    fn short_record_rejected() {
        assert!(matches!(
            patch(&ramp(199), 200),
            Err(SignalError::TooShort { needed: 200, got: 199 })
        ));
    }
}
