//! Inverse-frequency sampling of labelled examples.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::tensor::{TensorError, TensorResult};

/// Per-example weight `1 / count(label)`, so every class carries equal mass.
pub fn inverse_frequency_weights(labels: &[usize]) -> Vec<f64> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    labels.iter().map(|&l| 1.0 / counts[l] as f64).collect()
}

#[derive(Clone, Debug)]
pub struct BalancedSampler {
    index: WeightedIndex<f64>,
}

impl BalancedSampler {
    pub fn new(labels: &[usize]) -> TensorResult<Self> {
        let index = WeightedIndex::new(inverse_frequency_weights(labels))
            .map_err(|e| TensorError::Contract(format!("class balancing: {e}")))?;
        Ok(Self { index })
    }

    /// `n` example indices drawn with replacement.
    pub fn epoch(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..n).map(|_| self.index.sample(rng)).collect()
    }
}
