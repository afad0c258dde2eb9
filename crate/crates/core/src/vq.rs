//! Codebook quantization with a straight-through estimator.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub codes: usize,
    pub code_dim: usize,
    pub beta: f64,
    /// Epochs without use before an entry is re-seeded.
    pub dead_after_epochs: usize,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            codes: 64,
            code_dim: 8,
            beta: 0.25,
            dead_after_epochs: 2,
        }
    }
}

/// Index of the nearest codebook row for every row of `h`; ties go to the
/// lowest index.
pub fn nearest(codebook: &Tensor, h: &Tensor) -> TensorResult<Vec<usize>> {
    let (n, d) = codebook.dims2()?;
    let (rows, hd) = h.dims2()?;
    if d != hd || n == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "quantize",
            lhs: h.shape().to_vec(),
            rhs: codebook.shape().to_vec(),
        });
    }
    Ok((0..rows)
        .map(|r| {
            let x = h.row(r);
            let mut best = (0, f64::INFINITY);
            for j in 0..n {
                let dist: f64 = codebook.row(j).iter().zip(x).map(|(v, x)| (v - x) * (v - x)).sum();
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            best.0
        })
        .collect())
}

/// Flat token indices with their `(C, P)` extents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub indices: Vec<usize>,
    pub channels: usize,
    pub patches: usize,
}

impl TokenSequence {
    pub fn new(indices: Vec<usize>, channels: usize, patches: usize) -> TensorResult<Self> {
        if indices.len() != channels * patches {
            return Err(TensorError::Contract(format!(
                "{} tokens for {channels} x {patches}",
                indices.len()
            )));
        }
        Ok(Self {
            indices,
            channels,
            patches,
        })
    }
}

/// `mean((sg[h] - zq)^2) + beta * mean((h - sg[zq])^2)`.
pub fn quant_loss(g: &mut Graph, h: Var, zq: Var, beta: f64) -> TensorResult<Var> {
    let hd = g.detach(h);
    let zd = g.detach(zq);
    let codebook = g.mse(hd, zq)?;
    let commit = g.mse(h, zd)?;
    let commit = g.scale(commit, beta);
    g.add(codebook, commit)
}

pub struct QuantOut {
    pub tokens: Vec<usize>,
    /// Projected rows before quantization, `[N, D]`.
    pub h: Var,
    /// Selected codebook rows, `[N, D]`.
    pub zq: Var,
    /// Straight-through rows mapped back to `E`, `[N, E]`.
    pub up: Var,
    pub loss: Var,
}

#[derive(Clone, Debug)]
pub struct Quantizer {
    pub config: VqConfig,
    pub down: Linear,
    pub up: Linear,
    pub codebook: ParamId,
}

impl Quantizer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        config: VqConfig,
        rng: &mut impl Rng,
    ) -> TensorResult<Self> {
        if config.codes == 0 || config.code_dim == 0 {
            return Err(TensorError::Contract("codebook extents must be positive".into()));
        }
        let down = Linear::new(store, &format!("{name}.down"), dim, config.code_dim, true, rng)?;
        let up = Linear::new(store, &format!("{name}.up"), config.code_dim, dim, true, rng)?;
        let codebook = store.add_uniform(
            format!("{name}.codebook"),
            vec![config.codes, config.code_dim],
            config.code_dim,
            rng,
        )?;
        Ok(Self {
            config,
            down,
            up,
            codebook,
        })
    }

    pub fn project(&self, g: &mut Graph, s: &ParamStore, h: Var) -> TensorResult<Var> {
        self.down.forward(g, s, h)
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, h: Var) -> TensorResult<QuantOut> {
        let hp = self.project(g, s, h)?;
        let tokens = nearest(s.tensor(self.codebook), g.value(hp))?;
        let cb = g.param(s, self.codebook);
        let zq = g.gather_rows(cb, &tokens)?;
        let st = g.straight_through(hp, zq)?;
        let up = self.up.forward(g, s, st)?;
        let loss = quant_loss(g, hp, zq, self.config.beta)?;
        Ok(QuantOut {
            tokens,
            h: hp,
            zq,
            up,
            loss,
        })
    }

    /// Token indices only, no gradient bookkeeping kept.
    pub fn tokenize(&self, s: &ParamStore, h: &Tensor) -> TensorResult<Vec<usize>> {
        let mut g = Graph::new();
        let x = g.constant(h.clone());
        let hp = self.project(&mut g, s, x)?;
        nearest(s.tensor(self.codebook), g.value(hp))
    }

    /// Replaces the codebook with k-means centroids of `rows` (`[N, D]`),
    /// seeded from distinct random rows. Entries beyond `N` keep their values.
    pub fn kmeans_init(
        &self,
        s: &mut ParamStore,
        rows: &Tensor,
        iters: usize,
        rng: &mut impl Rng,
    ) -> TensorResult<()> {
        let (n, d) = rows.dims2()?;
        let mut cb = s.tensor(self.codebook).clone();
        let k = self.config.codes.min(n);
        if k == 0 {
            return Ok(());
        }
        for (j, r) in sample(rng, n, k).into_iter().enumerate() {
            cb.data_mut()[j * d..(j + 1) * d].copy_from_slice(rows.row(r));
        }
        for _ in 0..iters {
            let assign = nearest(&cb, rows)?;
            let mut sum = vec![0.0; k * d];
            let mut cnt = vec![0usize; k];
            for (r, &a) in assign.iter().enumerate() {
                if a < k {
                    cnt[a] += 1;
                    for (acc, v) in sum[a * d..(a + 1) * d].iter_mut().zip(rows.row(r)) {
                        *acc += v;
                    }
                }
            }
            for j in 0..k {
                if cnt[j] > 0 {
                    for t in 0..d {
                        cb.data_mut()[j * d + t] = sum[j * d + t] / cnt[j] as f64;
                    }
                }
            }
        }
        s.set(self.codebook, cb)
    }
}

/// `exp(entropy)` of the empirical token distribution; 0 tokens gives 0.
pub fn perplexity(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookHealth {
    pub perplexity: f64,
    pub used: usize,
    pub dead: usize,
    pub revived: usize,
}

/// Per-entry usage across epochs; drives dead-entry revival.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UsageTracker {
    pub epoch_counts: Vec<usize>,
    idle_epochs: Vec<usize>,
    dead_after: usize,
}

impl UsageTracker {
    pub fn new(codes: usize, dead_after: usize) -> Self {
        Self {
            epoch_counts: vec![0; codes],
            idle_epochs: vec![0; codes],
            dead_after,
        }
    }

    pub fn record(&mut self, tokens: &[usize]) {
        for &t in tokens {
            self.epoch_counts[t] += 1;
        }
    }

    /// Closes the epoch. Entries idle for `dead_after` epochs are re-seeded
    /// from random rows of `recent` (`[N, D]` encoder outputs) when given.
    pub fn end_epoch(
        &mut self,
        store: &mut ParamStore,
        codebook: ParamId,
        recent: Option<&Tensor>,
        rng: &mut impl Rng,
    ) -> TensorResult<CodebookHealth> {
        for (idle, &c) in self.idle_epochs.iter_mut().zip(&self.epoch_counts) {
            *idle = if c == 0 { *idle + 1 } else { 0 };
        }
        let health_ppl = perplexity(&self.epoch_counts);
        let used = self.epoch_counts.iter().filter(|&&c| c > 0).count();
        let dead: Vec<usize> = (0..self.idle_epochs.len())
            .filter(|&j| self.idle_epochs[j] >= self.dead_after)
            .collect();
        let mut revived = 0;
        if let Some(rows) = recent.filter(|r| r.shape()[0] > 0) {
            let (n, d) = rows.dims2()?;
            let mut cb = store.tensor(codebook).clone();
            for &j in &dead {
                let r = rng.random_range(0..n);
                cb.data_mut()[j * d..(j + 1) * d].copy_from_slice(rows.row(r));
                self.idle_epochs[j] = 0;
                revived += 1;
            }
            store.set(codebook, cb)?;
        }
        self.epoch_counts.iter_mut().for_each(|c| *c = 0);
        Ok(CodebookHealth {
            perplexity: health_ppl,
            used,
            dead: dead.len(),
            revived,
        })
    }
}

/// Token dump: header `C P N_v`, then one line of indices per sample.
pub fn write_token_dump(
    samples: &[TokenSequence],
    codes: usize,
    mut out: impl std::io::Write,
) -> std::io::Result<()> {
    let (c, p) = samples.first().map(|t| (t.channels, t.patches)).unwrap_or((0, 0));
    writeln!(out, "{c} {p} {codes}")?;
    for t in samples {
        let line: Vec<String> = t.indices.iter().map(usize::to_string).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_entry_example() {
        let cb = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let h = Tensor::from_rows(&[vec![0.9, 0.8]]).unwrap();
        assert_eq!(nearest(&cb, &h).unwrap(), vec![1]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = Tensor::from_rows(&[vec![1.0], vec![-1.0], vec![1.0]]).unwrap();
        let h = Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(nearest(&cb, &h).unwrap(), vec![0, 0]);
    }

    #[test]
    fn quant_loss_example() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let z = g.leaf(Tensor::zeros(vec![1, 2]));
        let l = quant_loss(&mut g, h, z, 0.25).unwrap();
        assert!((g.value(l).item().unwrap() - 0.625).abs() < 1e-15);
    }

    #[test]
    fn perplexity_examples() {
        assert!((perplexity(&[3; 8]) - 8.0).abs() < 1e-12);
        assert!((perplexity(&[0, 5, 0]) - 1.0).abs() < 1e-12);
        assert!((perplexity(&[4, 4, 0, 0, 0]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn idle_entries_are_revived_after_two_epochs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let cb = s.add("cb", Tensor::zeros(vec![3, 2])).unwrap();
        let rows = Tensor::full(vec![4, 2], 7.0);
        let mut u = UsageTracker::new(3, 2);
        u.record(&[0, 0]);
        let h1 = u.end_epoch(&mut s, cb, Some(&rows), &mut rng).unwrap();
        assert_eq!((h1.dead, h1.revived), (0, 0));
        u.record(&[0]);
        let h2 = u.end_epoch(&mut s, cb, Some(&rows), &mut rng).unwrap();
        assert_eq!((h2.used, h2.dead, h2.revived), (1, 2, 2));
        assert_eq!(s.tensor(cb).row(0), &[0.0, 0.0]);
        assert_eq!(s.tensor(cb).row(2), &[7.0, 7.0]);
    }

    #[test]
    fn dump_format() {
        let t = TokenSequence::new(vec![1, 2, 3, 4], 2, 2).unwrap();
        let mut buf = Vec::new();
        write_token_dump(&[t], 16, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "2 2 16\n1 2 3 4\n");
    }
}
