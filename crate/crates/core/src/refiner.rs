//! Latent-expert refiner: learned queries calibrated by profile text, then
//! aggregating the quantized EEG stream into a fixed number of summary rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{FeedForward, LayerNorm, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StarConfig {
    pub experts: usize,
    /// Width of the expert rows and of the text embedding.
    pub dim: usize,
    /// Width of the EEG rows being aggregated.
    pub kv_dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for StarConfig {
    fn default() -> Self {
        Self {
            experts: 4,
            dim: 64,
            kv_dim: 16,
            heads: 4,
            ffn_mult: 4,
        }
    }
}

pub struct StarOut {
    /// `[N_s, dim]` summary rows.
    pub s_sem: Var,
    /// Head-mean aggregation weights, `[N_s, C*P]`.
    pub attention: Tensor,
    pub q_lat: Var,
}

#[derive(Clone, Debug)]
pub struct Refiner {
    pub config: StarConfig,
    pub q_lat: ParamId,
    pub cal_attn: MultiHeadAttention,
    pub cal_norm: LayerNorm,
    pub cal_ffn: FeedForward,
    pub agg_attn: MultiHeadAttention,
    pub proj_ffn: FeedForward,
    pub proj_norm: LayerNorm,
}

impl Refiner {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: StarConfig,
        rng: &mut impl Rng,
    ) -> TensorResult<Self> {
        if config.experts == 0 {
            return Err(TensorError::Contract("at least one expert is required".into()));
        }
        let (d, hidden) = (config.dim, config.dim * config.ffn_mult);
        // unit-scale rows so the normalised Gram starts well away from degenerate
        let q_lat = store.add(
            format!("{name}.q_lat"),
            Tensor::from_fn(vec![config.experts, d], |_| rng.random_range(-1.0..1.0)),
        )?;
        Ok(Self {
            q_lat,
            cal_attn: MultiHeadAttention::new(store, &format!("{name}.cal_attn"), d, d, config.heads, rng)?,
            cal_norm: LayerNorm::new(store, &format!("{name}.cal_ln"), d)?,
            cal_ffn: FeedForward::new(store, &format!("{name}.cal_ffn"), d, hidden, rng)?,
            agg_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.agg_attn"),
                d,
                config.kv_dim,
                config.heads,
                rng,
            )?,
            proj_ffn: FeedForward::new(store, &format!("{name}.proj_ffn"), d, hidden, rng)?,
            proj_norm: LayerNorm::new(store, &format!("{name}.proj_ln"), d)?,
            config,
        })
    }

    /// `Qc = Q + MHCA(Q, text)`, then `FFN(LN(Qc)) + Qc`.
    pub fn calibrate(&self, g: &mut Graph, s: &ParamStore, q: Var, h_text: Var) -> TensorResult<Var> {
        if g.shape(h_text)[0] == 0 {
            return Err(TensorError::Contract("text embedding has no rows".into()));
        }
        let a = self.cal_attn.forward(g, s, q, h_text, None)?;
        let qc = g.add(q, a.out)?;
        let n = self.cal_norm.forward(g, s, qc)?;
        let f = self.cal_ffn.forward(g, s, n)?;
        g.add(f, qc)
    }

    /// Cross-attention of calibrated queries over EEG rows, no residual.
    pub fn aggregate(&self, g: &mut Graph, s: &ParamStore, q: Var, z: Var) -> TensorResult<(Var, Tensor)> {
        if g.shape(z)[0] == 0 {
            return Err(TensorError::Contract("token stream is empty".into()));
        }
        let a = self.agg_attn.forward(g, s, q, z, None)?;
        Ok((a.out, a.weights))
    }

    /// `LN(O + FFN(O))`.
    pub fn project(&self, g: &mut Graph, s: &ParamStore, o: Var) -> TensorResult<Var> {
        let f = self.proj_ffn.forward(g, s, o)?;
        let r = g.add(o, f)?;
        self.proj_norm.forward(g, s, r)
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, h_text: Var, z: Var) -> TensorResult<StarOut> {
        let q_lat = g.param(s, self.q_lat);
        let qc = self.calibrate(g, s, q_lat, h_text)?;
        let (o, attention) = self.aggregate(g, s, qc, z)?;
        let s_sem = self.project(g, s, o)?;
        Ok(StarOut {
            s_sem,
            attention,
            q_lat,
        })
    }
}

/// `|| Q Q^T / ||Q||_F^2 - I ||_F`. Invariant to rescaling `Q`.
pub fn orth_loss(g: &mut Graph, q: Var) -> TensorResult<Var> {
    let (n, _) = g.value(q).dims2()?;
    if g.value(q).data().iter().all(|&v| v == 0.0) {
        return Err(TensorError::Contract(
            "orthogonality loss is undefined for an all-zero expert matrix".into(),
        ));
    }
    let qt = g.transpose(q)?;
    let gram = g.matmul(q, qt)?;
    let sq = g.mul(q, q)?;
    let fro2 = g.sum(sq);
    let m = g.div_scalar(gram, fro2)?;
    let eye = g.constant(Tensor::identity(n));
    let d = g.sub(m, eye)?;
    let d2 = g.mul(d, d)?;
    let ss = g.sum(d2);
    Ok(g.sqrt(ss))
}

/// Attention rows re-normalised over channels for each `(expert, patch)`;
/// returns `(expert, channel, patch, weight)` tuples in that nesting order.
pub fn attention_by_channel(
    weights: &Tensor,
    channels: usize,
    patches: usize,
) -> TensorResult<Vec<(usize, usize, usize, f64)>> {
    let (experts, cols) = weights.dims2()?;
    if cols != channels * patches {
        return Err(TensorError::Contract(format!(
            "{cols} attention columns for {channels} x {patches} tokens"
        )));
    }
    let mut out = Vec::with_capacity(experts * cols);
    for e in 0..experts {
        let row = weights.row(e);
        let totals: Vec<f64> = (0..patches)
            .map(|p| (0..channels).map(|c| row[c * patches + p]).sum())
            .collect();
        for c in 0..channels {
            for p in 0..patches {
                let w = row[c * patches + p];
                let t = totals[p];
                out.push((e, c, p, if t > 0.0 { w / t } else { 0.0 }));
            }
        }
    }
    Ok(out)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Maps profile text to `[L, dim]` rows. Implementations must be
/// deterministic for fixed text and configuration.
pub trait TextEmbedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Tensor;
}

/// Signed feature hashing of each word and its character trigrams; one
/// L2-normalised row per word, at most `max_rows` rows.
#[derive(Clone, Debug)]
pub struct HashedBagOfWords {
    pub dim: usize,
    pub max_rows: usize,
}

impl HashedBagOfWords {
    pub fn new(dim: usize, max_rows: usize) -> Self {
        Self { dim, max_rows }
    }

    fn add_feature(&self, row: &mut [f64], feat: &str) {
        let h = fnv1a(feat.as_bytes());
        let idx = (h % self.dim as u64) as usize;
        let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
        row[idx] += sign;
    }
}

impl TextEmbedder for HashedBagOfWords {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Tensor {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric() && c != '.' && c != '-')
            .map(|w| w.trim_matches(|c| c == '.' || c == '-').to_lowercase())
            .filter(|w| !w.is_empty())
            .take(self.max_rows)
            .collect();
        let mut data = Vec::with_capacity(words.len() * self.dim);
        for w in &words {
            let mut row = vec![0.0; self.dim];
            self.add_feature(&mut row, w);
            let padded: Vec<char> = format!("<{w}>").chars().collect();
            for tri in padded.windows(3) {
                self.add_feature(&mut row, &tri.iter().collect::<String>());
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
            data.extend(row);
        }
        Tensor::new(vec![words.len(), self.dim], data).expect("extent computed")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orth_of(rows: &[Vec<f64>]) -> f64 {
        let mut g = Graph::new();
        let q = g.leaf(Tensor::from_rows(rows).unwrap());
        let l = orth_loss(&mut g, q).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn orth_closed_forms() {
        assert!(orth_of(&[vec![3.0, -1.0]]).abs() < 1e-15);
        let v = orth_of(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((v - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn orth_zero_matrix_errors() {
        let mut g = Graph::new();
        let q = g.leaf(Tensor::zeros(vec![2, 3]));
        assert!(orth_loss(&mut g, q).is_err());
    }

    #[test]
    fn orth_singleton_gradient_is_finite() {
        let mut g = Graph::new();
        let q = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let l = orth_loss(&mut g, q).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(q).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn embedder_is_deterministic_and_normalised() {
        let e = HashedBagOfWords::new(32, 64);
        let a = e.embed("Delta band dominates; Channel C4.");
        let b = e.embed("Delta band dominates; Channel C4.");
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[5, 32]);
        for r in 0..5 {
            let n: f64 = a.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(e.embed("  ").shape(), &[0, 32]);
    }

    #[test]
    fn channel_normalisation() {
        let w = Tensor::new(vec![1, 4], vec![0.1, 0.3, 0.2, 0.4]).unwrap();
        let rows = attention_by_channel(&w, 2, 2).unwrap();
        // patch 0 holds columns 0 (c0) and 2 (c1)
        assert_eq!((rows[0].0, rows[0].1, rows[0].2), (0, 0, 0));
        assert!((rows[0].3 - 1.0 / 3.0).abs() < 1e-15);
        assert!((rows[2].3 - 0.2 / 0.3).abs() < 1e-15);
        assert!((rows[1].3 + rows[3].3 - 1.0).abs() < 1e-15);
    }
}
