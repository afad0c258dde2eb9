//! Small decoder-only causal transformer over the joint text + EEG
//! vocabulary, with low-rank adapter plumbing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sequence::HybridSequence;
use crate::autograd::{Graph, Var};
use crate::nn::{causal_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError, TensorResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub v_text: usize,
    pub v_eeg: usize,
    pub max_len: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 64,
            heads: 4,
            ffn_mult: 4,
            v_text: 512,
            v_eeg: 64,
            max_len: 256,
        }
    }
}

impl BackboneConfig {
    pub fn vocab(&self) -> usize {
        self.v_text + self.v_eeg
    }
}

/// Pre-norm block: `x + attn(LN(x))`, then `x + ffn(LN(x))`.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

/// Adapter target names accepted by [`ToyBackbone::apply_lora`].
pub const LORA_TARGETS: [&str; 6] = ["wq", "wk", "wv", "wo", "up", "down"];

#[derive(Clone, Debug)]
pub struct ToyBackbone {
    pub config: BackboneConfig,
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
    pub name: String,
}

impl ToyBackbone {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: BackboneConfig,
        rng: &mut impl Rng,
    ) -> TensorResult<Self> {
        let (e, v) = (config.dim, config.vocab());
        let embed = store.add(
            format!("{name}.embed"),
            Tensor::from_fn(vec![v, e], |_| rng.random_range(-0.1..0.1)),
        )?;
        let pos = store.add(
            format!("{name}.pos"),
            Tensor::from_fn(vec![config.max_len, e], |_| rng.random_range(-0.02..0.02)),
        )?;
        let blocks = (0..config.layers)
            .map(|l| -> TensorResult<DecoderBlock> {
                let p = format!("{name}.block{l}");
                Ok(DecoderBlock {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), e)?,
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), e, e, config.heads, rng)?,
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), e)?,
                    ffn: FeedForward::new(store, &format!("{p}.ffn"), e, e * config.ffn_mult, rng)?,
                })
            })
            .collect::<TensorResult<Vec<_>>>()?;
        Ok(Self {
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), e)?,
            head: Linear::new(store, &format!("{name}.head"), e, v, true, rng)?,
            config,
            embed,
            pos,
            blocks,
            name: name.to_string(),
        })
    }

    /// Input rows: token embeddings, with summary rows `sem` spliced into the
    /// summary span, plus learned positions.
    pub fn embed_sequence(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        seq: &HybridSequence,
        sem: Option<Var>,
    ) -> TensorResult<Var> {
        let n = seq.len();
        if n > self.config.max_len {
            return Err(TensorError::Contract(format!(
                "sequence of {n} exceeds the position table ({})",
                self.config.max_len
            )));
        }
        let table = g.param(s, self.embed);
        let span = &seq.spans.sem;
        let ids_of = |r: std::ops::Range<usize>| -> Vec<usize> {
            seq.ids[r].iter().map(|t| t.expect("token slot")).collect()
        };
        let mut parts = vec![g.gather_rows(table, &ids_of(0..span.start))?];
        if !span.is_empty() {
            let sem = sem.ok_or_else(|| TensorError::Contract("summary rows missing".into()))?;
            let (rows, width) = g.value(sem).dims2()?;
            if rows != span.len() || width != self.config.dim {
                return Err(TensorError::ShapeMismatch {
                    op: "summary splice",
                    lhs: vec![rows, width],
                    rhs: vec![span.len(), self.config.dim],
                });
            }
            parts.push(sem);
        }
        parts.push(g.gather_rows(table, &ids_of(span.end..n))?);
        let x = g.concat_rows(&parts)?;
        let pt = g.param(s, self.pos);
        let pos = g.gather_rows(pt, &(0..n).collect::<Vec<_>>())?;
        g.add(x, pos)
    }

    /// Logits `[T, V_total]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        seq: &HybridSequence,
        sem: Option<Var>,
    ) -> TensorResult<Var> {
        let x = self.embed_sequence(g, s, seq, sem)?;
        self.forward_embedded(g, s, x)
    }

    pub fn forward_embedded(&self, g: &mut Graph, s: &ParamStore, mut x: Var) -> TensorResult<Var> {
        let mask = causal_mask(g.shape(x)[0]);
        for b in &self.blocks {
            let h = b.ln1.forward(g, s, x)?;
            let a = b.attn.forward(g, s, h, h, Some(&mask))?;
            x = g.add(x, a.out)?;
            let h = b.ln2.forward(g, s, x)?;
            let f = b.ffn.forward(g, s, h)?;
            x = g.add(x, f)?;
        }
        let h = self.ln_f.forward(g, s, x)?;
        self.head.forward(g, s, h)
    }

    fn targets_mut(&mut self, targets: &[&str]) -> TensorResult<Vec<&mut Linear>> {
        if let Some(bad) = targets.iter().find(|t| !LORA_TARGETS.contains(t)) {
            return Err(TensorError::Contract(format!(
                "unknown adapter target `{bad}`; expected one of {LORA_TARGETS:?}"
            )));
        }
        let mut out = Vec::new();
        for b in &mut self.blocks {
            let [wq, wk, wv, wo] = b.attn.linears_mut();
            for (tag, lin) in [
                ("wq", wq),
                ("wk", wk),
                ("wv", wv),
                ("wo", wo),
                ("up", &mut b.ffn.up),
                ("down", &mut b.ffn.down),
            ] {
                if targets.contains(&tag) {
                    out.push(lin);
                }
            }
        }
        Ok(out)
    }

    /// Attaches fresh adapters to every `targets` linear in every block.
    pub fn apply_lora(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f64,
        targets: &[&str],
        rng: &mut impl Rng,
    ) -> TensorResult<()> {
        for lin in self.targets_mut(targets)? {
            lin.attach_lora(store, rank, alpha, rng)?;
        }
        Ok(())
    }

    pub fn merge_lora(&mut self, store: &mut ParamStore) -> TensorResult<()> {
        for lin in self.targets_mut(&LORA_TARGETS)? {
            lin.merge_lora(store)?;
        }
        Ok(())
    }

    /// Adapter `A`/`B` ids currently attached.
    pub fn lora_params(&mut self) -> Vec<ParamId> {
        self.targets_mut(&LORA_TARGETS)
            .expect("known targets")
            .into_iter()
            .filter_map(|l| l.lora.as_ref().map(|p| [p.a, p.b]))
            .flatten()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ParamStore, ToyBackbone) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = ParamStore::new();
        let cfg = BackboneConfig {
            layers: 1,
            dim: 8,
            heads: 2,
            ffn_mult: 2,
            v_text: 20,
            v_eeg: 6,
            max_len: 32,
        };
        let b = ToyBackbone::new(&mut s, "lm", cfg, &mut rng).unwrap();
        (s, b)
    }

    #[test]
    fn causal_probe() {
        let (s, b) = tiny();
        let a = HybridSequence::assemble(&[5, 6, 7], 0, &[1, 2, 3], 20, 6, &[], &[]).unwrap();
        let mut c = a.clone();
        c.ids[6] = Some(20 + 5);
        let mut g = Graph::new();
        let la = b.forward(&mut g, &s, &a, None).unwrap();
        let lc = b.forward(&mut g, &s, &c, None).unwrap();
        let v = 26;
        let (va, vc) = (g.value(la).data(), g.value(lc).data());
        assert_eq!(&va[..6 * v], &vc[..6 * v]);
        assert_ne!(&va[6 * v..7 * v], &vc[6 * v..7 * v]);
    }

    #[test]
    fn unknown_target_rejected() {
        let (mut s, mut b) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(b.apply_lora(&mut s, 2, 4.0, &["wz"], &mut rng).is_err());
    }

    #[test]
    fn fresh_adapters_leave_logits_unchanged() {
        let (mut s, mut b) = tiny();
        let seq = HybridSequence::assemble(&[5, 6], 0, &[1], 20, 6, &[], &[]).unwrap();
        let mut g = Graph::new();
        let l = b.forward(&mut g, &s, &seq, None).unwrap();
        let before = g.value(l).clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.apply_lora(&mut s, 2, 4.0, &LORA_TARGETS, &mut rng).unwrap();
        assert_eq!(b.lora_params().len(), 12);
        let mut g = Graph::new();
        let l = b.forward(&mut g, &s, &seq, None).unwrap();
        let after = g.value(l).clone();
        assert_eq!(before, after);
    }
}
