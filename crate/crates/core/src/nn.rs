//! Layers built on the tape: linear maps (with optional low-rank adapters),
//! layer norm, feed-forward blocks and multi-head attention.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tensor, TensorError, TensorResult};

pub const LN_EPS: f64 = 1e-5;

/// Low-rank delta on a frozen weight: `W + (alpha/r) * B * A` with
/// `A: r x in`, `B: out x r`.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraPair {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// `y = x W + b` with `W` stored as `in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub lora: Option<LoraPair>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> TensorResult<Self> {
        let w = store.add_uniform(format!("{name}.w"), vec![in_dim, out_dim], in_dim, rng)?;
        let b = if bias {
            Some(store.add_uniform(format!("{name}.b"), vec![out_dim], in_dim, rng)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            w,
            b,
            lora: None,
            in_dim,
            out_dim,
        })
    }

    /// Re-binds to parameters already present in `store` (after loading).
    pub fn bind(store: &ParamStore, name: &str) -> TensorResult<Self> {
        let w = lookup(store, &format!("{name}.w"))?;
        let (in_dim, out_dim) = store.tensor(w).dims2()?;
        let b = store.id(&format!("{name}.b"));
        let lora = match (store.id(&format!("{name}.lora_a")), store.id(&format!("{name}.lora_b"))) {
            (Some(a), Some(b)) => {
                let rank = store.tensor(a).shape()[0];
                Some(LoraPair {
                    a,
                    b,
                    rank,
                    alpha: store.tensor(lookup(store, &format!("{name}.lora_alpha"))?).item()?,
                })
            }
            _ => None,
        };
        Ok(Self {
            name: name.to_string(),
            w,
            b,
            lora,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> TensorResult<Var> {
        let w = g.param(s, self.w);
        let mut y = g.matmul(x, w)?;
        if let Some(l) = &self.lora {
            let a = g.param(s, l.a);
            let b = g.param(s, l.b);
            let at = g.transpose(a)?;
            let bt = g.transpose(b)?;
            let xa = g.matmul(x, at)?;
            let xab = g.matmul(xa, bt)?;
            let d = g.scale(xab, l.scale());
            y = g.add(y, d)?;
        }
        if let Some(b) = self.b {
            let b = g.param(s, b);
            y = g.add_bias(y, b)?;
        }
        Ok(y)
    }

    /// Adds a fresh adapter: `A` uniform, `B` zero, so the layer's output is
    /// unchanged until `B` moves. The alpha is stored as a frozen scalar so
    /// checkpoints carry it.
    pub fn attach_lora(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f64,
        rng: &mut impl Rng,
    ) -> TensorResult<()> {
        if rank == 0 {
            return Err(TensorError::Contract("LoRA rank must be at least 1".into()));
        }
        if self.lora.is_some() {
            return Err(TensorError::Contract(format!(
                "{} already carries an adapter",
                self.name
            )));
        }
        let (an, bn, aln) = (
            format!("{}.lora_a", self.name),
            format!("{}.lora_b", self.name),
            format!("{}.lora_alpha", self.name),
        );
        let bound = 1.0 / (self.in_dim as f64).sqrt();
        let a_init = Tensor::from_fn(vec![rank, self.in_dim], |_| rng.random_range(-bound..=bound));
        let b_init = Tensor::zeros(vec![self.out_dim, rank]);
        // A merged adapter leaves its slots behind; a fresh one reuses them.
        let (a, b, al) = match (store.id(&an), store.id(&bn), store.id(&aln)) {
            (Some(a), Some(b), Some(al)) => {
                if store.tensor(a).shape() != a_init.shape() {
                    return Err(TensorError::Contract(format!(
                        "{}: adapter rank differs from the merged one",
                        self.name
                    )));
                }
                store.set(a, a_init)?;
                store.set(b, b_init)?;
                store.set(al, Tensor::scalar(alpha))?;
                (a, b, al)
            }
            _ => (
                store.add(an, a_init)?,
                store.add(bn, b_init)?,
                store.add(aln, Tensor::scalar(alpha))?,
            ),
        };
        store.configure(a, true, 1.0);
        store.configure(b, true, 1.0);
        store.configure(al, false, 1.0);
        self.lora = Some(LoraPair { a, b, rank, alpha });
        Ok(())
    }

    /// Folds the adapter into the base weight and zeroes `B`; the adapter
    /// parameters stay in the store (frozen) so the layout is stable.
    pub fn merge_lora(&mut self, store: &mut ParamStore) -> TensorResult<()> {
        let Some(l) = self.lora.take() else {
            return Ok(());
        };
        let delta = store.tensor(l.b).matmul(store.tensor(l.a))?; // out x in
        let scale = l.scale();
        let (inn, out) = (self.in_dim, self.out_dim);
        let w = store.tensor_mut(self.w).data_mut();
        for i in 0..inn {
            for o in 0..out {
                w[i * out + o] += scale * delta.data()[o * inn + i];
            }
        }
        store.tensor_mut(l.b).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.configure(l.a, false, 1.0);
        store.configure(l.b, false, 1.0);
        Ok(())
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.b);
        if let Some(l) = &self.lora {
            v.extend([l.a, l.b]);
        }
        v
    }
}

pub(crate) fn lookup(store: &ParamStore, name: &str) -> TensorResult<ParamId> {
    store
        .id(name)
        .ok_or_else(|| TensorError::Contract(format!("missing parameter `{name}`")))
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> TensorResult<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![dim], 1.0))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]))?,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> TensorResult<Self> {
        Ok(Self {
            gamma: lookup(store, &format!("{name}.gamma"))?,
            beta: lookup(store, &format!("{name}.beta"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> TensorResult<Var> {
        let gamma = g.param(s, self.gamma);
        let beta = g.param(s, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Two-layer MLP with GELU: `dim -> hidden -> dim`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> TensorResult<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn bind(store: &ParamStore, name: &str) -> TensorResult<Self> {
        Ok(Self {
            up: Linear::bind(store, &format!("{name}.up"))?,
            down: Linear::bind(store, &format!("{name}.down"))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> TensorResult<Var> {
        let h = self.up.forward(g, s, x)?;
        let h = g.gelu(h);
        self.down.forward(g, s, h)
    }
}

/// Multi-head scaled dot-product attention. Queries come from one token set
/// and keys/values from another (same set for self-attention).
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention forward result; `weights` is the head-mean `nq x nk` map.
pub struct AttentionOut {
    pub out: Var,
    pub weights: Tensor,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> TensorResult<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Contract(format!(
                "{name}: {heads} heads do not divide width {dim}"
            )));
        }
        Ok(Self {
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, true, rng)?,
            wk: Linear::new(store, &format!("{name}.wk"), kv_dim, dim, true, rng)?,
            wv: Linear::new(store, &format!("{name}.wv"), kv_dim, dim, true, rng)?,
            wo: Linear::new(store, &format!("{name}.wo"), dim, dim, true, rng)?,
            heads,
            dim,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, heads: usize) -> TensorResult<Self> {
        let wq = Linear::bind(store, &format!("{name}.wq"))?;
        let dim = wq.out_dim;
        Ok(Self {
            wq,
            wk: Linear::bind(store, &format!("{name}.wk"))?,
            wv: Linear::bind(store, &format!("{name}.wv"))?,
            wo: Linear::bind(store, &format!("{name}.wo"))?,
            heads,
            dim,
        })
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    /// `mask`, if given, is an additive `nq x nk` constant (e.g. `-1e9` above
    /// the diagonal for causal attention).
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        q_in: Var,
        kv_in: Var,
        mask: Option<&Tensor>,
    ) -> TensorResult<AttentionOut> {
        let q = self.wq.forward(g, s, q_in)?;
        let k = self.wk.forward(g, s, kv_in)?;
        let v = self.wv.forward(g, s, kv_in)?;
        let nq = g.shape(q)[0];
        let nk = g.shape(k)[0];
        let dh = self.dim / self.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mask = match mask {
            Some(m) => {
                if m.shape() != [nq, nk] {
                    return Err(TensorError::ShapeMismatch {
                        op: "attention mask",
                        lhs: m.shape().to_vec(),
                        rhs: vec![nq, nk],
                    });
                }
                Some(g.constant(m.clone()))
            }
            None => None,
        };
        let mut outs = Vec::with_capacity(self.heads);
        let mut mean = vec![0.0; nq * nk];
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let sc = g.matmul(qh, kt)?;
            let mut sc = g.scale(sc, inv);
            if let Some(m) = mask {
                sc = g.add(sc, m)?;
            }
            let p = g.softmax(sc, 1)?;
            for (m, w) in mean.iter_mut().zip(g.value(p).data()) {
                *m += w / self.heads as f64;
            }
            outs.push(g.matmul(p, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let out = self.wo.forward(g, s, cat)?;
        Ok(AttentionOut {
            out,
            weights: Tensor::new(vec![nq, nk], mean)?,
        })
    }
}

/// `-1e9` strictly above the diagonal, `0` elsewhere.
pub fn causal_mask(n: usize) -> Tensor {
    Tensor::from_fn(vec![n, n], |i| if i % n > i / n { -1e9 } else { 0.0 })
}
