//! Patch embedding and the dual-stream hierarchical encoder.
//!
//! Token rows are ordered `c*P + p` (channel-major) throughout. A level's
//! tokens are `(group, patch)` pairs ordered `g*P + p`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::signal::PatchedSignal;
use crate::tensor::{Tensor, TensorError, TensorResult};
use crate::topology::{Hierarchy, LEVELS};

/// `(in, out, kernel, stride, pad)` per convolution stage.
pub const CONV_STAGES: [(usize, usize, usize, usize, usize); 3] =
    [(1, 16, 15, 8, 7), (16, 16, 3, 1, 1), (16, 16, 3, 1, 1)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_len: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Rows of the learned patch-position table.
    pub max_patches: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_len: 200,
            dim: 16,
            heads: 2,
            ffn_mult: 4,
            max_patches: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> TensorResult<()> {
        if self.patch_len == 0 || self.dim == 0 || self.ffn_mult == 0 || self.max_patches == 0 {
            return Err(TensorError::Contract(
                "encoder extents must be positive".into(),
            ));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(TensorError::Contract(format!(
                "{} heads do not divide encoder width {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

/// Output length of one convolution stage.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - k) / stride + 1
}

#[derive(Clone, Debug)]
struct ConvStage {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

/// Three conv stages with GELU, flattened and projected to `E`.
#[derive(Clone, Debug)]
pub struct TemporalEmbedder {
    stages: Vec<ConvStage>,
    pub proj: Linear,
    pub patch_len: usize,
    /// Length after the conv stack (25 for `W=200`).
    pub conv_len: usize,
}

impl TemporalEmbedder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        patch_len: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> TensorResult<Self> {
        let mut len = patch_len;
        let mut stages = Vec::new();
        for (i, &(cin, cout, k, stride, pad)) in CONV_STAGES.iter().enumerate() {
            if len + 2 * pad < k {
                return Err(TensorError::Contract(format!(
                    "patch length {patch_len} too short for the conv stack"
                )));
            }
            let w = store.add_uniform(format!("{name}.conv{i}.w"), vec![cout, cin, k], cin * k, rng)?;
            let b = store.add_uniform(format!("{name}.conv{i}.b"), vec![cout], cin * k, rng)?;
            stages.push(ConvStage { w, b, stride, pad });
            len = conv_out_len(len, k, stride, pad);
        }
        let flat = CONV_STAGES[2].1 * len;
        Ok(Self {
            stages,
            proj: Linear::new(store, &format!("{name}.proj"), flat, dim, true, rng)?,
            patch_len,
            conv_len: len,
        })
    }

    /// `[C*P, E]` features for every patch.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, ps: &PatchedSignal) -> TensorResult<Var> {
        if ps.width != self.patch_len {
            return Err(TensorError::Contract(format!(
                "patch length {} does not match the embedder's {}",
                ps.width, self.patch_len
            )));
        }
        let x = g.constant(Tensor::new(vec![ps.rows(), 1, ps.width], ps.data.clone())?);
        self.forward_raw(g, s, x)
    }

    /// Same as [`forward`](Self::forward) on a `[N, 1, W]` input var.
    pub fn forward_raw(&self, g: &mut Graph, s: &ParamStore, x: Var) -> TensorResult<Var> {
        let n = g.shape(x)[0];
        let mut h = x;
        for st in &self.stages {
            let w = g.param(s, st.w);
            let b = g.param(s, st.b);
            h = g.conv1d(h, w, Some(b), st.stride, st.pad)?;
            h = g.gelu(h);
        }
        let flat = g.reshape(h, vec![n, CONV_STAGES[2].1 * self.conv_len])?;
        self.proj.forward(g, s, flat)
    }
}

/// One cross-scale step: `FFN(LN(MHA(query, kv) + query))`.
#[derive(Clone, Debug)]
pub struct CsaBlock {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
    pub ffn: FeedForward,
}

impl CsaBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> TensorResult<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng)?,
            norm: LayerNorm::new(store, &format!("{name}.ln"), dim)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        query: Var,
        kv: Var,
    ) -> TensorResult<(Var, Tensor)> {
        let a = self.attn.forward(g, s, query, kv, None)?;
        let r = g.add(a.out, query)?;
        let n = self.norm.forward(g, s, r)?;
        Ok((self.ffn.forward(g, s, n)?, a.weights))
    }
}

/// Everything a forward pass produces; vars live on the caller's graph.
pub struct EncoderOutput {
    /// Fused embedding, `[C*P, E]`.
    pub h: Var,
    /// Pooled features per level, coarsest first; level `k` is `[n_k*P, E]`.
    pub levels: Vec<Var>,
    /// Global stream states, `G_0` through the final self-attention step.
    pub global: Vec<Var>,
    /// Local stream states, `L_0` through the final self-attention step.
    pub local: Vec<Var>,
    /// Head-mean attention maps in execution order (global steps, global
    /// final, local steps, local final).
    pub attention: Vec<Tensor>,
    pub channels: usize,
    pub patches: usize,
}

#[derive(Clone, Debug)]
pub struct DshaEncoder {
    pub config: EncoderConfig,
    pub embed: TemporalEmbedder,
    pub pos: ParamId,
    pub global_steps: Vec<CsaBlock>,
    pub local_steps: Vec<CsaBlock>,
    pub global_final: CsaBlock,
    pub local_final: CsaBlock,
    pub fuse: Linear,
}

impl DshaEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: EncoderConfig,
        rng: &mut impl Rng,
    ) -> TensorResult<Self> {
        config.validate()?;
        let (e, heads, hidden) = (config.dim, config.heads, config.dim * config.ffn_mult);
        let embed = TemporalEmbedder::new(store, &format!("{name}.embed"), config.patch_len, e, rng)?;
        let pos = store.add(
            format!("{name}.pos"),
            Tensor::from_fn(vec![config.max_patches, e], |_| rng.random_range(-0.02..0.02)),
        )?;
        let mut block = |tag: String| CsaBlock::new(store, &tag, e, heads, hidden, rng);
        let global_steps = (0..LEVELS - 1)
            .map(|k| block(format!("{name}.global{k}")))
            .collect::<TensorResult<Vec<_>>>()?;
        let local_steps = (0..LEVELS - 1)
            .map(|k| block(format!("{name}.local{k}")))
            .collect::<TensorResult<Vec<_>>>()?;
        let global_final = block(format!("{name}.global_self"))?;
        let local_final = block(format!("{name}.local_self"))?;
        let fuse = Linear::new(store, &format!("{name}.fuse"), 2 * e, e, true, rng)?;
        Ok(Self {
            config,
            embed,
            pos,
            global_steps,
            local_steps,
            global_final,
            local_final,
            fuse,
        })
    }

    /// Shallow features with learned patch positions added, `[C*P, E]`.
    pub fn features(&self, g: &mut Graph, s: &ParamStore, ps: &PatchedSignal) -> TensorResult<Var> {
        if ps.patches > self.config.max_patches {
            return Err(TensorError::Contract(format!(
                "{} patches exceed the position table ({})",
                ps.patches, self.config.max_patches
            )));
        }
        let f = self.embed.forward(g, s, ps)?;
        let table = g.param(s, self.pos);
        let ids: Vec<usize> = (0..ps.rows()).map(|r| r % ps.patches).collect();
        let pos = g.gather_rows(table, &ids)?;
        g.add(f, pos)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        hier: &Hierarchy,
        ps: &PatchedSignal,
    ) -> TensorResult<EncoderOutput> {
        if hier.channels != ps.channels {
            return Err(TensorError::Contract(format!(
                "hierarchy has {} channels, signal has {}",
                hier.channels, ps.channels
            )));
        }
        let f = self.features(g, s, ps)?;
        self.forward_features(g, s, hier, f, ps.patches)
    }

    /// Runs both streams and the fusion from shallow features `[C*P, E]`.
    pub fn forward_features(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        hier: &Hierarchy,
        f: Var,
        patches: usize,
    ) -> TensorResult<EncoderOutput> {
        let levels = pool_levels(g, hier, f, patches)?;
        let (global, local, attention) = self.run_dual_stream(g, s, &levels)?;
        let h = self.fuse_streams(
            g,
            s,
            hier,
            patches,
            *global.last().expect("non-empty"),
            *local.last().expect("non-empty"),
            &levels,
        )?;
        Ok(EncoderOutput {
            h,
            levels,
            global,
            local,
            attention,
            channels: hier.channels,
            patches,
        })
    }

    /// Global stream walks coarse to fine, local stream fine to coarse; each
    /// ends with a self-attention step.
    #[allow(clippy::type_complexity)]
    pub fn run_dual_stream(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        levels: &[Var],
    ) -> TensorResult<(Vec<Var>, Vec<Var>, Vec<Tensor>)> {
        if levels.len() != LEVELS {
            return Err(TensorError::Contract(format!(
                "dual stream needs {LEVELS} levels, got {}",
                levels.len()
            )));
        }
        let mut maps = Vec::new();
        let mut global = vec![levels[0]];
        for (k, blk) in self.global_steps.iter().enumerate() {
            let (next, w) = blk.forward(g, s, global[k], levels[k + 1])?;
            global.push(next);
            maps.push(w);
        }
        let last = *global.last().expect("non-empty");
        let (gf, w) = self.global_final.forward(g, s, last, last)?;
        global.push(gf);
        maps.push(w);

        let mut local = vec![levels[LEVELS - 1]];
        for (k, blk) in self.local_steps.iter().enumerate() {
            let (next, w) = blk.forward(g, s, local[k], levels[LEVELS - 2 - k])?;
            local.push(next);
            maps.push(w);
        }
        let last = *local.last().expect("non-empty");
        let (lf, w) = self.local_final.forward(g, s, last, last)?;
        local.push(lf);
        maps.push(w);
        Ok((global, local, maps))
    }

    /// `Linear([broadcast(G), L]) + mean_k broadcast_k(F^{Bk})` over the
    /// three middle levels.
    #[allow(clippy::too_many_arguments)]
    pub fn fuse_streams(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        hier: &Hierarchy,
        patches: usize,
        g_final: Var,
        l_final: Var,
        levels: &[Var],
    ) -> TensorResult<Var> {
        let b0 = g.constant(hier.broadcast_matrix(0, patches));
        let gb = g.matmul(b0, g_final)?;
        let cat = g.concat_cols(&[gb, l_final])?;
        let proj = self.fuse.forward(g, s, cat)?;
        let mid = middle_mean(g, hier, patches, levels)?;
        g.add(proj, mid)
    }
}

/// `F^{B1..B5}` from shallow features; the finest level is `f` itself.
pub fn pool_levels(
    g: &mut Graph,
    hier: &Hierarchy,
    f: Var,
    patches: usize,
) -> TensorResult<Vec<Var>> {
    let rows = g.shape(f)[0];
    if rows != hier.channels * patches {
        return Err(TensorError::Contract(format!(
            "{rows} feature rows for {} channels x {patches} patches",
            hier.channels
        )));
    }
    let mut out = Vec::with_capacity(LEVELS);
    for k in 0..LEVELS - 1 {
        let m = g.constant(hier.pool_matrix(k, patches));
        out.push(g.matmul(m, f)?);
    }
    out.push(f);
    Ok(out)
}

/// Channel-broadcast mean of the three middle levels.
pub fn middle_mean(
    g: &mut Graph,
    hier: &Hierarchy,
    patches: usize,
    levels: &[Var],
) -> TensorResult<Var> {
    let mut acc: Option<Var> = None;
    for (k, &lv) in levels.iter().enumerate().take(LEVELS - 1).skip(1) {
        let b = g.constant(hier.broadcast_matrix(k, patches));
        let v = g.matmul(b, lv)?;
        acc = Some(match acc {
            Some(a) => g.add(a, v)?,
            None => v,
        });
    }
    let sum = acc.expect("three middle levels");
    Ok(g.scale(sum, 1.0 / (LEVELS - 2) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::Montage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_stack_length_for_200() {
        let mut len = 200;
        for &(_, _, k, st, p) in &CONV_STAGES {
            len = conv_out_len(len, k, st, p);
        }
        assert_eq!(len, 25);
    }

    #[test]
    fn zero_patch_zero_biases_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let emb = TemporalEmbedder::new(&mut s, "e", 200, 8, &mut rng).unwrap();
        let ids: Vec<ParamId> = s.ids().collect();
        for id in ids {
            if s.name(id).ends_with(".b") {
                let shape = s.tensor(id).shape().to_vec();
                s.set(id, Tensor::zeros(shape)).unwrap();
            }
        }
        let ps = PatchedSignal {
            channels: 1,
            patches: 1,
            width: 200,
            data: vec![0.0; 200],
        };
        let mut g = Graph::new();
        let f = emb.forward(&mut g, &s, &ps).unwrap();
        assert_eq!(g.shape(f), &[1, 8]);
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_patch_length_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let emb = TemporalEmbedder::new(&mut s, "e", 200, 8, &mut rng).unwrap();
        let ps = PatchedSignal {
            channels: 1,
            patches: 1,
            width: 100,
            data: vec![0.0; 100],
        };
        assert!(emb.forward(&mut Graph::new(), &s, &ps).is_err());
    }

    #[test]
    fn stream_extents_stay_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        let cfg = EncoderConfig {
            patch_len: 32,
            dim: 8,
            heads: 2,
            ffn_mult: 2,
            max_patches: 4,
        };
        let enc = DshaEncoder::new(&mut s, "enc", cfg, &mut rng).unwrap();
        let hier = Hierarchy::build(&Montage::standard_19()).unwrap();
        let ps = PatchedSignal {
            channels: 19,
            patches: 3,
            width: 32,
            data: (0..19 * 3 * 32).map(|i| ((i * 7) % 13) as f64 / 13.0).collect(),
        };
        let mut g = Graph::new();
        let out = enc.forward(&mut g, &s, &hier, &ps).unwrap();
        assert_eq!(g.shape(out.h), &[57, 8]);
        for &v in &out.global {
            assert_eq!(g.shape(v), &[3, 8]);
        }
        for &v in &out.local {
            assert_eq!(g.shape(v), &[57, 8]);
        }
        for m in &out.attention {
            for r in 0..m.shape()[0] {
                let sum: f64 = m.row(r).iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(m.row(r).iter().all(|&w| (0.0..=1.0).contains(&w)));
            }
        }
    }
}
