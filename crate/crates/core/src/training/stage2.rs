//! Backbone plus refiner: the model trained in continued pretraining and
//! instruction tuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{BackboneConfig, ToyBackbone};
use super::losses::{loss_cpt, loss_ntp, loss_sft, NtpLosses, DEFAULT_LAMBDA_ORTH};
use super::sequence::HybridSequence;
use crate::autograd::{Graph, Var};
use crate::params::ParamStore;
use crate::refiner::{orth_loss, Refiner, StarConfig, StarOut};
use crate::tensor::{Tensor, TensorError, TensorResult};

pub const BACKBONE_PREFIX: &str = "lm";
pub const REFINER_PREFIX: &str = "star";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub backbone: BackboneConfig,
    pub star: StarConfig,
    pub lambda_orth: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            star: StarConfig::default(),
            lambda_orth: DEFAULT_LAMBDA_ORTH,
        }
    }
}

/// One training example as seen by the stage-2 model.
#[derive(Clone, Debug)]
pub struct Stage2Input {
    pub seq: HybridSequence,
    /// Profile text embedding, `[L, star.dim]`.
    pub h_text: Tensor,
    /// Decoded token rows, `[C*P, star.kv_dim]`.
    pub z: Tensor,
}

pub struct Stage2Out {
    pub logits: Var,
    pub star: StarOut,
}

/// Scalar losses of one continued-pretraining step.
pub struct CptLosses {
    pub total: Var,
    pub ntp: NtpLosses,
    pub orth: Var,
}

#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub config: Stage2Config,
    pub backbone: ToyBackbone,
    pub refiner: Refiner,
}

impl Stage2Model {
    pub fn new(store: &mut ParamStore, config: Stage2Config, rng: &mut impl Rng) -> TensorResult<Self> {
        if config.star.dim != config.backbone.dim {
            return Err(TensorError::Contract(format!(
                "refiner width {} must equal backbone width {}",
                config.star.dim, config.backbone.dim
            )));
        }
        Ok(Self {
            backbone: ToyBackbone::new(store, BACKBONE_PREFIX, config.backbone.clone(), rng)?,
            refiner: Refiner::new(store, REFINER_PREFIX, config.star.clone(), rng)?,
            config,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: &Stage2Input) -> TensorResult<Stage2Out> {
        if x.seq.spans.sem.len() != self.config.star.experts {
            return Err(TensorError::Contract(format!(
                "summary span holds {} rows, refiner has {} experts",
                x.seq.spans.sem.len(),
                self.config.star.experts
            )));
        }
        let h_text = g.constant(x.h_text.clone());
        let z = g.constant(x.z.clone());
        let star = self.refiner.forward(g, s, h_text, z)?;
        let logits = self.backbone.forward(g, s, &x.seq, Some(star.s_sem))?;
        Ok(Stage2Out { logits, star })
    }

    pub fn cpt_losses(&self, g: &mut Graph, s: &ParamStore, x: &Stage2Input) -> TensorResult<(CptLosses, Stage2Out)> {
        let out = self.forward(g, s, x)?;
        let ntp = loss_ntp(g, out.logits, &x.seq)?;
        let orth = orth_loss(g, out.star.q_lat)?;
        let total = loss_cpt(g, ntp, orth, self.config.lambda_orth)?;
        Ok((CptLosses { total, ntp, orth }, out))
    }

    pub fn sft_loss(&self, g: &mut Graph, s: &ParamStore, x: &Stage2Input) -> TensorResult<(Var, Stage2Out)> {
        let out = self.forward(g, s, x)?;
        let l = loss_sft(g, out.logits, &x.seq)?;
        Ok((l, out))
    }

    /// Index into `candidates` with the highest logit at the position that
    /// predicts the first answer token; lowest index wins ties.
    pub fn predict(&self, s: &ParamStore, x: &Stage2Input, candidates: &[usize]) -> TensorResult<(usize, Vec<f64>)> {
        let at = x
            .seq
            .spans
            .answer
            .start
            .checked_sub(1)
            .ok_or_else(|| TensorError::Contract("answer span must follow the context".into()))?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, s, x)?;
        let row = g.value(out.logits).row(at);
        let scores: Vec<f64> = candidates.iter().map(|&c| row[c]).collect();
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |b, (i, &v)| if v > scores[b] { i } else { b });
        Ok((best, softmax(&scores)))
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
