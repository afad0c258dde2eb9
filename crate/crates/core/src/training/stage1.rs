//! Stage-1 tokenizer training model: encoder, quantizer, and time and
//! frequency reconstruction heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::loss_dsha;
use crate::autograd::{Graph, Var};
use crate::encoder::{DshaEncoder, EncoderConfig, EncoderOutput};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::signal::{dft_target, PatchedSignal};
use crate::tensor::{Tensor, TensorResult};
use crate::topology::Hierarchy;
use crate::vq::{QuantOut, Quantizer, VqConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub encoder: EncoderConfig,
    pub vq: VqConfig,
}

/// Two-layer GELU head.
#[derive(Clone, Debug)]
pub struct MlpDecoder {
    pub hidden: Linear,
    pub out: Linear,
}

impl MlpDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> TensorResult<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), dim, 2 * dim, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), 2 * dim, out_dim, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> TensorResult<Var> {
        let h = self.hidden.forward(g, s, x)?;
        let h = g.gelu(h);
        self.out.forward(g, s, h)
    }
}

/// One-sided DFT magnitudes scaled by `1/sqrt(W)`, `[C*P, W/2+1]`.
pub fn spectral_rows(ps: &PatchedSignal) -> TensorResult<Tensor> {
    let t = dft_target(ps);
    let k = 1.0 / (ps.width as f64).sqrt();
    Tensor::new(
        vec![ps.rows(), t.bins],
        t.magnitudes.iter().map(|m| m * k).collect(),
    )
}

pub struct Stage1Out {
    pub encoder: EncoderOutput,
    pub quant: QuantOut,
    pub x_hat: Var,
    pub x_fre_hat: Var,
    pub loss: Var,
}

#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub config: Stage1Config,
    pub encoder: DshaEncoder,
    pub quantizer: Quantizer,
    pub time_dec: MlpDecoder,
    pub freq_dec: MlpDecoder,
}

pub const ENCODER_PREFIX: &str = "enc";
pub const QUANTIZER_PREFIX: &str = "vq";

impl Stage1Model {
    pub fn new(store: &mut ParamStore, config: Stage1Config, rng: &mut impl Rng) -> TensorResult<Self> {
        let (e, w) = (config.encoder.dim, config.encoder.patch_len);
        Ok(Self {
            encoder: DshaEncoder::new(store, ENCODER_PREFIX, config.encoder.clone(), rng)?,
            quantizer: Quantizer::new(store, QUANTIZER_PREFIX, e, config.vq.clone(), rng)?,
            time_dec: MlpDecoder::new(store, "dec_time", e, w, rng)?,
            freq_dec: MlpDecoder::new(store, "dec_freq", e, w / 2 + 1, rng)?,
            config,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        hier: &Hierarchy,
        ps: &PatchedSignal,
    ) -> TensorResult<Stage1Out> {
        let encoder = self.encoder.forward(g, s, hier, ps)?;
        let quant = self.quantizer.forward(g, s, encoder.h)?;
        let x_hat = self.time_dec.forward(g, s, quant.up)?;
        let x_fre_hat = self.freq_dec.forward(g, s, quant.up)?;
        let x = g.constant(Tensor::new(vec![ps.rows(), ps.width], ps.data.clone())?);
        let xf = g.constant(spectral_rows(ps)?);
        let loss = loss_dsha(g, x, x_hat, xf, x_fre_hat, quant.h, quant.zq, self.config.vq.beta)?;
        Ok(Stage1Out {
            encoder,
            quant,
            x_hat,
            x_fre_hat,
            loss,
        })
    }

    /// Token indices for one recording, `c*P + p` order.
    pub fn tokenize(&self, s: &ParamStore, hier: &Hierarchy, ps: &PatchedSignal) -> TensorResult<Vec<usize>> {
        let mut g = Graph::new();
        let out = self.encoder.forward(&mut g, s, hier, ps)?;
        self.quantizer.tokenize(s, g.value(out.h))
    }

    /// Decoded rows `up(codebook[tokens])`, `[N, E]`, as the refiner's input.
    pub fn token_rows(&self, s: &ParamStore, tokens: &[usize]) -> TensorResult<Tensor> {
        let mut g = Graph::new();
        let cb = g.constant(s.tensor(self.quantizer.codebook).clone());
        let zq = g.gather_rows(cb, tokens)?;
        let up = self.quantizer.up.forward(&mut g, s, zq)?;
        Ok(g.value(up).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::Montage;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spectral_rows_satisfy_one_sided_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = PatchedSignal {
            channels: 1,
            patches: 1,
            width: 200,
            data: (0..200).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let r = spectral_rows(&ps).unwrap();
        let d = r.data();
        // interior bins stand for two conjugate bins
        let spec: f64 = d[0] * d[0] + d[100] * d[100] + 2.0 * d[1..100].iter().map(|v| v * v).sum::<f64>();
        let time: f64 = ps.data.iter().map(|v| v * v).sum();
        assert!((spec - time).abs() < 1e-9 * time);
    }

    #[test]
    fn forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let m = Stage1Model::new(&mut s, Stage1Config::default(), &mut rng).unwrap();
        let labels: Vec<String> = ["C3", "C4"].iter().map(|l| l.to_string()).collect();
        let hier = Hierarchy::build(&Montage::standard(&labels).unwrap()).unwrap();
        let ps = PatchedSignal {
            channels: 2,
            patches: 2,
            width: 200,
            data: (0..800).map(|i| (i as f64 * 0.1).sin()).collect(),
        };
        let mut g = Graph::new();
        let out = m.forward(&mut g, &s, &hier, &ps).unwrap();
        assert_eq!(g.shape(out.x_hat), &[4, 200]);
        assert_eq!(g.shape(out.x_fre_hat), &[4, 101]);
        assert_eq!(out.quant.tokens, m.tokenize(&s, &hier, &ps).unwrap());
        assert!(g.value(out.loss).item().unwrap().is_finite());
    }
}
