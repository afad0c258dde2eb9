//! Reconstruction, next-token, continued-pretraining and answer-only losses.

use super::sequence::HybridSequence;
use crate::autograd::{Graph, Var};
use crate::tensor::{Tensor, TensorError, TensorResult};
use crate::vq::quant_loss;

pub const DEFAULT_LAMBDA_ORTH: f64 = 0.1;

/// Time MSE + frequency MSE + quantizer loss, each an element mean.
#[allow(clippy::too_many_arguments)]
pub fn loss_dsha(
    g: &mut Graph,
    x: Var,
    x_hat: Var,
    x_fre: Var,
    x_fre_hat: Var,
    h: Var,
    zq: Var,
    beta: f64,
) -> TensorResult<Var> {
    let t = g.mse(x_hat, x)?;
    let f = g.mse(x_fre_hat, x_fre)?;
    let q = quant_loss(g, h, zq, beta)?;
    let tf = g.add(t, f)?;
    g.add(tf, q)
}

/// Mean NLL over `targets`; a constant zero when no position is targeted.
pub fn masked_nll(g: &mut Graph, logits: Var, targets: &[Option<usize>]) -> TensorResult<Var> {
    if targets.iter().all(Option::is_none) {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    g.cross_entropy(logits, targets)
}

#[derive(Clone, Copy, Debug)]
pub struct NtpLosses {
    pub text: Var,
    pub eeg: Var,
}

/// Text and EEG next-token losses. Summary positions are never targets
/// because their id slots are empty.
pub fn loss_ntp(g: &mut Graph, logits: Var, seq: &HybridSequence) -> TensorResult<NtpLosses> {
    if seq.len() < 2 {
        return Err(TensorError::Contract("sequence needs at least two positions".into()));
    }
    let text = masked_nll(g, logits, &seq.targets_for(&seq.spans.text))?;
    let eeg = masked_nll(g, logits, &seq.targets_for(&seq.spans.eeg))?;
    Ok(NtpLosses { text, eeg })
}

pub fn loss_cpt(g: &mut Graph, ntp: NtpLosses, orth: Var, lambda_orth: f64) -> TensorResult<Var> {
    let s = g.add(ntp.text, ntp.eeg)?;
    let o = g.scale(orth, lambda_orth);
    g.add(s, o)
}

/// Scalar form of [`loss_cpt`], used when checking logged rows.
pub fn cpt_total(text: f64, eeg: f64, orth: f64, lambda_orth: f64) -> f64 {
    text + eeg + lambda_orth * orth
}

pub fn loss_sft(g: &mut Graph, logits: Var, seq: &HybridSequence) -> TensorResult<Var> {
    if seq.spans.answer.is_empty() {
        return Err(TensorError::Contract("answer span is empty".into()));
    }
    g.cross_entropy(logits, &seq.targets_for(&seq.spans.answer))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(t: usize, v: usize) -> (Graph, Var) {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(vec![t, v]).with_requires_grad(true));
        (g, l)
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let seq = HybridSequence::assemble(&[4, 5], 1, &[0, 1, 2], 10, 6, &[], &[]).unwrap();
        let (mut g, l) = uniform(seq.len(), 16);
        let n = loss_ntp(&mut g, l, &seq).unwrap();
        for v in [n.text, n.eeg] {
            assert!((g.value(v).item().unwrap() - 16f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_text_span_is_zero() {
        let seq = HybridSequence::assemble(&[], 0, &[0], 10, 6, &[], &[]).unwrap();
        let (mut g, l) = uniform(seq.len(), 16);
        let n = loss_ntp(&mut g, l, &seq).unwrap();
        assert_eq!(g.value(n.text).item().unwrap(), 0.0);
    }

    #[test]
    fn cpt_arithmetic() {
        assert!((cpt_total(1.0, 2.0, 0.5, 0.1) - 3.05).abs() < 1e-15);
        assert_eq!(cpt_total(1.0, 2.0, 0.5, 0.0), 3.0);
    }

    #[test]
    fn sft_requires_answer() {
        let seq = HybridSequence::assemble(&[4], 0, &[0], 10, 6, &[], &[]).unwrap();
        let (mut g, l) = uniform(seq.len(), 16);
        assert!(loss_sft(&mut g, l, &seq).is_err());
    }

    #[test]
    fn dsha_time_offset() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![2, 3]));
        let xh = g.constant(Tensor::full(vec![2, 3], 1.0));
        let f = g.constant(Tensor::zeros(vec![2, 2]));
        let h = g.constant(Tensor::full(vec![2, 2], 0.5));
        let l = loss_dsha(&mut g, x, xh, f, f, h, h, 0.25).unwrap();
        assert!((g.value(l).item().unwrap() - 1.0).abs() < 1e-15);
    }
}
