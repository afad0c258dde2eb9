//! Cross-module contracts: montage hierarchies on arbitrary electrode
//! subsets, adapter merging, fine-tuning plans and tokenizer determinism.

use eegtok_core::topology::{Hierarchy, Montage};
use eegtok_core::training::{
    cpt_setup, sft_setup, BackboneConfig, HybridSequence, LoraConfig, ToyBackbone,
    SFT_REFINER_LR_SCALE,
};
use eegtok_core::vq::{Quantizer, VqConfig};
use eegtok_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALL_19: [&str; 19] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz", "C4", "T4", "T5", "P3", "Pz",
    "P4", "T6", "O1", "O2",
];

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hierarchy_on_any_subset(mask in 1u32..(1 << 19), seed in any::<u64>()) {
        let labels: Vec<String> = ALL_19
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, l)| l.to_string())
            .collect();
        let hier = Hierarchy::build(&Montage::standard(&labels).unwrap()).unwrap();
        let sizes = hier.sizes();
        prop_assert_eq!(sizes[0], 1);
        prop_assert_eq!(*sizes.last().unwrap(), labels.len());
        prop_assert!(sizes.windows(2).all(|w| w[0] <= w[1]));

        let (p, e) = (2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..labels.len() * p * e).map(|_| rng.random_range(-5.0..5.0)).collect();
        for k in 0..sizes.len() {
            let groups = hier.group_of(k);
            // every channel belongs to exactly one group, and groups nest
            prop_assert_eq!(groups.len(), labels.len());
            if k + 1 < sizes.len() {
                let finer = hier.group_of(k + 1);
                for a in 0..labels.len() {
                    for b in 0..labels.len() {
                        if finer[a] == finer[b] {
                            prop_assert_eq!(groups[a], groups[b]);
                        }
                    }
                }
            }
            let pooled = hier.pool(k, &x, p, e);
            let back = hier.broadcast(k, &pooled, p, e);
            prop_assert!(max_diff(&hier.pool(k, &back, p, e), &pooled) < 1e-12);
            // the matrix form agrees with the direct form on one patch/feature slice
            let m = hier.pool_matrix(k, p);
            prop_assert_eq!(m.shape(), &[sizes[k] * p, labels.len() * p][..]);
        }
    }
}

fn backbone(rng: &mut ChaCha8Rng) -> (ParamStore, ToyBackbone) {
    let mut s = ParamStore::new();
    let cfg = BackboneConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        ffn_mult: 2,
        v_text: 16,
        v_eeg: 8,
        max_len: 32,
    };
    let b = ToyBackbone::new(&mut s, "lm", cfg, rng).unwrap();
    (s, b)
}

fn logits(s: &ParamStore, b: &ToyBackbone, seq: &HybridSequence) -> Vec<f64> {
    let mut g = Graph::new();
    let l = b.forward(&mut g, s, seq, None).unwrap();
    g.value(l).data().to_vec()
}

fn sequence() -> HybridSequence {
    HybridSequence::assemble(&[5, 6, 7], 0, &[0, 4, 2], 16, 8, &[9, 10], &[12]).unwrap()
}

#[test]
fn fresh_adapters_are_identity_and_merge_preserves_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut s, mut b) = backbone(&mut rng);
    let seq = sequence();
    let base = logits(&s, &b, &seq);
    let lora = LoraConfig {
        rank: 2,
        alpha: 4.0,
        ..LoraConfig::default()
    };
    let targets: Vec<&str> = lora.targets.iter().map(String::as_str).collect();
    b.apply_lora(&mut s, lora.rank, lora.alpha, &targets, &mut rng).unwrap();
    assert_eq!(logits(&s, &b, &seq), base, "zero-initialised adapters change the output");

    for id in b.lora_params() {
        let shape = s.tensor(id).shape().to_vec();
        s.set(id, Tensor::from_fn(shape, |_| rng.random_range(-0.5..0.5))).unwrap();
    }
    let adapted = logits(&s, &b, &seq);
    assert!(max_diff(&adapted, &base) > 1e-3);
    b.merge_lora(&mut s).unwrap();
    assert!(b.lora_params().is_empty());
    assert!(max_diff(&logits(&s, &b, &seq), &adapted) < 1e-12);
}

#[test]
fn plans_train_only_their_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut s, mut b) = backbone(&mut rng);
    let refiner = s.add("star.q_lat", Tensor::zeros(vec![2, 8])).unwrap();
    let encoder = s.add("enc.w", Tensor::zeros(vec![2, 2])).unwrap();
    let lora = LoraConfig {
        rank: 2,
        ..LoraConfig::default()
    };

    let cpt = cpt_setup(&mut s, &mut b, &lora, &mut rng).unwrap();
    let labels: Vec<&str> = cpt.groups.iter().map(|g| g.label.as_str()).collect();
    assert_eq!(labels, ["adapter", "vocabulary", "refiner"]);
    assert!(s.is_trainable(refiner) && s.is_trainable(b.embed));
    assert!(!s.is_trainable(encoder));
    let adapters = b.lora_params();
    assert_eq!(adapters.len(), 2 * 6 * 2);
    let trainable = s.ids().filter(|&id| s.is_trainable(id)).count();
    let planned: usize = cpt.groups.iter().map(|g| g.params.len()).sum();
    assert_eq!(trainable, planned);
    assert_eq!(cpt.frozen, s.len() - trainable);

    let sft = sft_setup(&mut s, &mut b, &lora, &mut rng).unwrap();
    assert!(!s.is_trainable(b.embed));
    assert_eq!(s.param(refiner).lr_scale, SFT_REFINER_LR_SCALE);
    // the merged adapter's slots are reused by a fresh, zero-output adapter
    for pair in b.lora_params().chunks(2) {
        assert!(s.is_trainable(pair[0]) && s.is_trainable(pair[1]));
        assert!(s.tensor(pair[1]).data().iter().all(|&v| v == 0.0));
    }

    // re-applying a saved plan reproduces the flags
    let before: Vec<(bool, f64)> = s.ids().map(|id| (s.is_trainable(id), s.param(id).lr_scale)).collect();
    s.freeze_all();
    sft.apply(&mut s).unwrap();
    let after: Vec<(bool, f64)> = s.ids().map(|id| (s.is_trainable(id), s.param(id).lr_scale)).collect();
    assert_eq!(before, after);
}

#[test]
fn tokenizer_is_deterministic_and_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut s = ParamStore::new();
    let cfg = VqConfig {
        codes: 32,
        code_dim: 4,
        ..VqConfig::default()
    };
    let q = Quantizer::new(&mut s, "vq", 8, cfg, &mut rng).unwrap();
    let h = Tensor::from_fn(vec![50, 8], |_| rng.random_range(-1.0..1.0));
    let a = q.tokenize(&s, &h).unwrap();
    assert_eq!(a, q.tokenize(&s, &h).unwrap());
    assert_eq!(a.len(), 50);
    assert!(a.iter().all(|&t| t < 32));

    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let out = q.forward(&mut g, &s, hv).unwrap();
    assert_eq!(out.tokens, a);
    assert_eq!(g.shape(out.up), &[50, 8]);
}
