//! AdamW with decoupled weight decay and a warmup-then-cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub state: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update at learning rate `lr` (schedule already applied). Frozen
    /// parameters are skipped; a trainable parameter without a gradient is
    /// treated as having a zero gradient, so decay still applies.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
        for id in ids {
            let lr_p = lr * store.param(id).lr_scale;
            let n = store.tensor(id).numel();
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let g = grads.get(id);
            let w = store.tensor_mut(id).data_mut();
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i]);
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = st.m[i] / bc1;
                let vh = st.v[i] / bc2;
                w[i] -= lr_p * c.weight_decay * w[i];
                w[i] -= lr_p * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

impl AdamW {
    /// Moments as named tensors, `opt.m.<param>` and `opt.v.<param>`.
    pub fn export_state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.state.len());
        for (&id, st) in &self.state {
            let shape = store.tensor(id).shape().to_vec();
            let name = store.name(id);
            out.push((
                format!("{STATE_M}{name}"),
                Tensor::new(shape.clone(), st.m.clone()).expect("moment extent matches"),
            ));
            out.push((
                format!("{STATE_V}{name}"),
                Tensor::new(shape, st.v.clone()).expect("moment extent matches"),
            ));
        }
        out
    }

    /// Restores moments written by [`export_state`](Self::export_state);
    /// entries for unknown parameters are ignored. Returns how many
    /// parameters were restored.
    pub fn import_state(&mut self, store: &ParamStore, tensors: &[(String, Tensor)], step: u64) -> usize {
        self.step = step;
        self.state.clear();
        let find = |prefix: &str, name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n.strip_prefix(prefix) == Some(name))
                .map(|(_, t)| t.data().to_vec())
        };
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id);
            if let (Some(m), Some(v)) = (find(STATE_M, name), find(STATE_V, name)) {
                if m.len() == store.tensor(id).numel() && v.len() == m.len() {
                    self.state.insert(id, Moments { m, v });
                }
            }
        }
        self.state.len()
    }
}

pub const STATE_M: &str = "opt.m.";
pub const STATE_V: &str = "opt.v.";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Floor as a fraction of the peak learning rate.
    pub min_ratio: f64,
}

impl Schedule {
    pub fn constant() -> Self {
        Self {
            warmup_steps: 0,
            total_steps: 0,
            min_ratio: 1.0,
        }
    }

    /// Multiplier for the peak lr at (0-based) `step`.
    pub fn factor(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return 1.0;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let t = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.min_ratio + (1.0 - self.min_ratio) * cos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::tensor::Tensor;

    fn one_param(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::new(vec![1], vec![v]).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let (mut s, id) = one_param(1.5);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s, &Gradients::default(), 0.1);
        assert_eq!(s.tensor(id).data(), &[1.5]);
    }

    #[test]
    fn decay_is_decoupled() {
        let (mut s, id) = one_param(2.0);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        });
        opt.step(&mut s, &Gradients::default(), 1.0);
        assert!((s.tensor(id).data()[0] - 2.0 * 0.9).abs() < 1e-15);
    }

    #[test]
    fn converges_on_quadratic() {
        let (mut s, id) = one_param(0.0);
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..200 {
            let mut g = Graph::new();
            let x = g.param(&s, id);
            let c = g.constant(Tensor::new(vec![1], vec![3.0]).unwrap());
            let d = g.sub(x, c).unwrap();
            let sq = g.mul(d, d).unwrap();
            let l = g.sum(sq);
            g.backward(l).unwrap();
            opt.step(&mut s, &g.param_grads(), 0.1);
        }
        assert!((s.tensor(id).data()[0] - 3.0).abs() < 0.01);
    }

    #[test]
    fn frozen_params_untouched() {
        let (mut s, id) = one_param(1.0);
        s.configure(id, false, 1.0);
        let mut g = Gradients::default();
        g.insert(id, vec![1.0]);
        AdamW::new(AdamWConfig::default()).step(&mut s, &g, 0.5);
        assert_eq!(s.tensor(id).data(), &[1.0]);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = Schedule {
            warmup_steps: 10,
            total_steps: 110,
            min_ratio: 0.1,
        };
        assert!((s.factor(0) - 0.1).abs() < 1e-12);
        assert!((s.factor(9) - 1.0).abs() < 1e-12);
        assert!((s.factor(10) - 1.0).abs() < 1e-12);
        assert!((s.factor(110) - 0.1).abs() < 1e-12);
        assert!(s.factor(60) < 1.0 && s.factor(60) > 0.1);
    }
}
