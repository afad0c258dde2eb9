//! Central finite-difference checks against the tape's analytic gradients.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::TensorResult;

/// Floor on the error denominator, so tensors whose gradient is numerically
/// zero are judged on absolute error instead of amplified noise.
pub const REL_FLOOR: f64 = 1e-6;

/// Central differences of a scalar function of a flat vector.
pub fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `max|a-b| / max(max|a|, max|b|, REL_FLOOR)`.
pub fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = a
        .iter()
        .chain(b)
        .map(|v| v.abs())
        .fold(REL_FLOOR, f64::max);
    diff / scale
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        !self.tensors.is_empty() && self.max_rel_error() < tol
    }
}

/// Compares analytic and numeric gradients for every trainable parameter in
/// `store`, sampling up to `coords` coordinates per tensor.
///
/// `build` must construct the scalar loss from scratch on the given graph and
/// read parameters through [`Graph::param`].
pub fn check_params<F>(
    store: &ParamStore,
    build: F,
    coords: usize,
    h: f64,
    rng: &mut impl Rng,
) -> TensorResult<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> TensorResult<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss)?;
    let analytic = g.param_grads();

    let eval = |s: &ParamStore| -> TensorResult<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, s)?;
        g.value(l).item()
    };

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let n = store.tensor(id).numel();
        let picks: Vec<usize> = if n <= coords {
            (0..n).collect()
        } else {
            (0..coords).map(|_| rng.random_range(0..n)).collect()
        };
        let mut a = Vec::with_capacity(picks.len());
        let mut num = Vec::with_capacity(picks.len());
        for &i in &picks {
            a.push(analytic.get(id).map_or(0.0, |g| g[i]));
            let orig = work.tensor(id).data()[i];
            work.tensor_mut(id).data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work.tensor_mut(id).data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work.tensor_mut(id).data_mut()[i] = orig;
            num.push((fp - fm) / (2.0 * h));
        }
        report.tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            coords: picks.len(),
            rel_error: max_rel_error(&a, &num),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn numeric_grad_of_quadratic() {
        let g = numeric_grad(&|x: &[f64]| x[0] * x[0] + 3.0 * x[1], &[2.0, 1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn matmul_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        store
            .add("a", Tensor::from_fn(vec![3, 4], |_| rng.random_range(-1.0..1.0)))
            .unwrap();
        store
            .add("b", Tensor::from_fn(vec![4, 2], |_| rng.random_range(-1.0..1.0)))
            .unwrap();
        let report = check_params(
            &store,
            |g, s| {
                let a = g.param(s, s.id("a").unwrap());
                let b = g.param(s, s.id("b").unwrap());
                let c = g.matmul(a, b)?;
                Ok(g.sum(c))
            },
            64,
            1e-5,
            &mut rng,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }
}
