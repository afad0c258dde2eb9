//! Every differentiable tape operation against central differences
//! (h = 1e-5, relative error < 1e-4, 20 seeded trials each).

use eegtok_core::gradcheck::check_params;
use eegtok_core::{Graph, ParamId, ParamStore, Tensor, TensorResult, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 20;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Body = dyn Fn(&mut Graph, &[Var]) -> TensorResult<Var>;

/// Inputs are drawn from `[lo, hi)`; the scalar loss is `sum(r * op(inputs))`
/// for a random `r`, or the op value itself when it is already a scalar.
fn check(name: &str, inputs: &[(&[usize], f64, f64)], body: &Body) {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = inputs
            .iter()
            .enumerate()
            .map(|(i, (shape, lo, hi))| {
                let t = Tensor::from_fn(shape.to_vec(), |_| rng.random_range(*lo..*hi));
                store.add(format!("in{i}"), t).unwrap()
            })
            .collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
        let out = body(&mut g, &vars).unwrap();
        let shape = g.shape(out).to_vec();
        let r = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let scalar = r.numel() == 1;
        let loss = |g: &mut Graph, s: &ParamStore| -> TensorResult<Var> {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = body(g, &vars)?;
            if scalar {
                return Ok(y);
            }
            let rv = g.constant(r.clone());
            let p = g.mul(y, rv)?;
            Ok(g.sum(p))
        };
        let rep = check_params(&store, loss, usize::MAX, H, &mut rng).unwrap();
        assert!(
            rep.passes(TOL),
            "{name} trial {trial}: {:?}",
            rep.worst()
        );
    }
}

const U: f64 = 1.0;

#[test]
fn elementwise() {
    check("add", &[(&[3, 4], -U, U), (&[3, 4], -U, U)], &|g, v| g.add(v[0], v[1]));
    check("sub", &[(&[3, 4], -U, U), (&[3, 4], -U, U)], &|g, v| g.sub(v[0], v[1]));
    check("mul", &[(&[3, 4], -U, U), (&[3, 4], -U, U)], &|g, v| g.mul(v[0], v[1]));
    check("scale", &[(&[2, 5], -U, U)], &|g, v| Ok(g.scale(v[0], -1.7)));
    check("gelu", &[(&[4, 4], -3.0, 3.0)], &|g, v| Ok(g.gelu(v[0])));
    check("sqrt", &[(&[3, 3], 0.1, 2.0)], &|g, v| Ok(g.sqrt(v[0])));
    check("add_bias", &[(&[3, 4], -U, U), (&[4], -U, U)], &|g, v| g.add_bias(v[0], v[1]));
    check("div_scalar", &[(&[2, 3], -U, U), (&[1], 0.5, 2.0)], &|g, v| g.div_scalar(v[0], v[1]));
}

#[test]
fn reductions_and_losses() {
    check("sum", &[(&[3, 4], -U, U)], &|g, v| Ok(g.sum(v[0])));
    check("mean", &[(&[3, 4], -U, U)], &|g, v| Ok(g.mean(v[0])));
    check("mse", &[(&[3, 4], -U, U), (&[3, 4], -U, U)], &|g, v| g.mse(v[0], v[1]));
    check("cross_entropy", &[(&[5, 6], -2.0, 2.0)], &|g, v| {
        g.cross_entropy(v[0], &[Some(1), None, Some(5), Some(0), None])
    });
}

#[test]
fn linear_algebra() {
    check("matmul", &[(&[3, 4], -U, U), (&[4, 2], -U, U)], &|g, v| g.matmul(v[0], v[1]));
    check("transpose", &[(&[3, 5], -U, U)], &|g, v| g.transpose(v[0]));
    check(
        "conv1d",
        &[(&[2, 2, 11], -U, U), (&[3, 2, 3], -U, U), (&[3], -U, U)],
        &|g, v| g.conv1d(v[0], v[1], Some(v[2]), 2, 1),
    );
}

#[test]
fn normalisation() {
    check("softmax_rows", &[(&[3, 5], -2.0, 2.0)], &|g, v| g.softmax(v[0], 1));
    check("softmax_cols", &[(&[3, 5], -2.0, 2.0)], &|g, v| g.softmax(v[0], 0));
    check("softmax_3d", &[(&[2, 3, 4], -2.0, 2.0)], &|g, v| g.softmax(v[0], 1));
    check(
        "layer_norm",
        &[(&[4, 6], -2.0, 2.0), (&[6], 0.5, 1.5), (&[6], -U, U)],
        &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn reshaping() {
    check("reshape", &[(&[2, 6], -U, U)], &|g, v| g.reshape(v[0], [3, 4]));
    check("concat_cols", &[(&[3, 2], -U, U), (&[3, 4], -U, U)], &|g, v| g.concat_cols(&[v[0], v[1]]));
    check("concat_rows", &[(&[2, 3], -U, U), (&[4, 3], -U, U)], &|g, v| g.concat_rows(&[v[0], v[1]]));
    check("slice_cols", &[(&[3, 6], -U, U)], &|g, v| g.slice_cols(v[0], 2, 3));
    check("slice_rows", &[(&[5, 3], -U, U)], &|g, v| g.slice_rows(v[0], 1, 3));
    check("gather_rows", &[(&[4, 3], -U, U)], &|g, v| g.gather_rows(v[0], &[2, 0, 2, 3]));
}
