#![allow(dead_code)]

pub mod gradcases;
pub mod toy;

use nmt_ablation::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Absolute floor so entries with a near-zero true gradient do not fail on
/// finite-difference rounding noise alone.
pub const ABS_FLOOR: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], r: &mut impl Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-scale..scale)).with_requires_grad(true)
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL_TOL * analytic.abs().max(numeric.abs()) + ABS_FLOOR
}

/// Builds the op under test on fresh leaves and reduces its output to the
/// scalar `sum(out * w)` with fixed random weights `w`.
fn scalar_loss<F>(inputs: &[Tensor], weights_seed: u64, build: &F) -> (f64, Vec<Vec<f64>>)
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let n = g.value(out).len();
    let loss = if n == 1 {
        out
    } else {
        let mut r = rng(weights_seed);
        let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let w = g.constant(g.shape(out).to_vec().as_slice(), w).unwrap();
        let p = g.mul(out, w).unwrap();
        g.sum(p)
    };
    let value = g.value(loss)[0];
    let grads = g.backward(loss).unwrap();
    let per_input = vars
        .iter()
        .map(|&v| grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();
    (value, per_input)
}

/// Central finite-difference check of every input entry.
pub fn check<F>(name: &str, inputs: Vec<Tensor>, weights_seed: u64, build: F)
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Var,
{
    let (_, analytic) = scalar_loss(&inputs, weights_seed, &build);
    for (i, t) in inputs.iter().enumerate() {
        if !t.requires_grad() {
            continue;
        }
        for j in 0..t.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let fp = scalar_loss(&plus, weights_seed, &build).0;
            let fm = scalar_loss(&minus, weights_seed, &build).0;
            let numeric = (fp - fm) / (2.0 * STEP);
            let a = analytic[i][j];
            assert!(
                close(a, numeric),
                "{name}: input {i} entry {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}
