//! Central finite-difference verification of analytic gradients.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::{math, Tensor};

/// Step used by the gradient suites.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of a gradient comparison over the checked coordinates.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)`.
    pub rel_error: f64,
}

/// Normwise relative error; 0 when both vectors vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| math::sqrt(v.map(|x| x * x).sum());
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = f64::max(norm(&mut a.iter().copied()), norm(&mut b.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Checks the gradient of `build` with respect to every input.
///
/// `build` maps leaf variables to an output; non-scalar outputs are reduced
/// with fixed random weights so every output element contributes. At most
/// `max_coords` coordinates per input are perturbed (evenly strided).
pub fn check_gradient<F>(inputs: &[Tensor], build: F, eps: f64, max_coords: usize) -> GradCheck
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |tensors: &[Tensor], with_grad: bool| {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| {
                if with_grad {
                    g.variable(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let out = build(&mut g, &vars);
        let n = g.value(out).numel();
        let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = g.constant(Tensor::from_parts(g.shape(out), weights));
        let prod = g.mul(out, w);
        let loss = g.sum(prod);
        (g, vars, loss)
    };

    let (g, vars, loss) = eval(inputs, true);
    let grads = g.backward(loss);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let full = grads
            .get(vars[k])
            .map(|g| g.to_vec())
            .unwrap_or_else(|| alloc::vec![0.0; input.numel()]);
        let n = input.numel();
        let stride = n.div_ceil(max_coords.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + eps;
            let (g1, _, l1) = eval(&work, false);
            let plus = g1.value(l1).data()[0];
            work[k].data_mut()[i] = orig - eps;
            let (g2, _, l2) = eval(&work, false);
            let minus = g2.value(l2).data()[0];
            work[k].data_mut()[i] = orig;
            analytic.push(full[i]);
            numeric.push((plus - minus) / (2.0 * eps));
        }
    }
    let rel_error = relative_error(&analytic, &numeric);
    GradCheck {
        analytic,
        numeric,
        rel_error,
    }
}

/// Central differences of a scalar function of a flat vector.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + eps;
            let plus = f(&work);
            work[i] = x[i] - eps;
            let minus = f(&work);
            work[i] = x[i];
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}
