//! Central-difference gradient checking.
//!
//! The checker re-runs the caller's forward closure at perturbed inputs, so
//! it is independent of the backward implementations it verifies. Used by the
//! unit tests and the acceptance suite.

use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Compare the analytic gradient of a scalar-valued computation with central
/// finite differences, with respect to `inputs[wrt]`.
///
/// Returns the relative error `max_i |analytic_i - fd_i| / max(max_i |fd_i|, 1e-6)`
/// over the probed coordinates. Tensors larger than 512 elements are probed
/// at 64 deterministically chosen coordinates.
pub fn check_input_gradient(
    inputs: &[Tensor],
    wrt: usize,
    step: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> f64 {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let root = build(&mut g, &vars);
        g.value(root).item()
    };

    // analytic
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &vars);
    let grads = g.backward(root);
    let analytic = grads
        .get(vars[wrt])
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(inputs[wrt].shape()));

    let n = inputs[wrt].len();
    let coords: Vec<usize> = if n <= 512 {
        (0..n).collect()
    } else {
        let mut rng = Rng::new(0x9d5a_b7e1 ^ n as u64);
        (0..64).map(|_| rng.below(n)).collect()
    };

    let mut max_abs_fd: f64 = 0.0;
    let mut max_diff: f64 = 0.0;
    for &c in &coords {
        let mut plus = inputs.to_vec();
        plus[wrt].data_mut()[c] += step;
        let mut minus = inputs.to_vec();
        minus[wrt].data_mut()[c] -= step;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
        max_abs_fd = max_abs_fd.max(fd.abs());
        max_diff = max_diff.max((analytic.data()[c] - fd).abs());
    }
    max_diff / max_abs_fd.max(1e-6)
}
