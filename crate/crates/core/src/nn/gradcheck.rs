//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Absolute floor below which gradients are compared absolutely rather than
/// relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest elementwise `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`. `build` receives one leaf per input and must
/// return a scalar node; it is re-run for every perturbed evaluation.
pub fn check(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Graph, &[Var]) -> Var,
) -> GradCheck {
    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &leaves);
        g.value(out).item()
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &leaves);
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work);
            work[i].data_mut()[j] = orig;
            num.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        numeric.push(num);
    }

    let mut max_rel_err: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            let denom = x.abs().max(y.abs()).max(REL_ERR_FLOOR);
            max_rel_err = max_rel_err.max((x - y).abs() / denom);
        }
    }
    GradCheck {
        max_rel_err,
        analytic,
        numeric,
    }
}
