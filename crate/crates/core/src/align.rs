//! Region-word alignment: similarity matrix, symmetric InfoNCE and the
//! weighted total objective.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, Graph, Tensor, Var};

/// Initial inverse temperature of the alignment loss.
pub const INIT_INV_TAU: f64 = 14.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_kg: f64,
    pub lambda_seg_v: f64,
    pub lambda_seg_t: f64,
    pub lambda_hcl: f64,
}

impl LossWeights {
    pub const DEFAULT: LossWeights = LossWeights {
        lambda_kg: 8.0,
        lambda_seg_v: 1.0,
        lambda_seg_t: 1.0,
        lambda_hcl: 0.5,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("lambda_kg", self.lambda_kg),
            ("lambda_seg_v", self.lambda_seg_v),
            ("lambda_seg_t", self.lambda_seg_t),
            ("lambda_hcl", self.lambda_hcl),
        ]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Per-term loss values of one step; `None` marks a term that was not
/// computed (e.g. alignment terms in the image-only baseline).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub kg: Option<f64>,
    pub seg_v: Option<f64>,
    pub seg_t: Option<f64>,
    pub hcl: Option<f64>,
}

impl LossParts {
    pub const NAMES: [&'static str; 4] = ["loss_kg", "loss_seg_v", "loss_seg_t", "loss_hcl"];

    pub fn values(&self) -> [Option<f64>; 4] {
        [self.kg, self.seg_v, self.seg_t, self.hcl]
    }
}

/// Weighted sum of the present terms. A non-finite term is an error naming
/// the term.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, step: u64) -> Result<f64> {
    let ws = [
        weights.lambda_kg,
        weights.lambda_seg_v,
        weights.lambda_seg_t,
        weights.lambda_hcl,
    ];
    let mut total = 0.0;
    for ((name, v), w) in LossParts::NAMES.iter().zip(parts.values()).zip(ws) {
        if let Some(v) = v {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: name.to_string(),
                    step,
                });
            }
            total += w * v;
        }
    }
    Ok(total)
}

/// `S = ev @ et^T` for unit-norm `[B, C]` embeddings.
pub fn similarity_matrix(g: &mut Graph, ev: Var, et: Var) -> Result<Var> {
    let (sv, st) = (g.shape(ev).to_vec(), g.shape(et).to_vec());
    if sv.len() != 2 || sv != st {
        return Err(Error::Shape(format!("embeddings {sv:?} vs {st:?}")));
    }
    let t = g.transpose_last(et);
    Ok(g.matmul(ev, t))
}

/// Symmetric cross-entropy over the rows and columns of a logit matrix
/// `[B, B]` with a row-stochastic target matrix that is its own transpose.
pub fn symmetric_info_nce(g: &mut Graph, logits: Var, targets: Rc<Tensor>) -> Var {
    let b = g.shape(logits)[0];
    let rows = g.log_softmax(logits);
    let rows = g.mul_const(rows, targets.clone());
    let lt = g.transpose_last(logits);
    let cols = g.log_softmax(lt);
    let cols = g.mul_const(cols, targets);
    let both = g.add(rows, cols);
    let s = g.sum(both);
    g.scale(s, -0.5 / b as f64)
}

/// Symmetric cross-entropy over a rectangular logit matrix `[P, K]` whose
/// positives are the `true` entries of `present`. Each row's target spreads
/// uniformly over its positives, and each column's over its own; rows or
/// columns without positives contribute nothing.
pub fn multi_positive_info_nce(g: &mut Graph, logits: Var, present: &[Vec<bool>]) -> Var {
    let s = g.shape(logits).to_vec();
    let (p, k) = (s[0], s[1]);
    assert!(present.len() == p && present.iter().all(|r| r.len() == k), "presence is not {p}x{k}");
    let mut rows = Tensor::zeros(&[p, k]);
    for (i, r) in present.iter().enumerate() {
        let n = r.iter().filter(|&&b| b).count();
        for (j, &b) in r.iter().enumerate() {
            if b {
                rows.data_mut()[i * k + j] = 1.0 / (n as f64 * p as f64);
            }
        }
    }
    let mut cols = Tensor::zeros(&[k, p]);
    for j in 0..k {
        let n = present.iter().filter(|r| r[j]).count();
        for (i, r) in present.iter().enumerate() {
            if r[j] {
                cols.data_mut()[j * p + i] = 1.0 / (n as f64 * k as f64);
            }
        }
    }
    let lr = g.log_softmax(logits);
    let lr = g.mul_const(lr, Rc::new(rows));
    let lt = g.transpose_last(logits);
    let lc = g.log_softmax(lt);
    let lc = g.mul_const(lc, Rc::new(cols));
    let a = g.sum(lr);
    let b = g.sum(lc);
    let both = g.add(a, b);
    g.scale(both, -0.5)
}

pub fn identity_targets(b: usize) -> Rc<Tensor> {
    let mut t = Tensor::zeros(&[b, b]);
    for i in 0..b {
        t.data_mut()[i * b + i] = 1.0;
    }
    Rc::new(t)
}

/// Symmetric InfoNCE over `S / tau` with `tau = exp(log_tau)` and the
/// diagonal as positives.
pub fn hcl_loss(g: &mut Graph, s: Var, log_tau: Var) -> Result<Var> {
    let shape = g.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Shape(format!("similarity matrix {shape:?} is not square")));
    }
    if !g.value(s).is_finite() || !g.value(log_tau).is_finite() {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    let neg = g.neg(log_tau);
    let inv_tau = g.exp(neg);
    let logits = g.mul_scalar(s, inv_tau);
    Ok(symmetric_info_nce(g, logits, identity_targets(shape[0])))
}

/// Plain-float evaluation of the alignment loss, for reporting and tests.
pub fn hcl_loss_value(s: &[Vec<f64>], tau: f64) -> f64 {
    let b = s.len();
    let z: Vec<Vec<f64>> = s.iter().map(|r| r.iter().map(|v| v / tau).collect()).collect();
    let mut total = 0.0;
    for i in 0..b {
        total += log_sum_exp(&z[i]) - z[i][i];
        let col: Vec<f64> = (0..b).map(|k| z[k][i]).collect();
        total += log_sum_exp(&col) - z[i][i];
    }
    total / (2.0 * b as f64)
}
