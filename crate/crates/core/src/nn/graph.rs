//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and the
//! recipe for its vector-Jacobian product. `backward` walks the tape once in
//! reverse. Graphs are built fresh for each forward pass and dropped after
//! the gradients have been read out.

use std::rc::Rc;

use super::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a + b` with `b.shape` a suffix of `a.shape`.
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    /// `a + s` / `a * s` with `s` a one-element node.
    AddScalar(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul {
        a: Var,
        b: Var,
        batched: bool,
    },
    TransposeLast(Var),
    SwapAxes12(Var),
    Reshape(Var),
    NarrowLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    Concat0(Vec<Var>),
    Select0 {
        x: Var,
        indices: Vec<usize>,
    },
    Softmax(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    SumLast(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Blend {
        x: Var,
        m: Var,
        p: Var,
    },
    TotalVariation(Var),
    MulConst {
        x: Var,
        c: Rc<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-batch key validity for attention softmax.
#[derive(Clone, Debug)]
pub struct KeyMask {
    /// `[batch * keys]`, true where the key may be attended to.
    pub valid: Rc<[bool]>,
    pub keys: usize,
}

impl KeyMask {
    pub fn new(valid: Vec<bool>, keys: usize) -> Self {
        assert!(keys > 0 && valid.len() % keys == 0);
        Self {
            valid: valid.into(),
            keys,
        }
    }

    pub fn batch(&self) -> usize {
        self.valid.len() / self.keys
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        Tensor::new(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    fn suffix_check(&self, a: Var, b: Var) -> usize {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb,
            "shape {sb:?} is not a suffix of {sa:?}"
        );
        self.value(b).numel()
    }

    pub fn add_suffix(&mut self, a: Var, b: Var) -> Var {
        let n = self.suffix_check(a, b);
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, v) in chunk.iter_mut().zip(bd) {
                *o += v;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddSuffix(a, b), rg)
    }

    pub fn mul_suffix(&mut self, a: Var, b: Var) -> Var {
        let n = self.suffix_check(a, b);
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, v) in chunk.iter_mut().zip(bd) {
                *o *= v;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MulSuffix(a, b), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x + sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::AddScalar(a, s), rg)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x * sv);
        let rg = self.rg(a) || self.rg(s);
        self.push(out, Op::MulScalar(a, s), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `[..., m, k] @ [k, n]` or `[..., m, k] @ [..., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs rank >= 2");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        assert_eq!(k, kb, "matmul inner dims {sa:?} @ {sb:?}");
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let batched = sb.len() > 2;
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if batched {
            assert_eq!(&sb[..sb.len() - 2], lead, "batched matmul leading dims");
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        } else {
            gemm(batch * m, k, n, ad, false, bd, false, &mut out, false);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&out_shape, out), Op::MatMul { a, b, batched }, rg)
    }

    pub fn transpose_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let r = s.len();
        assert!(r >= 2);
        let (m, n) = (s[r - 2], s[r - 1]);
        let mut shape = s.to_vec();
        shape.swap(r - 2, r - 1);
        let out = transpose_batches(t.data(), m, n);
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::TransposeLast(x), rg)
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        assert_eq!(s.len(), 4, "swap_axes12 needs rank 4");
        let out = swap12(t.data(), s[0], s[1], s[2], s[3]);
        let shape = [s[0], s[2], s[1], s[3]];
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::SwapAxes12(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        assert!(start + len <= d, "narrow_last out of range");
        let mut out = Vec::with_capacity(t.rows() * len);
        for row in t.data().chunks(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::NarrowLast { x, start }, rg)
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert_eq!(&s[..s.len() - 1], &lead[..], "concat_last leading dims");
                s[s.len() - 1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&shape, out), Op::ConcatLast(parts.to_vec()), rg)
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut first = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[1..], &tail[..], "concat0 trailing dims");
            first += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![first];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(&shape, out), Op::Concat0(parts.to_vec()), rg)
    }

    /// Gathers slices along the first axis.
    pub fn select0(&mut self, x: Var, indices: &[usize]) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let stride = t.numel() / s[0];
        let mut out = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            assert!(i < s[0], "select0 index {i} out of range {}", s[0]);
            out.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = s.to_vec();
        shape[0] = indices.len();
        let rg = self.rg(x);
        self.push(
            Tensor::new(&shape, out),
            Op::Select0 {
                x,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row, None);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::Softmax(x), rg)
    }

    /// Softmax over the last axis where invalid keys get zero probability.
    /// Rows are grouped by batch: `rows / mask.batch()` consecutive rows share
    /// one key mask.
    pub fn masked_softmax(&mut self, x: Var, mask: &KeyMask) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        assert_eq!(d, mask.keys, "masked_softmax key count");
        let rows = t.rows();
        assert_eq!(rows % mask.batch(), 0, "masked_softmax batch grouping");
        let group = rows / mask.batch();
        let mut out = t.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let b = r / group;
            softmax_in_place(row, Some(&mask.valid[b * d..(b + 1) * d]));
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::MaskedSoftmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::LogSoftmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        assert_eq!(self.value(gamma).numel(), d);
        assert_eq!(self.value(beta).numel(), d);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r);
            for (i, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(&shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()),
            Op::Gelu(x),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Sums the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let out: Vec<f64> = t.data().chunks(d).map(|r| r.iter().sum()).collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::SumLast(x), rg)
    }

    /// Scales each row (last axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut norms = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(&shape, out), Op::L2Normalize { x, norms }, rg)
    }

    /// `x * m + p * (1 - m)` with `m` broadcast over the last axis of `x`.
    pub fn blend(&mut self, x: Var, m: Var, p: Var) -> Var {
        let (tx, tm, tp) = (self.value(x), self.value(m), self.value(p));
        assert_eq!(tx.shape(), tp.shape(), "blend input/prompt shape mismatch");
        let d = tx.last_dim();
        assert_eq!(tm.numel() * d, tx.numel(), "blend mask shape mismatch");
        let mut out = Vec::with_capacity(tx.numel());
        for (i, (xr, pr)) in tx.data().chunks(d).zip(tp.data().chunks(d)).enumerate() {
            let mv = tm.data()[i];
            out.extend(xr.iter().zip(pr).map(|(a, b)| a * mv + b * (1.0 - mv)));
        }
        let shape = tx.shape().to_vec();
        let rg = self.rg(x) || self.rg(m) || self.rg(p);
        self.push(Tensor::new(&shape, out), Op::Blend { x, m, p }, rg)
    }

    /// Mean absolute difference between vertically and horizontally adjacent
    /// elements of the trailing `[H, W]` planes.
    pub fn total_variation(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        assert!(s.len() >= 2);
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = t.numel() / (h * w);
        let count = planes * ((h - 1) * w + h * (w - 1));
        let mut total = 0.0;
        for plane in t.data().chunks(h * w) {
            tv_visit(plane, h, w, |_, _, d| total += d.abs());
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(x);
        self.push(Tensor::scalar(value), Op::TotalVariation(x), rg)
    }

    /// Elementwise product with a constant (e.g. a dropout keep-mask).
    pub fn mul_const(&mut self, x: Var, c: Rc<Tensor>) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape(), c.shape());
        let out = Tensor::new(
            t.shape(),
            t.data().iter().zip(c.data()).map(|(a, b)| a * b).collect(),
        );
        let rg = self.rg(x);
        self.push(out, Op::MulConst { x, c }, rg)
    }

    /// Gradients of the scalar `root` with respect to every node. Entries
    /// are `None` for nodes that do not influence `root` or do not require
    /// gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.shape(root), vec![1.0]));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || elementwise(g, tb, |x, y| x * y));
                self.acc(grads, *b, || elementwise(g, ta, |x, y| x * y));
            }
            Op::AddSuffix(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || {
                    let tb = self.value(*b);
                    let n = tb.numel();
                    let mut out = vec![0.0; n];
                    for chunk in gd.chunks(n) {
                        for (o, v) in out.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    Tensor::new(tb.shape(), out)
                });
            }
            Op::MulSuffix(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = tb.numel();
                self.acc(grads, *a, || {
                    let mut out = g.clone();
                    for chunk in out.data_mut().chunks_mut(n) {
                        for (o, v) in chunk.iter_mut().zip(tb.data()) {
                            *o *= v;
                        }
                    }
                    out
                });
                self.acc(grads, *b, || {
                    let mut out = vec![0.0; n];
                    for (gc, ac) in gd.chunks(n).zip(ta.data().chunks(n)) {
                        for ((o, gv), av) in out.iter_mut().zip(gc).zip(ac) {
                            *o += gv * av;
                        }
                    }
                    Tensor::new(tb.shape(), out)
                });
            }
            Op::AddScalar(a, s) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *s, || {
                    Tensor::new(self.shape(*s), vec![gd.iter().sum()])
                });
            }
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).item();
                self.acc(grads, *a, || g.map(|v| v * sv));
                self.acc(grads, *s, || {
                    let dot = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    Tensor::new(self.shape(*s), vec![dot])
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, || g.map(|v| v * c)),
            Op::Offset(a) => self.acc(grads, *a, || g.clone()),
            Op::MatMul { a, b, batched } => self.backprop_matmul(*a, *b, *batched, g, grads),
            Op::TransposeLast(x) => {
                let r = g.rank();
                let (m, n) = (g.shape()[r - 2], g.shape()[r - 1]);
                self.acc(grads, *x, || {
                    Tensor::new(self.shape(*x), transpose_batches(gd, m, n))
                });
            }
            Op::SwapAxes12(x) => {
                let s = g.shape();
                self.acc(grads, *x, || {
                    Tensor::new(self.shape(*x), swap12(gd, s[0], s[1], s[2], s[3]))
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, || g.clone().reshape(self.shape(*x))),
            Op::NarrowLast { x, start } => {
                let len = g.last_dim();
                self.acc(grads, *x, || {
                    let tx = self.value(*x);
                    let d = tx.last_dim();
                    let mut out = vec![0.0; tx.numel()];
                    for (orow, grow) in out.chunks_mut(d).zip(gd.chunks(len)) {
                        orow[*start..*start + len].copy_from_slice(grow);
                    }
                    Tensor::new(tx.shape(), out)
                });
            }
            Op::ConcatLast(parts) => {
                let total = g.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.acc(grads, p, || {
                        let mut out = Vec::with_capacity(self.value(p).numel());
                        for row in gd.chunks(total) {
                            out.extend_from_slice(&row[offset..offset + w]);
                        }
                        Tensor::new(self.shape(p), out)
                    });
                    offset += w;
                }
            }
            Op::Concat0(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, || {
                        Tensor::new(self.shape(p), gd[offset..offset + n].to_vec())
                    });
                    offset += n;
                }
            }
            Op::Select0 { x, indices } => {
                self.acc(grads, *x, || {
                    let tx = self.value(*x);
                    let stride = tx.numel() / tx.shape()[0];
                    let mut out = vec![0.0; tx.numel()];
                    for (k, &idx) in indices.iter().enumerate() {
                        for j in 0..stride {
                            out[idx * stride + j] += gd[k * stride + j];
                        }
                    }
                    Tensor::new(tx.shape(), out)
                });
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let d = y.last_dim();
                self.acc(grads, *x, || {
                    let mut out = Vec::with_capacity(y.numel());
                    for (yr, gr) in y.data().chunks(d).zip(gd.chunks(d)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        out.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot)));
                    }
                    Tensor::new(y.shape(), out)
                });
            }
            Op::LogSoftmax(x) => {
                let d = y.last_dim();
                self.acc(grads, *x, || {
                    let mut out = Vec::with_capacity(y.numel());
                    for (yr, gr) in y.data().chunks(d).zip(gd.chunks(d)) {
                        let gsum: f64 = gr.iter().sum();
                        out.extend(yr.iter().zip(gr).map(|(yv, gv)| gv - yv.exp() * gsum));
                    }
                    Tensor::new(y.shape(), out)
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = y.last_dim();
                let gam = self.value(*gamma).data();
                self.acc(grads, *x, || {
                    let mut out = Vec::with_capacity(y.numel());
                    for ((gr, hr), r) in gd.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        out.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(a, h)| r * (a - mean_dh - h * mean_dhh)),
                        );
                    }
                    Tensor::new(y.shape(), out)
                });
                self.acc(grads, *gamma, || {
                    let mut out = vec![0.0; d];
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, a), h) in out.iter_mut().zip(gr).zip(hr) {
                            *o += a * h;
                        }
                    }
                    Tensor::new(self.shape(*gamma), out)
                });
                self.acc(grads, *beta, || {
                    let mut out = vec![0.0; d];
                    for gr in gd.chunks(d) {
                        for (o, a) in out.iter_mut().zip(gr) {
                            *o += a;
                        }
                    }
                    Tensor::new(self.shape(*beta), out)
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, || {
                    elementwise(g, tx, |gv, v| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                });
            }
            Op::Sigmoid(x) => self.acc(grads, *x, || elementwise(g, y, |gv, s| gv * s * (1.0 - s))),
            Op::Exp(x) => self.acc(grads, *x, || elementwise(g, y, |gv, e| gv * e)),
            Op::Log(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, || elementwise(g, tx, |gv, v| gv / v));
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, || {
                    elementwise(g, tx, |gv, v| if v > 0.0 { gv } else { 0.0 })
                });
            }
            Op::Abs(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, || elementwise(g, tx, |gv, v| gv * sign(v)));
            }
            Op::Square(x) => {
                let tx = self.value(*x);
                self.acc(grads, *x, || elementwise(g, tx, |gv, v| 2.0 * gv * v));
            }
            Op::SumAll(x) => {
                let gv = g.item();
                self.acc(grads, *x, || Tensor::full(self.shape(*x), gv));
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel() as f64;
                let gv = g.item() / n;
                self.acc(grads, *x, || Tensor::full(self.shape(*x), gv));
            }
            Op::SumLast(x) => {
                let tx = self.value(*x);
                let d = tx.last_dim();
                self.acc(grads, *x, || {
                    let mut out = Vec::with_capacity(tx.numel());
                    for &gv in gd {
                        out.extend(std::iter::repeat(gv).take(d));
                    }
                    Tensor::new(tx.shape(), out)
                });
            }
            Op::L2Normalize { x, norms } => {
                let d = y.last_dim();
                self.acc(grads, *x, || {
                    let mut out = Vec::with_capacity(y.numel());
                    for ((yr, gr), n) in y.data().chunks(d).zip(gd.chunks(d)).zip(norms) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        out.extend(yr.iter().zip(gr).map(|(yv, gv)| (gv - yv * dot) / n));
                    }
                    Tensor::new(y.shape(), out)
                });
            }
            Op::Blend { x, m, p } => {
                let (tx, tm, tp) = (self.value(*x), self.value(*m), self.value(*p));
                let d = tx.last_dim();
                self.acc(grads, *x, || {
                    let mut out = Vec::with_capacity(tx.numel());
                    for (i, gr) in gd.chunks(d).enumerate() {
                        let mv = tm.data()[i];
                        out.extend(gr.iter().map(|gv| gv * mv));
                    }
                    Tensor::new(tx.shape(), out)
                });
                self.acc(grads, *p, || {
                    let mut out = Vec::with_capacity(tp.numel());
                    for (i, gr) in gd.chunks(d).enumerate() {
                        let mv = tm.data()[i];
                        out.extend(gr.iter().map(|gv| gv * (1.0 - mv)));
                    }
                    Tensor::new(tp.shape(), out)
                });
                self.acc(grads, *m, || {
                    let out = gd
                        .chunks(d)
                        .zip(tx.data().chunks(d))
                        .zip(tp.data().chunks(d))
                        .map(|((gr, xr), pr)| {
                            gr.iter().zip(xr).zip(pr).map(|((gv, a), b)| gv * (a - b)).sum()
                        })
                        .collect();
                    Tensor::new(tm.shape(), out)
                });
            }
            Op::TotalVariation(x) => {
                let tx = self.value(*x);
                let s = tx.shape();
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let planes = tx.numel() / (h * w);
                let count = planes * ((h - 1) * w + h * (w - 1));
                if count == 0 {
                    return;
                }
                let scale = g.item() / count as f64;
                self.acc(grads, *x, || {
                    let mut out = vec![0.0; tx.numel()];
                    for (pi, plane) in tx.data().chunks(h * w).enumerate() {
                        let base = pi * h * w;
                        tv_visit(plane, h, w, |from, to, d| {
                            let s = sign(d) * scale;
                            out[base + to] += s;
                            out[base + from] -= s;
                        });
                    }
                    Tensor::new(tx.shape(), out)
                });
            }
            Op::MulConst { x, c } => self.acc(grads, *x, || elementwise(g, c, |a, b| a * b)),
        }
    }

    fn backprop_matmul(
        &self,
        a: Var,
        b: Var,
        batched: bool,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (ta, tb) = (self.value(a), self.value(b));
        let sa = ta.shape();
        let sb = tb.shape();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch = ta.numel() / (m * k);
        let gd = g.data();
        self.acc(grads, a, || {
            let mut out = vec![0.0; ta.numel()];
            if batched {
                for i in 0..batch {
                    gemm(
                        m,
                        n,
                        k,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        &tb.data()[i * k * n..(i + 1) * k * n],
                        true,
                        &mut out[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
            } else {
                gemm(batch * m, n, k, gd, false, tb.data(), true, &mut out, false);
            }
            Tensor::new(sa, out)
        });
        self.acc(grads, b, || {
            let mut out = vec![0.0; tb.numel()];
            if batched {
                for i in 0..batch {
                    gemm(
                        k,
                        m,
                        n,
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        true,
                        &gd[i * m * n..(i + 1) * m * n],
                        false,
                        &mut out[i * k * n..(i + 1) * k * n],
                        false,
                    );
                }
            } else {
                gemm(k, batch * m, n, ta.data(), true, gd, false, &mut out, false);
            }
            Tensor::new(sb, out)
        });
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if !self.rg(v) {
            return;
        }
        let t = make();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn softmax_in_place(row: &mut [f64], valid: Option<&[bool]>) {
    let ok = |i: usize| valid.is_none_or(|v| v[i]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(i, _)| ok(*i))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (i, v) in row.iter_mut().enumerate() {
        *v = if ok(i) { (*v - max).exp() } else { 0.0 };
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
}

fn transpose_batches(data: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

fn swap12(data: &[f64], a: usize, b: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&data[src..src + d]);
            }
        }
    }
    out
}

/// Calls `f(from, to, value[to] - value[from])` for every vertical and
/// horizontal neighbour pair of an `h x w` plane.
fn tv_visit(plane: &[f64], h: usize, w: usize, mut f: impl FnMut(usize, usize, f64)) {
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if r + 1 < h {
                f(i, i + w, plane[i + w] - plane[i]);
            }
            if c + 1 < w {
                f(i, i + 1, plane[i + 1] - plane[i]);
            }
        }
    }
}
