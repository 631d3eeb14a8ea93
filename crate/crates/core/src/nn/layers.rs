//! Transformer building blocks over [`Ctx`].

use rand::Rng;

use super::ctx::Ctx;
use super::graph::{KeyMask, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.xavier(&format!("{name}.weight"), fan_in, fan_out, rng);
        let bias = bias.then(|| store.add(&format!("{name}.bias"), Tensor::zeros(&[fan_out]), true));
        Self { weight, bias }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let y = ctx.g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.g.add_suffix(y, b)
            }
            None => y,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[dim], 1.0), true),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.g.layer_norm(x, g, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Multi-head self-attention on `[batch, tokens, width]`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(width % heads == 0, "width {width} not divisible by {heads} heads");
        Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), width, 3 * width, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), width, width, true, rng),
            heads,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, mask: Option<&KeyMask>) -> Var {
        let shape = ctx.g.shape(x).to_vec();
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        let (h, d) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(ctx, x);
        let split = |ctx: &mut Ctx, part: usize| {
            let t = ctx.g.narrow_last(qkv, part * c, c);
            let t = ctx.g.reshape(t, &[b, n, h, d]);
            ctx.g.swap_axes12(t)
        };
        let q = split(ctx, 0);
        let k = split(ctx, 1);
        let v = split(ctx, 2);
        let kt = ctx.g.transpose_last(k);
        let scores = ctx.g.matmul(q, kt);
        let scores = ctx.g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = match mask {
            Some(m) => ctx.g.masked_softmax(scores, m),
            None => ctx.g.softmax(scores),
        };
        let out = ctx.g.matmul(attn, v);
        let out = ctx.g.swap_axes12(out);
        let out = ctx.g.reshape(out, &[b, n, c]);
        self.proj.forward(ctx, out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.qkv.params();
        p.extend(self.proj.params());
        p
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: Attention::new(store, &format!("{name}.attn"), width, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, &format!("{name}.fc1"), width, width * mlp_ratio, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), width * mlp_ratio, width, true, rng),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, mask: Option<&KeyMask>) -> Var {
        let h = self.ln1.forward(ctx, x);
        let h = self.attn.forward(ctx, h, mask);
        let h = ctx.dropout(h);
        let x = ctx.g.add(x, h);
        let h = self.ln2.forward(ctx, x);
        let h = self.fc1.forward(ctx, h);
        let h = ctx.g.gelu(h);
        let h = self.fc2.forward(ctx, h);
        let h = ctx.dropout(h);
        ctx.g.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.ln1.params();
        p.extend(self.attn.params());
        p.extend(self.ln2.params());
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }
}
