use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A single forward pass: the tape plus the parameters it reads.
///
/// Parameters enter the tape lazily, once each. In [`Mode::Eval`] they enter
/// as constants, so no gradients are tracked; frozen parameters are always
/// constants.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    dropout: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            vars: vec![None; store.len()],
            mode: Mode::Eval,
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn train(store: &'a ParamStore, dropout: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            g: Graph::new(),
            store,
            vars: vec![None; store.len()],
            mode: Mode::Train,
            dropout,
            rng: Some(rng),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.index()] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.mode == Mode::Train && self.store.is_trainable(id) {
            self.g.leaf(value)
        } else {
            self.g.constant(value)
        };
        self.vars[id.index()] = Some(v);
        v
    }

    /// Returns the tape node of a parameter if this pass has read it.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.vars[id.index()]
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var) -> Var {
        if self.mode == Mode::Eval || self.dropout <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.dropout;
        let rng = self.rng.as_mut().expect("train ctx has an rng");
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.g.mul_const(x, Rc::new(Tensor::new(&shape, mask)))
    }

    /// Backpropagates from `root` and returns the gradient of every trainable
    /// parameter the pass touched, in parameter order.
    pub fn param_grads(&self, root: Var) -> Vec<(ParamId, Tensor)> {
        let mut grads: Gradients = self.g.backward(root);
        self.store
            .ids()
            .filter_map(|id| {
                let v = self.vars[id.index()]?;
                grads.take(v).map(|g| (id, g))
            })
            .collect()
    }
}
