//! Reverse-mode gradient tape.
//!
//! A [`Tape`] is created for one forward/backward pass and dropped afterwards.
//! Every op appends a node holding its output value and, when any input
//! needs a gradient, a boxed [`Backward`] closure-object that knows how to
//! push the output gradient back to its inputs. Nodes are appended in
//! topological order, so the backward sweep is a reverse scan.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for one recorded op.
pub trait Backward {
    /// Accumulate input gradients given the gradient of this node's output.
    fn backward(&self, out: &Tensor, grad_out: &[f64], tape: &Tape, grads: &mut Grads<'_>);
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Option<Box<dyn Backward>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: true,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad: false,
            op: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an op output. The backward object is only kept when one of
    /// `inputs` needs a gradient.
    pub fn push<B: Backward + 'static>(&mut self, value: Tensor, inputs: &[Var], op: B) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad {
                Some(Box::new(op))
            } else {
                None
            },
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a value computed without any differentiable dependency.
    pub fn push_constant(&mut self, value: Tensor) -> Var {
        self.constant(value)
    }

    /// Backpropagate from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(Error::shape(
                "Tape::backward",
                format!("loss must have one element, found {n}"),
            ));
        }
        self.backward_with(loss, vec![1.0])
    }

    /// Backpropagate an explicit output gradient `seed` from `out`.
    pub fn backward_with(&self, out: Var, seed: Vec<f64>) -> Result<Gradients> {
        if !self.requires_grad(out) {
            return Err(Error::NoForward(format!(
                "node {} has no differentiable history",
                out.0
            )));
        }
        if seed.len() != self.value(out).len() {
            return Err(Error::shape(
                "Tape::backward_with",
                format!(
                    "seed has {} values, output has {}",
                    seed.len(),
                    self.value(out).len()
                ),
            ));
        }
        let mut grads = Grads {
            tape: self,
            bufs: (0..=out.0).map(|_| None).collect(),
        };
        grads.bufs[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads.bufs[i].take() else {
                continue;
            };
            op.backward(&node.value, &g, self, &mut grads);
        }
        let mut bufs = grads.bufs;
        bufs.resize_with(self.nodes.len(), || None);
        Ok(Gradients { bufs })
    }
}

/// Gradient accumulator handed to [`Backward::backward`].
pub struct Grads<'t> {
    tape: &'t Tape,
    bufs: Vec<Option<Vec<f64>>>,
}

impl Grads<'_> {
    /// Mutable gradient buffer for `v`, allocated on first use. `None` when
    /// `v` does not take gradients.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.tape.requires_grad(v) || v.0 >= self.bufs.len() {
            return None;
        }
        let len = self.tape.value(v).len();
        Some(self.bufs[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    pub fn wants(&self, v: Var) -> bool {
        self.tape.requires_grad(v)
    }

    pub fn accumulate(&mut self, v: Var, g: &[f64]) {
        if let Some(buf) = self.slot(v) {
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }
}

/// Leaf gradients after a backward sweep.
pub struct Gradients {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf. Intermediate nodes are released during the sweep.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.bufs.get(v.0).and_then(|b| b.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.bufs.get_mut(v.0).and_then(|b| b.take())
    }
}
