//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation applied through [`Graph::apply`] is evaluated eagerly and
//! appended to the tape. Node indices are assigned in execution order, so
//! replaying the tape backwards is a valid reverse topological order. A tape
//! supports exactly one backward pass; afterwards it only serves reads.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs available to an operation's backward rule.
pub struct BackwardCtx<'a, R> {
    pub inputs: &'a [&'a Tensor<R>],
    pub output: &'a Tensor<R>,
    /// Gradient of the loss with respect to `output`.
    pub grad: &'a [R],
    /// Which inputs need a gradient; the rule may return `None` for the rest.
    pub needs: &'a [bool],
}

/// A differentiable operation.
///
/// `forward` may stash intermediates on `self` for use in `backward`.
pub trait Op<R: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor<R>]) -> Result<Tensor<R>>;

    /// Returns one entry per input: the gradient with respect to that input,
    /// or `None` when it is not needed or identically zero.
    fn backward(&self, ctx: &BackwardCtx<'_, R>) -> Result<Vec<Option<Vec<R>>>>;
}

struct Node<R: Real> {
    value: Tensor<R>,
    inputs: Vec<Var>,
    op: Option<Box<dyn Op<R>>>,
}

pub struct Graph<R: Real> {
    nodes: Vec<Node<R>>,
    consumed: bool,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward
    /// populates its gradient.
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.nodes.push(Node { value, inputs: Vec::new(), op: None });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut value: Tensor<R>) -> Var {
        value.set_requires_grad(false);
        self.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Gradient of a tracked leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<R>> {
        self.nodes[v.0].value.take_grad()
    }

    /// Moves a value out of the tape, leaving an empty tensor behind.
    pub fn take_value(&mut self, v: Var) -> Tensor<R> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0]))
    }

    /// Evaluates `op` on recorded inputs and records the result.
    ///
    /// The op is kept for backward only if some input is tracked.
    pub fn apply(&mut self, mut op: impl Op<R> + 'static, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::OutOfRange { what: "graph var", index: bad.0, len: self.nodes.len() });
        }
        let mut value = {
            let refs: Vec<&Tensor<R>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&refs)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name().to_string() });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        value.set_requires_grad(tracked);
        let op: Option<Box<dyn Op<R>>> = if tracked { Some(Box::new(op)) } else { None };
        self.nodes.push(Node { value, inputs: inputs.to_vec(), op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar output with seed gradient 1.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        self.backward_with_seed(output, R::one())
    }

    /// Back-propagates from a scalar output with the given seed.
    ///
    /// Populates the gradient of every tracked leaf reachable from `output`,
    /// accumulating across multiple uses, then frees all saved op state.
    pub fn backward_with_seed(&mut self, output: Var, seed: R) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let out_shape = self.nodes[output.0].value.shape().to_vec();
        if self.nodes[output.0].value.numel() != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<R>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(vec![seed]);

        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            let node = &mut self.nodes[idx];
            let Some(op) = node.op.take() else {
                if node.value.requires_grad() {
                    node.value.accumulate_grad(&grad)?;
                }
                continue;
            };
            let inputs = node.inputs.clone();
            let input_grads = {
                let refs: Vec<&Tensor<R>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = refs.iter().map(|t| t.requires_grad()).collect();
                let ctx = BackwardCtx {
                    inputs: &refs,
                    output: &self.nodes[idx].value,
                    grad: &grad,
                    needs: &needs,
                };
                op.backward(&ctx)?
            };
            if input_grads.len() != inputs.len() {
                return Err(Error::shape(
                    op.name(),
                    format!("backward returned {} grads for {} inputs", input_grads.len(), inputs.len()),
                ));
            }
            for (input, g) in inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[input.0].value.requires_grad() {
                    continue;
                }
                if g.len() != self.nodes[input.0].value.numel() {
                    return Err(Error::shape(
                        op.name(),
                        format!("gradient of {} values for input of {}", g.len(), self.nodes[input.0].value.numel()),
                    ));
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        for node in &mut self.nodes {
            node.op = None;
        }
        Ok(())
    }
}
