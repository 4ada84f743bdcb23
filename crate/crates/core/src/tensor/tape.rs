use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The backward half of a recorded operation.
///
/// `backward` receives the upstream gradient of the op's output and returns
/// one entry per input (in the order of `inputs`). Entries for inputs whose
/// `needs_grad` flag is false may be `None`.
pub trait Backward<T: Float> {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> &[Var];

    fn backward(
        &self,
        tape: &Tape<T>,
        output: &Tensor<T>,
        grad: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, so the
/// node index is already a topological order.
pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Records a leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends the result of an operation together with its backward rule.
    pub fn record(&mut self, value: Tensor<T>, op: Box<dyn Backward<T>>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.requires_grad(*v));
        self.nodes.push(Node {
            value,
            op: Some(op),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient of the last `backward` target with respect to `var`.
    pub fn grad(&self, var: Var) -> Option<Tensor<T>> {
        let data = self.grads.get(var.0)?.as_ref()?.clone();
        Some(Tensor {
            shape: self.nodes[var.0].value.shape().to_vec(),
            data,
        })
    }

    /// Runs reverse accumulation from a scalar `loss`.
    ///
    /// Every node is visited at most once, in reverse creation order. After
    /// the call every `requires_grad` node reachable from `loss` has a
    /// populated gradient (possibly all zeros).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                dim: "loss element count",
                expected: 1,
                found: numel,
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].as_ref() else { continue };
            let inputs = op.inputs();
            let needs: Vec<bool> = inputs.iter().map(|v| self.requires_grad(*v)).collect();
            let input_grads = op.backward(self, &node.value, grad, &needs);
            debug_assert_eq!(input_grads.len(), inputs.len(), "{}", op.name());
            for ((input, g), need) in inputs.iter().zip(input_grads).zip(&needs) {
                let (Some(g), true) = (g, *need) else { continue };
                debug_assert_eq!(g.len(), self.nodes[input.0].value.numel(), "{}", op.name());
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}
