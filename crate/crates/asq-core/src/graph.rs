//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] is an append-only arena of nodes. Every node owns its forward
//! value; non-leaf nodes also carry a backward closure mapping the upstream
//! gradient to one gradient per parent. Quantizers install their custom
//! straight-through rules through [`Graph::custom`], the same mechanism the
//! built-in ops use.
//!
//! Parents always precede children on the tape, so the graph is acyclic by
//! construction and a single reverse sweep visits nodes in reverse
//! topological order. Gradient accumulation follows that fixed order, which
//! makes backward bitwise deterministic.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Context handed to a backward closure.
pub struct BackwardArgs<'a> {
    /// Gradient of the loss with respect to this node's value.
    pub upstream: &'a Tensor,
    /// Forward values of the node's parents, in declaration order.
    pub parents: &'a [&'a Tensor],
    /// This node's own forward value.
    pub value: &'a Tensor,
    /// Which parents actually need a gradient; closures may skip the rest.
    pub needs: &'a [bool],
}

/// Maps the upstream gradient to one optional gradient per parent.
pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
    retained: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf tensor. Leaves with `requires_grad` retain their
    /// accumulated gradient across [`Graph::backward`] calls.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.values.push(value);
        self.nodes.push(Node {
            parents: Vec::new(),
            backward: None,
            requires_grad,
            needs_grad: requires_grad,
        });
        self.retained.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Insert a node with an explicit backward rule. This is the custom
    /// gradient entry point; all built-in ops funnel through it.
    pub fn custom(&mut self, parents: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.values.push(value);
        self.nodes.push(Node {
            parents: parents.to_vec(),
            backward: if needs_grad { Some(backward) } else { None },
            requires_grad: false,
            needs_grad,
        });
        self.retained.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    /// Retained gradient of a `requires_grad` leaf, if backward has run.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.retained[var.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        for g in self.retained.iter_mut() {
            *g = None;
        }
    }

    /// Reverse sweep from a scalar loss. Accumulates into the retained
    /// gradient of every reachable `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_val = &self.values[loss.0];
        if loss_val.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_val.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if node.requires_grad {
                match &mut self.retained[i] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad.clone()),
                }
            }
            let Some(backward) = &node.backward else { continue };

            let parent_vals: Vec<&Tensor> = node.parents.iter().map(|p| &self.values[p.0]).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].needs_grad).collect();
            let args = BackwardArgs {
                upstream: &grad,
                parents: &parent_vals,
                value: &self.values[i],
                needs: &needs,
            };
            let parent_grads = backward(&args);
            if parent_grads.len() != node.parents.len() {
                return Err(Error::Graph(format!(
                    "backward emitted {} gradients for {} inputs",
                    parent_grads.len(),
                    node.parents.len()
                )));
            }
            for (parent, pg) in node.parents.clone().iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                if pg.shape() != self.values[parent.0].shape() {
                    return Err(Error::Graph(format!(
                        "gradient shape {:?} does not match input shape {:?}",
                        pg.shape(),
                        self.values[parent.0].shape()
                    )));
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(vec![2, 2]), true);
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
    }

    #[test]
    fn custom_node_routes_gradients() {
        // y = 3 * x, loss = y (scalar): dx should be 3.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let tripled = Tensor::scalar(6.0);
        let y = g.custom(
            &[x],
            tripled,
            Box::new(|args| vec![Some(args.upstream.map(|u| 3.0 * u))]),
        );
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn repeated_backward_accumulates_and_zero_resets() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.0), true);
        let y = g.custom(
            &[x],
            Tensor::scalar(1.0),
            Box::new(|args| vec![Some(args.upstream.clone())]),
        );
        g.backward(y).unwrap();
        let first = g.grad(x).unwrap().clone();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data()[0], 2.0 * first.data()[0]);
        g.zero_grads();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), first.data());
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.custom(
            &[c],
            Tensor::scalar(5.0),
            Box::new(|args| vec![Some(args.upstream.clone())]),
        );
        // No differentiable input anywhere: backward is a no-op.
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
    }
}
