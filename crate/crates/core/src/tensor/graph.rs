use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A recorded operation. Implementors own whatever forward state their
/// backward rule needs.
pub trait Op<F: Real> {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> Vec<Var>;

    /// Vector-Jacobian product. Returns one entry per input, in the order of
    /// [`Op::inputs`]; `None` means "no gradient" (either not needed or
    /// identically zero).
    fn backward(&self, ctx: &BackwardCtx<'_, F>, out_grad: &[F]) -> Vec<Option<Vec<F>>>;
}

pub struct BackwardCtx<'a, F: Real> {
    graph: &'a Graph<F>,
    output: Var,
    needs: Vec<bool>,
}

impl<'a, F: Real> BackwardCtx<'a, F> {
    pub fn value(&self, v: Var) -> &'a Tensor<F> {
        &self.graph.nodes[v.0].value
    }

    pub fn output(&self) -> &'a Tensor<F> {
        &self.graph.nodes[self.output.0].value
    }

    /// Whether input `i` (position in [`Op::inputs`]) wants a gradient.
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Option<Box<dyn Op<F>>>,
    requires_grad: bool,
}

/// Append-only tape. Nodes are created in topological order by
/// construction, so the reverse pass is a single backwards sweep.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an already-computed forward value produced by `op`.
    pub fn record(&mut self, value: Tensor<F>, op: Box<dyn Op<F>>) -> Var {
        let requires_grad = op
            .inputs()
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { Some(op) } else { None };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`. Every trainable leaf receives a
    /// gradient; leaves the loss does not depend on get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else {
                continue;
            };
            let Some(out_grad) = grads[idx].take() else {
                continue;
            };
            let inputs = op.inputs();
            let needs: Vec<bool> = inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let ctx = BackwardCtx {
                graph: self,
                output: Var(idx),
                needs,
            };
            let input_grads = op.backward(&ctx, &out_grad);
            debug_assert_eq!(input_grads.len(), inputs.len(), "{}", op.name());
            for (v, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[v.0].value.len(), "{}", op.name());
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.op.is_some() {
                grads[idx] = None;
            } else if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(vec![F::zero(); node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of trainable leaves after one backward sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
