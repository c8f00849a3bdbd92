//! The recording tape.
//!
//! A [`Graph`] owns every intermediate value of one forward pass. Ops
//! append a node holding the output value plus a one-shot backward
//! closure; [`Graph::backward`] walks the nodes in reverse creation order
//! (a valid reverse topological order, since parents always precede
//! children) and hands each closure the upstream gradient.

use std::collections::{BTreeSet, HashMap};

use crate::error::{NnError, Result};
use crate::params::ParamTree;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a backward closure sees.
pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f64],
    /// Which inputs need a gradient; closures may return `None` for the rest.
    pub needs: Vec<bool>,
}

/// Returns one optional gradient per input, each shaped like that input.
pub type BackwardFn = Box<dyn FnOnce(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<String, usize>,
    param_order: Vec<String>,
    ops_used: BTreeSet<&'static str>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>, rg: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    /// A leaf whose gradient is tracked (used for input-gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, true)
    }

    /// Pulls a named parameter onto the tape. Repeated requests for the same
    /// name return the same node.
    pub fn param(&mut self, tree: &ParamTree, name: &str) -> Result<Var> {
        if let Some(&idx) = self.params.get(name) {
            return Ok(Var(idx));
        }
        let t = tree.tensor(name)?;
        let v = self.leaf(t);
        self.params.insert(name.to_string(), v.0);
        self.param_order.push(name.to_string());
        Ok(v)
    }

    /// Records a custom differentiable op. The backward closure is dropped
    /// when no input requires a gradient.
    pub fn custom(&mut self, op: &'static str, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        self.ops_used.insert(op);
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let parents = inputs.iter().map(|v| v.0).collect();
        if rg {
            self.push(value, parents, Some(backward), true)
        } else {
            self.push(value, parents, None, false)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of every op recorded so far.
    pub fn ops_used(&self) -> &BTreeSet<&'static str> {
        &self.ops_used
    }

    /// Reverse sweep from a scalar root. A second call on the same tape is
    /// an error: the closures are consumed by the first sweep.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(NnError::BackwardTwice);
        }
        let root_shape = self.nodes[root.0].value.shape();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(NnError::NonScalarRoot(root_shape.to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(grad) = self.grads[i].take() else {
                continue;
            };
            let Some(bw) = self.nodes[i].backward.take() else {
                self.grads[i] = Some(grad);
                continue;
            };
            let parents = self.nodes[i].parents.clone();
            let input_grads = {
                let ctx = BackwardCtx {
                    inputs: parents.iter().map(|&p| &self.nodes[p].value).collect(),
                    output: &self.nodes[i].value,
                    grad: &grad,
                    needs: parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
                };
                bw(&ctx)
            };
            debug_assert_eq!(input_grads.len(), parents.len());
            for (&p, g) in parents.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[p].value.numel());
                match &mut self.grads[p] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            self.grads[i] = Some(grad);
        }
        Ok(())
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter pulled onto this tape, in first-use order.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.param_order
            .iter()
            .map(|name| {
                let idx = self.params[name];
                let g = self
                    .grads
                    .get(idx)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![0.0; self.nodes[idx].value.numel()]);
                (name.clone(), g)
            })
            .collect()
    }

    /// Adds this tape's parameter gradients into `tree` (scaled by `weight`).
    pub fn accumulate_param_grads(&self, tree: &mut ParamTree, weight: f64) -> Result<()> {
        for (name, g) in self.param_grads() {
            tree.add_grad(&name, &g, weight)?;
        }
        Ok(())
    }
}
