//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with a closure that maps the output gradient to input gradients. Nodes are
//! appended in evaluation order, so a single reverse sweep over the tape is a
//! valid topological order for backpropagation.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward closure may read.
pub struct BackwardArgs<'a, T> {
    pub inputs: Vec<&'a Tensor<T>>,
    pub output: &'a Tensor<T>,
    pub grad: &'a Tensor<T>,
    /// Whether each input needs a gradient; closures may skip work for `false`.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    param: Option<usize>,
    needs_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            param: None,
            needs_grad: false,
        })
    }

    /// Leaf whose gradient is collected (e.g. an input under test).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            param: None,
            needs_grad: true,
        })
    }

    /// Leaf bound to parameter slot `id`; see [`Gradients::param_grads`].
    pub fn param(&mut self, id: usize, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            param: Some(id),
            needs_grad: true,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a differentiable operation. `backward` receives the values of
    /// `inputs` in order and must return one (optional) gradient per input.
    pub fn op(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Node {
            value,
            parents: inputs.iter().map(|v| v.0).collect(),
            backward: needs_grad.then_some(backward),
            param: None,
            needs_grad,
        })
    }

    /// Backpropagates from a scalar (one-element) root with seed gradient 1.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let value = &self.nodes[root.0].value;
        if value.numel() != 1 {
            return Err(TensorError::Shape(format!(
                "backward() needs a scalar root, got {:?}",
                value.shape()
            )));
        }
        self.backward_with(root, Tensor::full(value.shape(), T::one()))
    }

    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.nodes[root.0].value.expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let args = BackwardArgs {
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                grad: &grad,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].needs_grad)
                    .collect(),
            };
            let parent_grads = backward(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (id, i)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients of leaf nodes after a backward sweep. Intermediate gradients are
/// released during the sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per parameter slot `0..n`, summed over every binding of a slot.
    pub fn param_grads(&self, n: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        for &(id, node) in &self.params {
            let Some(g) = self.grads[node].as_ref() else {
                continue;
            };
            if id >= n {
                continue;
            }
            match &mut out[id] {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
        out
    }
}
