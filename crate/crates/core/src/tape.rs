//! Reverse-mode tape.
//!
//! Operations record a backward rule only when at least one input is tracked
//! on this tape. A tape is consumed by [`Tape::backward`].

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, SegError};
use crate::tensor::{Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

/// Receives the output gradient and a per-input "needs gradient" mask and
/// returns one gradient buffer per input (`None` where not needed).
pub(crate) type BackwardFn =
    Box<dyn FnOnce(&Tensor, &[bool]) -> Vec<Option<Vec<f64>>> + Send + 'static>;

struct Node {
    op: &'static str,
    shape: Shape,
    inputs: Vec<Option<usize>>,
    input_shapes: Vec<Shape>,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("id", &self.id)
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` as a gradient-tracked leaf and returns the tracked handle.
    pub fn watch(&mut self, t: &Tensor) -> Tensor {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: "leaf",
            shape: t.shape(),
            inputs: Vec::new(),
            input_shapes: Vec::new(),
            backward: None,
        });
        t.detach().with_node(NodeId {
            tape: self.id,
            index,
        })
    }

    /// Smallest distance to a non-differentiable point (relu zero, max-pool
    /// tie) seen by any operation run against this tape.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    pub(crate) fn note_kink(&mut self, margin: f64) {
        if margin < self.kink_margin {
            self.kink_margin = margin;
        }
    }

    fn local_index(&self, t: &Tensor) -> Result<Option<usize>> {
        match t.node() {
            None => Ok(None),
            Some(id) if id.tape == self.id && id.index < self.nodes.len() => Ok(Some(id.index)),
            Some(_) => Err(SegError::NotOnTape),
        }
    }

    /// Attaches `value` to the tape as the output of `op` if any input is
    /// tracked; otherwise returns it untracked and drops `backward`.
    pub(crate) fn record<F>(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: &[&Tensor],
        backward: F,
    ) -> Result<Tensor>
    where
        F: FnOnce(&Tensor, &[bool]) -> Vec<Option<Vec<f64>>> + Send + 'static,
    {
        let mut indices = Vec::with_capacity(inputs.len());
        for t in inputs {
            indices.push(self.local_index(t)?);
        }
        if indices.iter().all(Option::is_none) {
            return Ok(value.detach());
        }
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: value.shape(),
            inputs: indices,
            input_shapes: inputs.iter().map(|t| t.shape()).collect(),
            backward: Some(Box::new(backward)),
        });
        Ok(value.detach().with_node(NodeId {
            tape: self.id,
            index,
        }))
    }

    /// Propagates d(loss)/d(node) back to every watched leaf.
    pub fn backward(mut self, loss: &Tensor) -> Result<Gradients> {
        if loss.shape() != Shape::scalar() {
            return Err(SegError::NonScalarLoss(loss.shape()));
        }
        let root = self.local_index(loss)?.ok_or(SegError::NotOnTape)?;

        let mut pending: Vec<Option<Vec<f64>>> = Vec::new();
        pending.resize_with(root + 1, || None);
        pending[root] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for i in (0..=root).rev() {
            let Some(grad) = pending[i].take() else {
                continue;
            };
            let node = &mut self.nodes[i];
            let grad = Tensor::from_parts(node.shape, grad);
            let Some(rule) = node.backward.take() else {
                leaves.insert(i, grad);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = rule(&grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
            for ((slot, g), shape) in node
                .inputs
                .iter()
                .zip(input_grads)
                .zip(node.input_shapes.iter())
            {
                let (Some(j), Some(g)) = (slot, g) else {
                    continue;
                };
                debug_assert_eq!(g.len(), shape.numel(), "op {}", node.op);
                match &mut pending[*j] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    empty => *empty = Some(g),
                }
            }
        }

        let leaf_shapes = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.is_empty())
            .map(|(i, n)| (i, n.shape))
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: leaves,
            leaf_shapes,
        })
    }
}

/// Gradients of a scalar loss with respect to the watched leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: HashMap<usize, Tensor>,
    leaf_shapes: HashMap<usize, Shape>,
}

impl Gradients {
    /// Gradient for a watched leaf. Leaves the loss does not depend on get
    /// zeros; tensors that are not leaves of the same tape get `None`.
    pub fn get(&self, t: &Tensor) -> Option<Tensor> {
        let id = t.node()?;
        if id.tape != self.tape {
            return None;
        }
        if let Some(g) = self.grads.get(&id.index) {
            return Some(g.clone());
        }
        self.leaf_shapes.get(&id.index).map(|&s| Tensor::zeros(s))
    }
}
