//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Operators append nodes in execution order, so node ids form a topological
//! order by construction. `backward` sweeps the tape once in reverse,
//! accumulating gradient contributions where a node fans out to several
//! consumers.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

/// Gradient accumulator indexed by node id.
pub struct GradSink<E: Scalar> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Scalar> GradSink<E> {
    /// Adds a contribution to a node's gradient.
    pub fn accumulate(&mut self, id: NodeId, contrib: &[E]) {
        match &mut self.grads[id] {
            Some(g) => {
                debug_assert_eq!(g.len(), contrib.len());
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(contrib.to_vec()),
        }
    }

    /// Like `accumulate`, taking ownership to avoid a copy on first write.
    pub fn accumulate_owned(&mut self, id: NodeId, contrib: Vec<E>) {
        match &mut self.grads[id] {
            Some(g) => {
                debug_assert_eq!(g.len(), contrib.len());
                for (a, b) in g.iter_mut().zip(contrib) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(contrib),
        }
    }
}

type BackFn<E> = Box<dyn Fn(&[E], &mut GradSink<E>)>;

struct Node<E: Scalar> {
    /// None for leaves (watched inputs/parameters).
    backward: Option<BackFn<E>>,
}

/// Ordered record of differentiable operations.
pub struct Tape<E: Scalar = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a differentiable leaf and returns the tracked
    /// handle to use in subsequent operations.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Tensor<E> {
        let id = self.nodes.len();
        self.nodes.push(Node { backward: None });
        t.with_node(id)
    }

    /// Records an operation node. `backward` receives the output gradient and
    /// must push contributions for each tracked input.
    pub fn record(&mut self, backward: impl Fn(&[E], &mut GradSink<E>) + 'static) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            backward: Some(Box::new(backward)),
        });
        id
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every leaf
    /// reachable from the loss.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<GradMap<E>> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let loss_id = loss.node().ok_or_else(|| {
            Error::Contract("backward: loss is not recorded on this tape".into())
        })?;
        let mut sink = GradSink {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
        };
        sink.grads[loss_id] = Some(vec![E::ONE]);
        for id in (0..=loss_id).rev() {
            match &self.nodes[id].backward {
                Some(back) => {
                    // interior node: consume its gradient and propagate
                    if let Some(g) = sink.grads[id].take() {
                        back(&g, &mut sink);
                    }
                }
                None => {} // leaf: keep the accumulated gradient
            }
        }
        Ok(GradMap { grads: sink.grads })
    }
}

/// Gradients of a loss with respect to tape leaves, by node id.
pub struct GradMap<E: Scalar> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Scalar> GradMap<E> {
    /// Gradient with respect to a tracked tensor, shaped like it.
    pub fn wrt(&self, t: &Tensor<E>) -> Option<Tensor<E>> {
        let id = t.node()?;
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::from_vec(t.shape(), g.clone()).expect("gradient shape"))
    }

    pub fn by_node(&self, id: NodeId) -> Option<&[E]> {
        self.grads.get(id)?.as_deref()
    }
}
