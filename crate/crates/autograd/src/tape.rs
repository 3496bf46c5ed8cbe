//! Computation tape and tensor handles.
//!
//! A [`Tape`] is an append-only list of nodes. Every node holds its forward
//! value; nodes produced by a primitive whose inputs require gradients also
//! carry the [`Op`] record needed to run the reverse sweep. Node ids are
//! assigned in creation order, so the tape is topologically sorted by
//! construction and a single reverse scan visits every record once.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{arg_err, AutogradError, Result};
use crate::ops::{backward, Op};

pub type NodeId = usize;

pub(crate) struct Node {
    pub value: Arc<Vec<f64>>,
    pub requires_grad: bool,
    pub retain_grad: bool,
    pub op: Option<Op>,
    pub grad: Option<Vec<f64>>,
    pub consumed: bool,
}

#[derive(Default)]
pub(crate) struct Graph {
    pub nodes: Vec<Node>,
}

/// Single-threaded recording of primitive applications.
#[derive(Clone, Default)]
pub struct Tape {
    pub(crate) graph: Rc<RefCell<Graph>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let g = self.graph.borrow();
        f.debug_struct("Tape")
            .field("nodes", &g.nodes.len())
            .field("records", &g.nodes.iter().filter(|n| n.op.is_some()).count())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of nodes (leaves and results) on the tape.
    pub fn len(&self) -> usize {
        self.graph.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of primitive records that take part in the reverse sweep.
    pub fn num_records(&self) -> usize {
        self.graph
            .borrow()
            .nodes
            .iter()
            .filter(|n| n.op.is_some())
            .count()
    }

    pub fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.graph, &other.graph)
    }

    /// Creates a leaf tensor.
    pub fn leaf(&self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<DiffTensor> {
        self.leaf_shared(shape, Arc::new(values), requires_grad)
    }

    /// Creates a leaf tensor over an existing value buffer without copying it.
    pub fn leaf_shared(
        &self,
        shape: &[usize],
        values: Arc<Vec<f64>>,
        requires_grad: bool,
    ) -> Result<DiffTensor> {
        check_shape("leaf", shape, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AutogradError::NonFinite { op: "leaf" });
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, None))
    }

    pub fn variable(&self, shape: &[usize], values: Vec<f64>) -> Result<DiffTensor> {
        self.leaf(shape, values, true)
    }

    pub fn constant(&self, shape: &[usize], values: Vec<f64>) -> Result<DiffTensor> {
        self.leaf(shape, values, false)
    }

    pub fn scalar(&self, value: f64) -> Result<DiffTensor> {
        self.constant(&[1], vec![value])
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Arc<Vec<f64>>,
        requires_grad: bool,
        op: Option<Op>,
    ) -> DiffTensor {
        let mut g = self.graph.borrow_mut();
        let id = g.nodes.len();
        g.nodes.push(Node {
            value: value.clone(),
            requires_grad,
            retain_grad: false,
            op,
            grad: None,
            consumed: false,
        });
        DiffTensor {
            tape: self.clone(),
            id,
            shape: shape.into(),
            value,
            requires_grad,
        }
    }

    /// Reverse sweep from a scalar `loss`, accumulating into the stored
    /// gradient of every reachable leaf that requires gradients (and every
    /// intermediate marked with [`DiffTensor::retain_grad`]).
    pub fn backprop(&self, loss: &DiffTensor) -> Result<()> {
        if !self.same(&loss.tape) {
            return Err(AutogradError::ForeignTape);
        }
        if loss.numel() != 1 {
            return Err(AutogradError::NotScalar(loss.shape().to_vec()));
        }
        let mut graph = self.graph.borrow_mut();
        if graph.nodes[loss.id].consumed {
            return Err(AutogradError::TapeConsumed(loss.id));
        }
        graph.nodes[loss.id].consumed = true;
        if !loss.requires_grad {
            return Ok(());
        }

        let n = loss.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);
        let mut stored: Vec<(NodeId, Vec<f64>)> = Vec::new();
        {
            let nodes = &graph.nodes;
            for id in (0..n).rev() {
                let Some(g) = grads[id].take() else { continue };
                let node = &nodes[id];
                if let Some(op) = &node.op {
                    for (input, dg) in backward(op, node, nodes, &g) {
                        if !nodes[input].requires_grad {
                            continue;
                        }
                        match &mut grads[input] {
                            Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a += d),
                            slot @ None => *slot = Some(dg),
                        }
                    }
                }
                if node.op.is_none() || node.retain_grad {
                    stored.push((id, g));
                }
            }
        }
        for (id, g) in stored {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutogradError::NonFinite { op: "backprop" });
            }
            let node = &mut graph.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

/// Handle to a node on a [`Tape`].
///
/// The forward value is shared (`Arc`) so it may be read from other threads
/// through [`DiffTensor::value_arc`]; gradients live on the owning tape.
#[derive(Clone)]
pub struct DiffTensor {
    pub(crate) tape: Tape,
    pub(crate) id: NodeId,
    pub(crate) shape: Rc<[usize]>,
    pub(crate) value: Arc<Vec<f64>>,
    pub(crate) requires_grad: bool,
}

impl fmt::Debug for DiffTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffTensor")
            .field("id", &self.id)
            .field("shape", &&*self.shape)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl DiffTensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.value
    }

    pub fn value_arc(&self) -> Arc<Vec<f64>> {
        self.value.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return arg_err("item", format!("tensor has {} elements", self.numel()));
        }
        Ok(self.value[0])
    }

    /// Accumulated gradient; all zeros until a backprop reaches this node.
    pub fn grad(&self) -> Vec<f64> {
        self.tape.graph.borrow().nodes[self.id]
            .grad
            .clone()
            .unwrap_or_else(|| vec![0.0; self.numel()])
    }

    /// Moves the accumulated gradient out of the node, leaving it cleared.
    pub fn take_grad(&self) -> Option<Vec<f64>> {
        self.tape.graph.borrow_mut().nodes[self.id].grad.take()
    }

    /// Whether any backprop has written a gradient into this node.
    pub fn has_grad(&self) -> bool {
        self.tape.graph.borrow().nodes[self.id].grad.is_some()
    }

    pub fn zero_grad(&self) {
        self.tape.graph.borrow_mut().nodes[self.id].grad = None;
    }

    /// Keeps the gradient of an intermediate result after backprop.
    pub fn retain_grad(&self) {
        self.tape.graph.borrow_mut().nodes[self.id].retain_grad = true;
    }

    /// A constant leaf on the same tape sharing this tensor's values.
    pub fn detach(&self) -> DiffTensor {
        self.tape
            .push(self.shape.to_vec(), self.value.clone(), false, None)
    }

    pub fn backprop(&self) -> Result<()> {
        self.tape.backprop(self)
    }
}

pub(crate) fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return arg_err(op, format!("dimensions must be positive, got {shape:?}"));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(AutogradError::ShapeMismatch {
            op,
            detail: format!("shape {shape:?} needs {n} values, got {len}"),
        });
    }
    Ok(())
}
