use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use super::{compute, NodeRef, Op, Tensor};
use crate::error::{Error, Result};

/// A recorded value: its node id (if it was a node) plus a snapshot of its data.
#[derive(Clone)]
pub(crate) struct Saved {
    pub id: Option<usize>,
    pub shape: Vec<usize>,
    pub data: Rc<Vec<f64>>,
}

impl Saved {
    fn of(t: &Tensor) -> Self {
        Saved { id: t.node_id(), shape: t.shape().to_vec(), data: t.data_rc().clone() }
    }
}

#[derive(Clone)]
pub(crate) struct Node {
    pub op: Op,
    pub aux: Option<Rc<Vec<usize>>>,
    pub inputs: Vec<Saved>,
    pub output: Saved,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    fault: Option<String>,
}

/// Append-only record of primitive operations.
///
/// Cloning a `Tape` clones the handle; one tape is confined to one thread.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Registers `value` as a differentiable leaf.
    pub fn leaf(&self, value: &Tensor) -> Tensor {
        let detached = value.detach();
        self.record(Op::Leaf, None, &[], detached)
    }

    pub(crate) fn record(&self, op: Op, aux: Option<Rc<Vec<usize>>>, inputs: &[&Tensor], out: Tensor) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        let inputs = inputs.iter().map(|t| Saved::of(t)).collect();
        let mut output = Saved::of(&out);
        output.id = Some(id);
        inner.nodes.push(Node { op, aux, inputs, output });
        Tensor { node: Some(NodeRef { tape: self.clone(), id }), ..out }
    }

    pub(crate) fn node(&self, id: usize) -> Node {
        self.inner.borrow().nodes[id].clone()
    }

    pub(crate) fn input_ids(&self, id: usize) -> Vec<Option<usize>> {
        self.inner.borrow().nodes[id].inputs.iter().map(|s| s.id).collect()
    }

    pub(crate) fn fault(&self) -> Option<String> {
        self.inner.borrow().fault.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Test hook: every backward rule of the named op has its emitted
    /// gradient scaled by 1.5. Used to prove the gradcheck gate fires.
    pub fn inject_fault(&self, op_name: &str) {
        self.inner.borrow_mut().fault = Some(op_name.to_string());
    }

    /// Recomputes every non-leaf node from its saved inputs and checks that
    /// the stored output is reproduced bit for bit.
    pub fn replay(&self) -> Result<()> {
        let inner = self.inner.borrow();
        for (i, node) in inner.nodes.iter().enumerate() {
            if node.op == Op::Leaf {
                continue;
            }
            for s in &node.inputs {
                if s.id.is_some_and(|p| p >= i) {
                    return Err(Error::Backward(format!("node {i} references a later node")));
                }
            }
            let raw: Vec<(&[usize], &[f64])> =
                node.inputs.iter().map(|s| (s.shape.as_slice(), s.data.as_slice())).collect();
            let again = compute(&node.op, &raw)?;
            let same = again.shape == node.output.shape
                && again.data.len() == node.output.data.len()
                && again.data.iter().zip(node.output.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::Backward(format!("replay of node {i} ({}) diverged", node.op.name())));
            }
        }
        Ok(())
    }

    /// Hash over op names, shapes and output bits of every node.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.inner.borrow().nodes {
            node.op.name().hash(&mut h);
            node.output.shape.hash(&mut h);
            for v in node.output.data.iter() {
                v.to_bits().hash(&mut h);
            }
            for s in &node.inputs {
                s.id.hash(&mut h);
            }
        }
        h.finish()
    }
}
