use std::collections::BTreeMap;

use super::ops::{self, Primitive};
use super::{NumError, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Origin {
    /// Input value; `trainable` marks parameters that receive gradients.
    Leaf { trainable: bool },
    /// Produced by a primitive while recording was enabled.
    Applied { prim: Primitive, operands: Vec<NodeId> },
    /// Produced while recording was disabled; no history is kept.
    Detached,
}

#[derive(Clone, Debug)]
struct Node {
    origin: Origin,
    value: Tensor,
}

/// Computation record for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every operand precedes the
/// node that consumes it. A graph belongs to one training thread.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Turns history recording on or off. Values produced while off are
    /// constants as far as [`Graph::backward`] is concerned.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Origin::Leaf { trainable: true }, value)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Origin::Leaf { trainable: false }, value)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> NodeId {
        self.push(Origin::Leaf { trainable }, value)
    }

    fn push(&mut self, origin: Origin, value: Tensor) -> NodeId {
        self.nodes.push(Node { origin, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].origin, Origin::Leaf { trainable: true })
    }

    /// Trainable leaves in creation order.
    pub fn params(&self) -> Vec<NodeId> {
        (0..self.nodes.len())
            .map(NodeId)
            .filter(|&id| self.is_trainable(id))
            .collect()
    }

    fn check(&self, id: NodeId) -> Result<(), NumError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(NumError::UnknownNode(id.0))
        }
    }

    /// Applies `kind` to `operands` and appends the result.
    pub fn apply(&mut self, kind: Primitive, operands: &[NodeId]) -> Result<NodeId, NumError> {
        for &id in operands {
            self.check(id)?;
        }
        let value = {
            let inputs: Vec<&Tensor> = operands.iter().map(|&id| self.value(id)).collect();
            ops::forward(&kind, &inputs)?
        };
        let origin = if self.recording {
            Origin::Applied {
                prim: kind,
                operands: operands.to_vec(),
            }
        } else {
            Origin::Detached
        };
        Ok(self.push(origin, value))
    }

    pub fn matmul(&mut self, a: NodeId, w: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::MatMul, &[a, w])
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::Affine, &[x, w, b])
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::MatMulNT, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, NumError> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn scale_by(&mut self, s: NodeId, a: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::ScaleBy, &[s, a])
    }

    pub fn scale_rows(&mut self, a: NodeId, w: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::ScaleRows, &[a, w])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::Square, &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn conv1d(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::Conv1d, &[x, k, b])
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, NumError> {
        self.apply(Primitive::SumAxis(axis), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn class_expand(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::ClassExpand, &[x, w, b])
    }

    pub fn pairwise_diff(&mut self, a: NodeId, c: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::PairwiseDiff, &[a, c])
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, NumError> {
        self.apply(Primitive::SliceRows { start, len }, &[a])
    }

    pub fn bce(&mut self, probs: NodeId, targets: NodeId) -> Result<NodeId, NumError> {
        self.apply(Primitive::Bce, &[probs, targets])
    }

    /// Gradients of the scalar at `loss` with respect to every trainable leaf.
    ///
    /// Leaves the loss does not depend on get zero tensors. The graph itself is
    /// not modified.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumError> {
        self.check(loss)?;
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(NumError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(Tensor::ones(loss_value.shape()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = adjoints[idx].take() else {
                continue;
            };
            match &self.nodes[idx].origin {
                Origin::Applied { prim, operands } => {
                    let inputs: Vec<&Tensor> = operands.iter().map(|&id| self.value(id)).collect();
                    let grads = ops::backward(prim, &inputs, &self.nodes[idx].value, &g);
                    for (&op, grad) in operands.iter().zip(grads) {
                        match &mut adjoints[op.0] {
                            Some(acc) => acc.add_assign(&grad),
                            slot @ None => *slot = Some(grad),
                        }
                    }
                }
                Origin::Leaf { trainable: true } => adjoints[idx] = Some(g),
                _ => {}
            }
        }
        let grads = self
            .params()
            .into_iter()
            .map(|id| {
                let g = adjoints
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(self.value(id).shape()));
                (id, g)
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Re-evaluates every recorded primitive, optionally substituting new leaf values.
    ///
    /// With no substitutions the replayed values equal the recorded ones bit for bit.
    pub fn replay(&self, leaf_values: &[(NodeId, Tensor)]) -> Result<Graph, NumError> {
        let mut out = Graph {
            nodes: Vec::with_capacity(self.nodes.len()),
            recording: self.recording,
        };
        for node in &self.nodes {
            let value = match &node.origin {
                Origin::Leaf { .. } | Origin::Detached => {
                    let idx = out.nodes.len();
                    match leaf_values.iter().find(|(id, _)| id.0 == idx) {
                        Some((_, v)) if v.shape() == node.value.shape() => v.clone(),
                        Some((_, v)) => {
                            return Err(NumError::ShapeMismatch {
                                op: "replay",
                                left: node.value.shape().to_vec(),
                                right: v.shape().to_vec(),
                            })
                        }
                        None => node.value.clone(),
                    }
                }
                Origin::Applied { prim, operands } => {
                    let inputs: Vec<&Tensor> = operands.iter().map(|&id| out.value(id)).collect();
                    ops::forward(prim, &inputs)?
                }
            };
            out.nodes.push(Node {
                origin: node.origin.clone(),
                value,
            });
        }
        Ok(out)
    }
}

/// Gradient per trainable leaf, keyed by node.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(&id, g)| (id, g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
