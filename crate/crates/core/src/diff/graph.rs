use std::collections::BTreeMap;

use super::ops::{self, Op};
use super::tensor::{Scalar, Tensor};
use super::DiffError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    op: Op,
    parents: Vec<NodeId>,
    value: Option<Tensor<T>>,
    /// Declared dims of a marked input.
    input_dims: Option<Vec<usize>>,
    needs_grad: bool,
}

/// Append-only computation tape.
///
/// Nodes are evaluated eagerly when all of their parents hold values, so the
/// common pattern is to build the graph from concrete inputs and call
/// [`Graph::backward`] straight away. Inputs created with
/// [`Graph::placeholder`] defer evaluation until [`Graph::evaluate`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every marked input.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupts the backward rule of the named primitive by a factor of 1.5.
    ///
    /// Only meant for negative-control gradient checks.
    pub fn inject_fault(&mut self, primitive: &str) {
        self.fault = Some(primitive.to_string());
    }

    /// Marked input with a concrete value; gradients are reported for it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        let dims = value.dims().to_vec();
        self.push_leaf(Op::Input, Some(value), Some(dims), true)
    }

    /// Marked input whose value is supplied later through [`Graph::evaluate`].
    pub fn placeholder(&mut self, dims: &[usize]) -> NodeId {
        self.push_leaf(Op::Input, None, Some(dims.to_vec()), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(Op::Constant, Some(value), None, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(T::from_f64_lossy(value)))
    }

    fn push_leaf(
        &mut self,
        op: Op,
        value: Option<Tensor<T>>,
        input_dims: Option<Vec<usize>>,
        needs_grad: bool,
    ) -> NodeId {
        self.nodes.push(Node {
            op,
            parents: Vec::new(),
            value,
            input_dims,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>, DiffError> {
        self.nodes
            .get(id.0)
            .and_then(|n| n.value.as_ref())
            .ok_or(DiffError::NotEvaluated { node: id.0 })
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>) -> Result<NodeId, DiffError> {
        let node = self.nodes.len();
        for p in &parents {
            if p.0 >= node {
                return Err(DiffError::Shape {
                    node,
                    op: op.name(),
                    detail: format!("parent {} does not exist", p.0),
                });
            }
        }
        let value = if parents.iter().all(|p| self.nodes[p.0].value.is_some()) {
            let inputs: Vec<&Tensor<T>> = parents
                .iter()
                .map(|p| self.nodes[p.0].value.as_ref().expect("checked"))
                .collect();
            Some(ops::forward(node, &op, &inputs)?)
        } else {
            None
        };
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            parents,
            value,
            input_dims: None,
            needs_grad,
        });
        Ok(NodeId(node))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Sub, vec![a, b])
    }

    /// Elementwise product; `b` may be a scalar or match a suffix of `a`'s dims.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Div, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId, DiffError> {
        self.push(Op::Scale(s), vec![a])
    }

    pub fn offset(&mut self, a: NodeId, s: f64) -> Result<NodeId, DiffError> {
        self.push(Op::Offset(s), vec![a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::MatMul, vec![a, b])
    }

    /// Stride-1 convolution of a `[H, W, C_in]` map with a
    /// `[kh, kw, C_in, C_out]` kernel and `pad` zero rows/columns per side.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, pad: usize) -> Result<NodeId, DiffError> {
        self.push(Op::Conv2d { pad }, vec![x, kernel])
    }

    pub fn avg_pool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId, DiffError> {
        self.push(Op::AvgPool2d { size }, vec![x])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Relu, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Log, vec![a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Sqrt, vec![a])
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Sin, vec![a])
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Cos, vec![a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Square, vec![a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Mean, vec![a])
    }

    /// Divide each row (last axis) by `max(‖row‖, eps)`.
    pub fn l2_normalize(&mut self, a: NodeId, eps: f64) -> Result<NodeId, DiffError> {
        self.push(Op::L2Normalize { eps }, vec![a])
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::Dot, vec![a, b])
    }

    /// Row-wise cosine similarity along the last axis.
    pub fn cosine_similarity(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::CosineSimilarity { eps: 1e-8 }, vec![a, b])
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId, DiffError> {
        self.push(Op::Clamp { lo, hi }, vec![a])
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId, DiffError> {
        self.push(Op::SoftmaxCrossEntropy { target }, vec![logits])
    }

    /// Bilinear sampling of a `[H, W, C]` image at `[H', W', 2]` centered
    /// `(u, v)` coordinates. Differentiable in both the image and the
    /// coordinates.
    pub fn grid_sample(&mut self, img: NodeId, coords: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::GridSample, vec![img, coords])
    }

    pub fn reshape(&mut self, a: NodeId, dims: &[usize]) -> Result<NodeId, DiffError> {
        self.push(Op::Reshape(dims.to_vec()), vec![a])
    }

    /// Scalar element at flat index `index`.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId, DiffError> {
        self.push(Op::Pick(index), vec![a])
    }

    /// Copy of `a` with the scalar `s` added at flat index `index`.
    pub fn add_at(&mut self, a: NodeId, index: usize, s: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::AddAt(index), vec![a, s])
    }

    /// Interleave two equally shaped tensors along a new trailing axis of 2.
    pub fn stack_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.push(Op::StackLast, vec![a, b])
    }

    /// Re-run the tape with new input values and return `output`'s value.
    ///
    /// Inputs without a binding keep their current value; an input that has
    /// never held a value must be bound.
    pub fn evaluate(&mut self, output: NodeId, bindings: &[(NodeId, Tensor<T>)]) -> Result<&Tensor<T>, DiffError> {
        for (id, value) in bindings {
            let node = self.nodes.get_mut(id.0).ok_or(DiffError::NotAnInput { node: id.0 })?;
            let Some(dims) = node.input_dims.as_ref() else {
                return Err(DiffError::NotAnInput { node: id.0 });
            };
            if dims.as_slice() != value.dims() {
                return Err(DiffError::Shape {
                    node: id.0,
                    op: "input",
                    detail: format!("bound {:?}, declared {:?}", value.dims(), dims),
                });
            }
            node.value = Some(value.clone());
        }
        for idx in 0..self.nodes.len() {
            match self.nodes[idx].op {
                Op::Constant => {}
                Op::Input => {
                    if self.nodes[idx].value.is_none() {
                        return Err(DiffError::MissingBinding { node: idx });
                    }
                }
                _ => {
                    let value = {
                        let node = &self.nodes[idx];
                        let inputs: Vec<&Tensor<T>> = node
                            .parents
                            .iter()
                            .map(|p| self.nodes[p.0].value.as_ref().expect("earlier nodes evaluated"))
                            .collect();
                        ops::forward(idx, &node.op, &inputs)?
                    };
                    self.nodes[idx].value = Some(value);
                }
            }
        }
        self.value(output)
    }

    /// Reverse sweep from the scalar `output`.
    ///
    /// Every marked input receives a gradient tensor; inputs the output does
    /// not depend on get zeros.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<T>, DiffError> {
        let out_node = self
            .nodes
            .get(output.0)
            .ok_or(DiffError::NotEvaluated { node: output.0 })?;
        let out_val = out_node
            .value
            .as_ref()
            .ok_or(DiffError::NotEvaluated { node: output.0 })?;
        if out_val.len() != 1 {
            return Err(DiffError::NonScalarOutput {
                node: output.0,
                dims: out_val.dims().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        if out_node.needs_grad {
            grads[output.0] = Some(Tensor::new(out_val.dims().to_vec(), vec![T::one()])?);
        }
        let mut result = BTreeMap::new();
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input) {
                let g = match grads[idx].take() {
                    Some(g) => g,
                    None => {
                        let dims = node.input_dims.as_ref().expect("inputs declare dims");
                        Tensor::zeros(dims)
                    }
                };
                result.insert(NodeId(idx), g);
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if node.parents.is_empty() {
                continue;
            }
            let inputs: Vec<&Tensor<T>> = node
                .parents
                .iter()
                .map(|p| {
                    self.nodes[p.0]
                        .value
                        .as_ref()
                        .ok_or(DiffError::NotEvaluated { node: p.0 })
                })
                .collect::<Result<_, _>>()?;
            let value = node.value.as_ref().ok_or(DiffError::NotEvaluated { node: idx })?;
            let need: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].needs_grad).collect();
            let mut parent_grads = ops::backward(&node.op, &inputs, value, &g, &need);
            if self.fault.as_deref() == Some(node.op.name()) {
                for pg in parent_grads.iter_mut().flatten() {
                    *pg = pg.map(|v| v * T::from_f64_lossy(1.5));
                }
            }
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // Inputs created after the output cannot influence it.
        for (idx, node) in self.nodes.iter().enumerate().skip(output.0 + 1) {
            if matches!(node.op, Op::Input) {
                let dims = node.input_dims.as_ref().expect("inputs declare dims");
                result.insert(NodeId(idx), Tensor::zeros(dims));
            }
        }
        Ok(Gradients { grads: result })
    }
}
