use super::ops;
use super::{NnError, ParamStore, Shape, Tensor};

/// Handle to a value recorded in a [`ComputeGraph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    MaxPool {
        input: NodeId,
        indices: Vec<usize>,
    },
    GlobalAvgPool(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Concat(Vec<NodeId>),
    SoftmaxCrossEntropy {
        logits: NodeId,
        grad: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of forward operations with the activations needed for one backward pass.
#[derive(Debug, Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Records the current value of parameter `index`; gradients flowing into
    /// this node are accumulated onto that parameter by [`Self::backward`].
    pub fn param(&mut self, params: &ParamStore, index: usize) -> NodeId {
        self.push(params.get(index).value.clone(), Op::Param(index))
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId, NnError> {
        let out = ops::conv2d(self.value(input), self.value(weight), self.value(bias).data(), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = ops::relu(self.value(input));
        self.push(out, Op::Relu(input))
    }

    pub fn maxpool2d(&mut self, input: NodeId) -> Result<NodeId, NnError> {
        let (out, indices) = ops::maxpool2d_with_indices(self.value(input))?;
        Ok(self.push(out, Op::MaxPool { input, indices }))
    }

    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId, NnError> {
        let out = ops::global_avg_pool(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool(input)))
    }

    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId, NnError> {
        let out = ops::linear(self.value(input), self.value(weight), self.value(bias).data())?;
        Ok(self.push(out, Op::Linear { input, weight, bias }))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Mean cross-entropy of softmax(logits) against `targets`; produces a scalar node.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId, NnError> {
        let (loss, _, grad) = ops::softmax_cross_entropy(self.value(logits), targets)?;
        Ok(self.push(
            Tensor::full(Shape::new(1, 1, 1, 1), loss),
            Op::SoftmaxCrossEntropy { logits, grad },
        ))
    }

    /// Back-propagates from a scalar loss node into `params`, accumulating
    /// onto their gradients. A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamStore) -> Result<(), NnError> {
        let shape = self.value(loss).shape();
        if shape.numel() != 1 {
            return Err(NnError::NonScalarLoss(shape));
        }
        self.backward_from(loss, Tensor::full(shape, 1.0), params)
    }

    /// Back-propagates an arbitrary upstream gradient from `node`.
    pub fn backward_from(&mut self, node: NodeId, seed: Tensor, params: &mut ParamStore) -> Result<(), NnError> {
        if self.consumed {
            return Err(NnError::GraphConsumed);
        }
        if seed.shape() != self.value(node).shape() {
            return Err(NnError::ShapeMismatch {
                op: "backward",
                left: self.value(node).shape(),
                right: seed.shape(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[node.0] = Some(seed);

        for i in (0..=node.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(index) => params.get_mut(*index).grad.add_assign(&g)?,
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (dx, dw, db) = ops::conv2d_backward(self.value(*input), self.value(*weight), *stride, *padding, &g)?;
                    let db = Tensor::new(self.value(*bias).shape(), db)?;
                    accumulate(&mut grads, *input, dx)?;
                    accumulate(&mut grads, *weight, dw)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::Relu(input) => {
                    let dx = ops::relu_backward(self.value(*input), &g);
                    accumulate(&mut grads, *input, dx)?;
                }
                Op::MaxPool { input, indices } => {
                    let dx = ops::maxpool2d_backward(self.value(*input).shape(), indices, &g);
                    accumulate(&mut grads, *input, dx)?;
                }
                Op::GlobalAvgPool(input) => {
                    let dx = ops::global_avg_pool_backward(self.value(*input).shape(), &g);
                    accumulate(&mut grads, *input, dx)?;
                }
                Op::Linear { input, weight, bias } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*input), self.value(*weight), &g)?;
                    let db = Tensor::new(self.value(*bias).shape(), db)?;
                    accumulate(&mut grads, *input, dx)?;
                    accumulate(&mut grads, *weight, dw)?;
                    accumulate(&mut grads, *bias, db)?;
                }
                Op::Concat(parts) => {
                    let shapes: Vec<Shape> = parts.iter().map(|&p| self.value(p).shape()).collect();
                    let pieces = ops::concat_channels_backward(&shapes, &g);
                    for (&p, piece) in parts.iter().zip(pieces) {
                        accumulate(&mut grads, p, piece)?;
                    }
                }
                Op::SoftmaxCrossEntropy { logits, grad } => {
                    let upstream = g.data()[0];
                    let mut dl = grad.clone();
                    dl.data_mut().iter_mut().for_each(|v| *v *= upstream);
                    accumulate(&mut grads, *logits, dl)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<(), NnError> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameter;

    fn store_with(values: &[(&str, Tensor)]) -> ParamStore {
        values.iter().map(|(n, t)| Parameter::new(*n, t.clone())).collect()
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut params = store_with(&[
            ("w", Tensor::full(Shape::new(2, 2, 1, 1), 0.5)),
            ("b", Tensor::zeros(Shape::new(2, 1, 1, 1))),
        ]);
        let mut g = ComputeGraph::new();
        let x = g.input(Tensor::full(Shape::new(1, 2, 1, 1), 1.0));
        let w = g.param(&params, 0);
        let b = g.param(&params, 1);
        let y = g.linear(x, w, b).unwrap();
        let loss = g.softmax_cross_entropy(y, &[1]).unwrap();
        g.backward(loss, &mut params).unwrap();
        assert!(matches!(g.backward(loss, &mut params), Err(NnError::GraphConsumed)));
    }

    #[test]
    fn unused_parameter_gets_exactly_zero() {
        let mut params = store_with(&[
            ("w", Tensor::full(Shape::new(2, 2, 1, 1), 0.5)),
            ("b", Tensor::zeros(Shape::new(2, 1, 1, 1))),
            ("dead", Tensor::full(Shape::new(2, 2, 1, 1), 3.0)),
        ]);
        let mut g = ComputeGraph::new();
        let x = g.input(Tensor::full(Shape::new(1, 2, 1, 1), 1.0));
        let w = g.param(&params, 0);
        let b = g.param(&params, 1);
        // recorded on the tape but never feeds the loss
        let _dead = g.param(&params, 2);
        let y = g.linear(x, w, b).unwrap();
        let loss = g.softmax_cross_entropy(y, &[0]).unwrap();
        g.backward(loss, &mut params).unwrap();
        assert!(params.get(2).grad.data().iter().all(|&v| v == 0.0));
        assert!(params.get(1).grad.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut params = ParamStore::new();
        let mut g = ComputeGraph::new();
        let x = g.input(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        assert!(matches!(g.backward(x, &mut params), Err(NnError::NonScalarLoss(_))));
    }
}
