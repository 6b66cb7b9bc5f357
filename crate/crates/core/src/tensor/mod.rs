//! Dense f32 tensors on a reverse-mode differentiation tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Ops append
//! nodes and record enough state to replay the chain rule in reverse;
//! [`Tape::backward`] walks the node list from the loss down and accumulates
//! gradients additively into every reachable tensor that requires them.
//! Dropping the tape releases all saved activations.

mod adam;
mod conv;
mod kernels;

pub use adam::{adam_step, Adam, AdamHyper};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataShape {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: expected {expected}-d tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: input has {input_channels} channels but weight expects {weight_channels}")]
    ChannelMismatch {
        op: &'static str,
        input_channels: usize,
        weight_channels: usize,
    },
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: stride must be 1 or 2, got {stride}")]
    Stride { op: &'static str, stride: usize },
    #[error("{op}: spatial dims {dims:?} with padding {padding:?} cannot fit kernel size {kernel}")]
    SpatialTooSmall {
        op: &'static str,
        dims: [usize; 3],
        padding: [usize; 3],
        kernel: usize,
    },
    #[error("{op}: computed output dimension is empty for input {dims:?}")]
    EmptyOutput { op: &'static str, dims: [usize; 3] },
    #[error("backward requires a scalar loss, got {elements} elements")]
    NonScalarLoss { elements: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

pub(crate) enum Op {
    Leaf,
    Conv3d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        spec: ConvSpec,
    },
    ConvTranspose3d {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        spec: ConvSpec,
    },
    InstanceNorm {
        input: TensorId,
        // per (n, c): mean and 1/sqrt(var + eps)
        mean: Vec<f32>,
        inv_std: Vec<f32>,
    },
    PRelu {
        input: TensorId,
        slope: TensorId,
    },
    SoftmaxChannels {
        input: TensorId,
    },
    FullyConnected {
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    },
    GlobalAvgPool {
        input: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Subsample2 {
        input: TensorId,
    },
    ChannelSlice {
        input: TensorId,
        offset: usize,
    },
    SumAll {
        input: TensorId,
    },
    L1Loss {
        pred: TensorId,
        target: Vec<f32>,
    },
    DiceLoss {
        pred: TensorId,
        target: Vec<f32>,
        // per-class smoothed numerator / denominator from the forward pass
        num: Vec<f64>,
        den: Vec<f64>,
    },
    CrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

pub(crate) struct Node {
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
    pub op: Op,
    /// Exact value of scalar reductions, kept in f64 for finite-difference oracles.
    pub scalar64: Option<f64>,
}

/// Ordered record of executed ops; nodes only reference earlier nodes, so the
/// reverse scan in [`Tape::backward`] visits each node after all its consumers.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, data: Vec<f32>, shape: &[usize], requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataShape {
                op: "leaf",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf, None))
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// f64 value of a scalar reduction node, exact to the forward accumulation.
    pub fn scalar_f64(&self, id: TensorId) -> Option<f64> {
        self.nodes[id.0].scalar64
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<f32>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op,
        scalar64: Option<f64>,
    ) -> TensorId {
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad,
            op,
            scalar64,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub(crate) fn rg(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Accumulates dLoss/dTensor into every tensor reachable from `loss` that
    /// requires gradients. Repeated calls add up: each pass propagates through
    /// fresh buffers and adds its result into the stored grads at the end.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let n = self.nodes[loss.0].data.len();
        if n != 1 {
            return Err(TensorError::NonScalarLoss { elements: n });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut pass: Vec<Option<Vec<f32>>> = Vec::new();
        pass.resize_with(loss.0 + 1, || None);
        pass[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = pass[i].take() else { continue };
            self.backprop_node(i, &g, &mut pass);
            let node = &mut self.nodes[i];
            let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
            for (acc, d) in grad.iter_mut().zip(&g) {
                *acc += d;
            }
        }
        Ok(())
    }
}

/// Adds `delta` into the in-flight gradient slot for `id`, claiming the buffer
/// directly when the slot is empty.
pub(crate) fn deposit(pass: &mut [Option<Vec<f32>>], id: TensorId, delta: Vec<f32>) {
    match &mut pass[id.0] {
        slot @ None => *slot = Some(delta),
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(&delta) {
                *a += d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_rejects_shape_mismatch() {
        let mut tape = Tape::new();
        let err = tape.leaf(vec![1.0, 2.0], &[3], true).unwrap_err();
        assert!(matches!(err, TensorError::DataShape { .. }));
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, -2.0, 3.0, 0.5], &[4], true).unwrap();
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0], &[1], true).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], true).unwrap();
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { elements: 2 }));
    }

    #[test]
    fn gradient_accumulation_is_additive() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2.0, 5.0], &[2], true).unwrap();
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn unreachable_grads_stay_absent() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0], &[1], true).unwrap();
        let y = tape.leaf(vec![4.0], &[1], true).unwrap();
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(y).is_none());
    }

    #[test]
    fn no_grad_leaf_is_skipped() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2], false).unwrap();
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(s).is_none());
    }
}
