//! Dense fp64 n-d tensors on a reverse-mode gradient tape.
//!
//! A [`Tape`] owns every tensor created on it: values, shapes, gradient
//! buffers and the recorded operation graph. Handles are plain indices
//! ([`TensorId`]); the tape is append-only so node inputs always precede
//! their outputs, which makes a single reverse sweep a valid backward pass.
//!
//! One tape is owned by one logical thread of control. Independent tapes
//! (e.g. different sequences) can run concurrently; nothing here is shared.
//!
//! The op set is deliberately narrow: exactly the primitives the network
//! layers need, all in fp64, with direct-loop kernels and no broadcasting
//! beyond the per-token affine inside `layer_norm`.

mod conv;
mod linear;
mod ops;
#[cfg(test)]
mod tests;

pub use conv::{conv2d_oracle, depthwise_conv2d_oracle};

use std::fmt;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Errors raised by tensor construction and tape operations.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Incompatible shapes; `detail` names the offending axes.
    Shape { op: &'static str, detail: String },
    /// Argument outside the op's domain (even kernel, bad divisibility, ...).
    Invalid { op: &'static str, detail: String },
    /// NaN or infinity where finite values are required.
    NonFinite { op: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::Shape { op, detail } => write!(f, "{op}: shape error: {detail}"),
            TensorError::Invalid { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite input"),
        }
    }
}

impl std::error::Error for TensorError {}

pub(crate) fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

pub(crate) fn invalid(op: &'static str, detail: String) -> TensorError {
    TensorError::Invalid { op, detail }
}

/// A recorded differentiable operation.
///
/// `backward` receives the output gradient and accumulates into the input
/// gradients through [`BackwardCtx`]. Implementations live next to the
/// module that owns the math (convolutions here, token shifts and WKV in
/// the modulator module, the margin loss in training).
pub trait TapeOp: fmt::Debug {
    fn name(&self) -> &'static str;
    fn backward(&self, ctx: &mut BackwardCtx<'_>);
}

struct Node {
    op: Box<dyn TapeOp>,
    inputs: Vec<TensorId>,
}

/// Owner of all tensors and the recorded computation.
#[derive(Default)]
pub struct Tape {
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f64>>,
    requires_grad: Vec<bool>,
    grad: Vec<Option<Vec<f64>>>,
    nodes: Vec<Option<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Insert a leaf tensor. Only leaves may require gradients directly.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "leaf",
                format!("shape {:?} implies {} elements, data has {}", shape, numel, data.len()),
            ));
        }
        let id = TensorId(self.data.len());
        self.shapes.push(shape);
        self.data.push(data);
        self.requires_grad.push(requires_grad);
        self.grad.push(None);
        self.nodes.push(None);
        Ok(id)
    }

    /// Leaf that never takes gradients.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.leaf(vec![value], vec![1], false).expect("scalar leaf")
    }

    /// Record an op output. A node is kept only when some input requires
    /// gradients; pure-inference graphs cost nothing to record.
    pub(crate) fn push_op(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: Vec<TensorId>,
        op: Box<dyn TapeOp>,
    ) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs = inputs.iter().any(|i| self.requires_grad[i.0]);
        let id = TensorId(self.data.len());
        self.shapes.push(shape);
        self.data.push(data);
        self.requires_grad.push(needs);
        self.grad.push(None);
        self.nodes.push(if needs { Some(Node { op, inputs }) } else { None });
        id
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.data[id.0].len()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.requires_grad[id.0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grad[id.0].as_deref()
    }

    /// Reset accumulated leaf gradients.
    pub fn zero_grads(&mut self) {
        for g in self.grad.iter_mut() {
            *g = None;
        }
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Gradients are accumulated into every `requires_grad` leaf; calling
    /// backward again without [`Tape::zero_grads`] adds on top.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let n = loss.0 + 1;
        let mut flowing: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            if self.requires_grad[i] {
                flowing.push(vec![0.0; self.data[i].len()]);
            } else {
                flowing.push(Vec::new());
            }
        }
        if !self.requires_grad[loss.0] {
            return Ok(()); // nothing differentiable upstream
        }
        flowing[loss.0][0] = 1.0;

        for i in (0..n).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            if let Some(node) = &self.nodes[i] {
                let (in_grads, rest) = flowing.split_at_mut(i);
                let mut ctx = BackwardCtx {
                    shapes: &self.shapes,
                    data: &self.data,
                    requires_grad: &self.requires_grad,
                    inputs: &node.inputs,
                    out: TensorId(i),
                    out_grad: &rest[0],
                    in_grads,
                };
                node.op.backward(&mut ctx);
            }
        }

        for i in 0..n {
            if self.requires_grad[i] && self.nodes[i].is_none() {
                let buf = self.grad[i].get_or_insert_with(|| vec![0.0; self.data[i].len()]);
                for (dst, src) in buf.iter_mut().zip(flowing[i].iter()) {
                    *dst += *src;
                }
            }
        }
        Ok(())
    }

    pub(crate) fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(shape_err(
                op,
                format!("operands differ: {:?} vs {:?}", self.shapes[a.0], self.shapes[b.0]),
            ));
        }
        Ok(())
    }
}

/// View handed to [`TapeOp::backward`].
///
/// Inputs of a node always have smaller ids than its output, so the flowing
/// gradient storage can be split at the output index: everything below is
/// writable input gradient, the output gradient is read-only.
pub struct BackwardCtx<'a> {
    shapes: &'a [Vec<usize>],
    data: &'a [Vec<f64>],
    requires_grad: &'a [bool],
    inputs: &'a [TensorId],
    out: TensorId,
    out_grad: &'a [f64],
    in_grads: &'a mut [Vec<f64>],
}

impl<'a> BackwardCtx<'a> {
    pub fn input(&self, k: usize) -> TensorId {
        self.inputs[k]
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn out_data(&self) -> &[f64] {
        &self.data[self.out.0]
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.shapes[self.out.0]
    }

    pub fn out_grad(&self) -> &'a [f64] {
        self.out_grad
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.requires_grad[id.0]
    }

    /// Writable gradient buffer for an input, or `None` when that input
    /// does not participate in differentiation.
    pub fn grad_mut(&mut self, id: TensorId) -> Option<&mut [f64]> {
        if self.requires_grad[id.0] {
            Some(&mut self.in_grads[id.0])
        } else {
            None
        }
    }

    /// Accumulate `delta` into an input gradient (no-op for frozen inputs).
    pub fn add_grad(&mut self, id: TensorId, delta: &[f64]) {
        if let Some(buf) = self.grad_mut(id) {
            debug_assert_eq!(buf.len(), delta.len());
            for (dst, src) in buf.iter_mut().zip(delta.iter()) {
                *dst += *src;
            }
        }
    }
}
