//! A small define-by-run reverse-mode differentiation engine.
//!
//! Every [`Tensor`] is an immutable, reference-counted node. Operations that
//! touch at least one tensor with `requires_grad` record their operands so
//! that [`Tensor::backward`] can replay the chain rule. Operations on
//! constants produce plain leaves and record nothing.

mod adam;
mod backward;
mod gradcheck;
mod kernels;
mod ops;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use adam::{AdamConfig, AdamState};
pub use backward::GradMap;
pub use gradcheck::{finite_diff_check, finite_diff_check_coords};

/// Additive value used for masked attention logits.
pub const MASK_VALUE: f32 = -1e9;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> TensorId {
    TensorId(NEXT_ID.fetch_add(1, Ordering::Relaxed))
}

/// Identity of a node in the computation record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(u64);

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("adam: no gradient for parameter #{0}")]
    MissingGradient(usize),
    #[error("finite difference check: function is not deterministic")]
    NonDeterministic,
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// Recorded operation of a non-leaf node.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f32),
    Concat(Vec<Tensor>, usize),
    Slice {
        input: Tensor,
        axis: usize,
        start: usize,
    },
    TransposeLast(Tensor),
    Reshape(Tensor),
    Relu(Tensor),
    /// The output itself is the saved softmax value.
    Softmax(Tensor),
    LayerNorm {
        input: Tensor,
        gain: Tensor,
        bias: Tensor,
        normalized: Vec<f32>,
        inv_std: Vec<f32>,
    },
    Gather {
        table: Tensor,
        indices: Vec<usize>,
    },
    Mean(Tensor),
    Sum(Tensor),
    SumLast(Tensor),
    Square(Tensor),
    Sqrt(Tensor),
    Exp(Tensor),
}

pub(crate) struct Node {
    pub(crate) id: TensorId,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f32>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Shape-tagged `f32` array participating in the computation record.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Arc::new(Node {
            id: next_id(),
            shape,
            data,
            requires_grad,
            op,
        }))
    }

    /// Leaf tensor. Fails when `data.len()` does not match the shape.
    pub fn new(data: Vec<f32>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(invalid(
                "new",
                format!("{} values do not fill shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor::build(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    pub fn constant(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(data, shape, false)
    }

    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(data, shape, true)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::build(Vec::new(), vec![value], false, Op::Leaf)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(shape.to_vec(), vec![0.0; numel(shape)], false, Op::Leaf)
    }

    pub fn id(&self) -> TensorId {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when this tensor has no recorded parents.
    pub fn is_leaf(&self) -> bool {
        matches!(self.0.op, Op::Leaf)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(
            self.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.0.data[0]
    }

    /// Copy of the values as a new leaf cut off from the computation record.
    pub fn detach(&self) -> Tensor {
        Tensor::build(self.0.shape.clone(), self.0.data.clone(), false, Op::Leaf)
    }

    /// Fresh leaf holding a copy of the values, with the given grad flag.
    pub fn to_leaf(&self, requires_grad: bool) -> Tensor {
        Tensor::build(
            self.0.shape.clone(),
            self.0.data.clone(),
            requires_grad,
            Op::Leaf,
        )
    }

    /// Same shape and grad flag, new values, new identity.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Tensor> {
        Tensor::new(data, &self.0.shape, self.0.requires_grad)
    }
}
