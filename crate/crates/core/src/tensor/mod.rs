//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable: every op allocates a new node that remembers its
//! parents and enough metadata to run the chain rule backwards. Values are
//! `f64` throughout; any op that would produce a NaN/Inf returns an error
//! instead of propagating it silently.
//!
//! [`Tensor::detach`] is the stop-gradient operator: forward identity,
//! backward contributes exactly zero to everything beneath it.

mod autograd;
pub mod gradcheck;
mod ops;

pub use autograd::Gradients;
pub use ops::scaled_dot_attention;

use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// While alive, ops on this thread record no graph history. Forward values
/// are unchanged; backward through anything built under the guard is a no-op.
pub struct NoGradGuard(());

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// Disable gradient recording on the current thread until the guard drops.
pub fn no_grad() -> NoGradGuard {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    NoGradGuard(())
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

/// Differentiable ops and the metadata their backward rules need.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Relu,
    Scale(f64),
    /// x (r x c) + row (c), broadcast over rows.
    AddRow,
    Matmul,
    Transpose,
    SoftmaxRows,
    LogSoftmaxRows,
    LayerNorm {
        eps: f64,
    },
    L2NormRows,
    SumAll,
    MeanAll,
    Reshape,
    CatRows {
        row_splits: Vec<usize>,
    },
    CatCols {
        col_splits: Vec<usize>,
    },
    NarrowRows {
        start: usize,
    },
    NarrowCols {
        start: usize,
    },
    CumsumRows,
    SelectRows {
        indices: Vec<usize>,
    },
    GatherPerRow {
        cols: Vec<usize>,
    },
    /// KL(target || x) against a constant target distribution.
    KlAgainst {
        target: Vec<f64>,
    },
    /// Forward copies the quantized values; backward passes straight to the latent.
    StraightThrough,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Relu => "relu",
            Op::Scale(_) => "scale",
            Op::AddRow => "add_row",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::SoftmaxRows => "softmax_rows",
            Op::LogSoftmaxRows => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2NormRows => "l2_normalize_rows",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::Reshape => "reshape",
            Op::CatRows { .. } => "cat_rows",
            Op::CatCols { .. } => "cat_cols",
            Op::NarrowRows { .. } => "narrow_rows",
            Op::NarrowCols { .. } => "narrow_cols",
            Op::CumsumRows => "cumsum_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::GatherPerRow { .. } => "gather_per_row",
            Op::KlAgainst { .. } => "kl_against",
            Op::StraightThrough => "straight_through",
        }
    }
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) shape: Vec<usize>,
    pub(crate) values: Arc<Vec<f64>>,
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) requires_grad: bool,
}

/// Immutable handle to a node of the computation graph. Cloning is cheap.
#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("op", &self.node.op.name())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn check_finite(values: &[f64], op: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tensor {
    pub(crate) fn make(
        op: Op,
        parents: Vec<Tensor>,
        values: Vec<f64>,
        shape: Vec<usize>,
    ) -> Result<Tensor> {
        Self::make_shared(op, parents, Arc::new(values), shape)
    }

    pub(crate) fn make_shared(
        op: Op,
        parents: Vec<Tensor>,
        values: Arc<Vec<f64>>,
        shape: Vec<usize>,
    ) -> Result<Tensor> {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        check_finite(&values, op.name())?;
        let requires_grad = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let (op, parents) = if requires_grad {
            (op, parents)
        } else {
            // No gradient can flow here; drop the history so memory is freed.
            (Op::Leaf, Vec::new())
        };
        Ok(Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values,
                op,
                parents,
                requires_grad,
            }),
        })
    }

    fn leaf(values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::invalid(
                "leaf",
                format!("{} values do not fill shape {:?}", values.len(), shape),
            ));
        }
        check_finite(&values, "leaf")?;
        Ok(Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                values: Arc::new(values),
                op: Op::Leaf,
                parents: Vec::new(),
                requires_grad: requires_grad && grad_enabled(),
            }),
        })
    }

    /// Constant tensor; no gradient is ever computed for it.
    pub fn from_vec(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(values, shape, false)
    }

    /// Trainable leaf: gradients are accumulated for it during backward.
    pub fn param(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(values, shape, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::leaf(vec![0.0; n], shape, false).expect("zeros is always valid")
    }

    pub fn scalar(v: f64) -> Result<Tensor> {
        Self::leaf(vec![v], &[], false)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.node.values
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.node.values)
    }

    pub(crate) fn node(&self) -> &Node {
        &self.node
    }

    pub fn numel(&self) -> usize {
        self.node.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_scalar(&self) -> bool {
        self.node.shape.is_empty()
    }

    /// Extract the value of a scalar tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.node.values[0])
        } else {
            Err(Error::invalid(
                "scalar_value",
                format!("tensor of shape {:?} is not a scalar", self.shape()),
            ))
        }
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.node.shape.first().copied().unwrap_or(1)
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.node.shape.get(1).copied().unwrap_or(1)
    }

    pub(crate) fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.node.shape.len() == 2 {
            Ok((self.node.shape[0], self.node.shape[1]))
        } else {
            Err(Error::invalid(
                op,
                format!("expected a 2-D tensor, got shape {:?}", self.shape()),
            ))
        }
    }

    /// Stop-gradient: forward identity, backward contributes exactly zero.
    pub fn detach(&self) -> Tensor {
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: self.node.shape.clone(),
                values: Arc::clone(&self.node.values),
                op: Op::Leaf,
                parents: Vec::new(),
                requires_grad: false,
            }),
        }
    }

    /// Alias of [`Tensor::detach`].
    pub fn stop_gradient(&self) -> Tensor {
        self.detach()
    }

    /// Replace a leaf's values, producing a fresh leaf with the same
    /// shape and trainability. Used by optimizers; never mutates in place.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Tensor> {
        if values.len() != self.numel() {
            return Err(Error::invalid(
                "with_values",
                format!("{} values for shape {:?}", values.len(), self.shape()),
            ));
        }
        Self::leaf(values, &self.node.shape.clone(), self.node.requires_grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_product_enforced() {
        assert!(Tensor::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        assert!(Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).is_ok());
    }

    #[test]
    fn non_finite_leaf_rejected() {
        assert!(Tensor::from_vec(vec![f64::NAN], &[1]).is_err());
        assert!(Tensor::from_vec(vec![f64::INFINITY], &[1]).is_err());
    }

    #[test]
    fn detach_is_forward_identity() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let d = x.detach();
        assert_eq!(d.values(), x.values());
        assert!(!d.requires_grad());
    }

    #[test]
    fn tensors_are_send_and_sync() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Tensor>();
    }

    #[test]
    fn no_grad_suppresses_history() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let _g = no_grad();
        let y = x.mul(&x).unwrap();
        assert!(!y.requires_grad());
        assert_eq!(y.values(), &[4.0]);
    }
}
