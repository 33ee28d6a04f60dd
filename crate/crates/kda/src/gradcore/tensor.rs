//! Dense 64-bit float tensors with shape metadata and an optional gradient buffer.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Input values are outside the operation's domain.
    Domain { op: &'static str, detail: String },
    /// An index (e.g. a class label) is out of range.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// An API contract was violated (non-scalar loss, foreign tensor, ...).
    Contract { detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Self::Domain { op, detail } => write!(f, "{op}: {detail}"),
            Self::IndexOutOfRange { op, index, bound } => {
                write!(f, "{op}: index {index} out of range (bound {bound})")
            }
            Self::Contract { detail } => write!(f, "contract violation: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

/// A dense row-major f64 tensor. Cloning is cheap and shares storage, so a
/// `Tensor` doubles as a node handle inside a [`crate::gradcore::Graph`].
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
    id: u64,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data. The shape product must
    /// equal the data length.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(TensorError::Contract {
                detail: format!(
                    "shape {shape:?} implies {expect} elements, got {}",
                    data.len()
                ),
            });
        }
        Ok(Self {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
            })),
            id: fresh_id(),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![0.0; n]).expect("zeros: consistent by construction")
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(vec![1], vec![value]).expect("scalar: consistent by construction")
    }

    /// Build a `rows × cols` matrix from row slices of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::Contract {
                detail: "from_rows: ragged rows".to_string(),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Self::from_vec(vec![r, c], data)
    }

    /// Node identity. Unique per tensor within a thread; stable across graphs.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Borrow the raw data. Keep the borrow short-lived.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn value(&self, index: usize) -> f64 {
        self.inner.borrow().data[index]
    }

    pub fn set_value(&self, index: usize, v: f64) {
        self.inner.borrow_mut().data[index] = v;
    }

    /// Replace the whole data buffer. The length must match the shape.
    pub fn set_data(&self, data: Vec<f64>) -> Result<(), TensorError> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(TensorError::Contract {
                detail: format!(
                    "set_data: expected {} elements, got {}",
                    inner.data.len(),
                    data.len()
                ),
            });
        }
        inner.data = data;
        Ok(())
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64, TensorError> {
        let inner = self.inner.borrow();
        if inner.data.len() != 1 {
            return Err(TensorError::Contract {
                detail: format!("item: tensor of shape {:?} is not scalar", inner.shape),
            });
        }
        Ok(inner.data[0])
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Add `delta` into the gradient buffer, creating it zeroed if absent.
    pub fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        assert_eq!(delta.len(), n, "gradient length must match tensor length");
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Reset the gradient buffer to zeros (allocating it if needed).
    pub fn zero_grad(&self) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        match &mut inner.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            slot => *slot = Some(vec![0.0; n]),
        }
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.inner.borrow().shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        let inner = self.inner.borrow();
        if inner.shape.len() >= 2 {
            inner.shape[1]
        } else {
            1
        }
    }

    pub fn all_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor(id={}, shape={:?}, data={:?})",
            self.id, inner.shape, inner.data
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_length_must_agree() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        let t = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t.shape(), vec![2, 2]);
    }

    #[test]
    fn grads_accumulate_and_reset() {
        let t = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), vec![1.5, 1.5, 1.5]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), vec![0.0, 0.0, 0.0]);
        t.clear_grad();
        assert!(t.grad().is_none());
    }

    #[test]
    fn clones_share_storage_and_identity() {
        let t = Tensor::scalar(5.0);
        let u = t.clone();
        u.set_value(0, 7.0);
        assert_eq!(t.value(0), 7.0);
        assert_eq!(t.id(), u.id());
    }

    #[test]
    fn ids_are_unique_across_tensors() {
        let a = Tensor::scalar(0.0);
        let b = Tensor::scalar(0.0);
        assert_ne!(a.id(), b.id());
    }
}
