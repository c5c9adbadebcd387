//! Dense row-major arrays with a recording tape for reverse-mode
//! differentiation.
//!
//! Values are immutable once built. Operations are issued through a
//! [`Tape`]; an application is recorded only when at least one input is a
//! tape node (a leaf registered with [`Tape::leaf`] or the output of a
//! recorded op). Everything else is computed eagerly and left off the tape,
//! which is how frozen sub-networks avoid paying for gradient bookkeeping.
//!
//! The engine is generic over [`Element`] so the same graph can be replayed
//! in `f64` as a shadow oracle for gradient checks.

mod gradcheck;
mod kernels;
mod optim;
mod tape;

use std::fmt;
use std::sync::Arc;

use num_traits::Float;

use crate::{Error, Result};

pub use gradcheck::{finite_diff_check, standard_suite, GradCheckReport, GraphBuilder, GraphKind, RandomGraph};
pub use optim::{sgd_step, SgdHyper, SgdState};
pub use tape::{BnMode, BnStats, Conv2dAttrs, Gradients, NodeId, Tape};

/// Floating-point element type usable by the engine.
pub trait Element:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c ← alpha·a·b + beta·c` with explicit row/column strides for every
    /// operand, `a` being m×k and `b` k×n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_element {
    ($ty:ty, $gemm:path) => {
        impl Element for $ty {
            #[inline]
            fn of_f64(v: f64) -> Self {
                v as $ty
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output too short");
                // SAFETY: the asserts above keep every strided access of the
                // three operands inside their slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm);
impl_element!(f64, matrixmultiply::dgemm);

/// An n-dimensional array, optionally bound to a node of a [`Tape`].
#[derive(Clone)]
pub struct Tensor<F: Element = f32> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
    node: Option<NodeId>,
}

impl<F: Element> Tensor<F> {
    /// Builds a tensor, rejecting length mismatches and non-finite values.
    pub fn from_vec(shape: &[usize], values: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::shape(format!(
                "{} values do not fill shape {:?} ({} elements)",
                values.len(),
                shape,
                expected
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite input {} at flat index {pos}",
                values[pos]
            )));
        }
        Ok(Self::raw(shape.to_vec(), values))
    }

    /// Converts and copies an `f64` slice.
    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::from_vec(shape, values.iter().map(|&v| F::of_f64(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let count = shape.iter().product();
        Self::raw(shape.to_vec(), vec![value; count])
    }

    pub fn scalar(value: F) -> Self {
        Self::raw(Vec::new(), vec![value])
    }

    pub(crate) fn raw(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
            node: None,
        }
    }

    pub(crate) fn shared(shape: Vec<usize>, data: Arc<Vec<F>>, node: Option<NodeId>) -> Self {
        Self { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<F>> {
        &self.data
    }

    /// Element at a multi-index, `None` when out of range.
    pub fn get(&self, index: &[usize]) -> Option<F> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            if i >= extent {
                return None;
            }
            flat = flat * extent + i;
        }
        Some(self.data[flat])
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> Result<F> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// The same values with no tape binding.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Replaces the stored values in place (used by optimizers).
    pub(crate) fn values_mut(&mut self) -> &mut Vec<F> {
        self.node = None;
        Arc::make_mut(&mut self.data)
    }

    pub fn map_to<G: Element>(&self) -> Tensor<G> {
        Tensor::raw(
            self.shape.clone(),
            self.data.iter().map(|v| G::of_f64(v.as_f64())).collect(),
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Bitwise equality of shape and contents.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

impl<F: Element> fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .field("head", &preview)
            .finish()
    }
}

/// Value equality: same shape and elements, ignoring tape identity.
impl<F: Element> PartialEq for Tensor<F> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Rejects non-finite results, naming the operation that produced them.
pub(crate) fn check_finite<F: Element>(op: &str, values: &[F]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(pos) => Err(Error::Numeric(format!(
            "{op} produced {} at flat index {pos}",
            values[pos]
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_layout() {
        let t = Tensor::<f32>::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(t.get(&[1, 0]), Some(3.0));
        assert_eq!(t.get(&[0, 1]), Some(2.0));
        assert_eq!(t.get(&[2, 0]), None);
    }

    #[test]
    fn empty_tensor() {
        let t = Tensor::<f32>::from_vec(&[0], vec![]).unwrap();
        assert_eq!(t.len(), 0);
        assert!(t.is_empty());
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        let err = Tensor::<f32>::from_vec(&[2], vec![1., 2., 3.]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let err = Tensor::<f32>::from_vec(&[2], vec![1., f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        let err = Tensor::<f64>::from_vec(&[1], vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn gemm_with_transposed_strides() {
        // a = [[1,2],[3,4]], b^T read through strides
        let a = [1.0f64, 2., 3., 4.];
        let b = [5.0f64, 6., 7., 8.];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, (2, 1), &b, (1, 2), 0.0, &mut c, (2, 1));
        // a · b^T = [[1*5+2*6, 1*7+2*8], [3*5+4*6, 3*7+4*8]]
        assert_eq!(c, [17., 23., 39., 53.]);
    }
}
