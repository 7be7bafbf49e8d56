//! Dense row-major tensors and shape utilities.

use crate::error::{dim_err, Result};
use crate::scalar::{DType, Scalar};

/// Dense n-dimensional array in row-major order.
///
/// A rank-0 tensor (empty shape) holds a single scalar. `grad` is populated
/// by [`Graph::backward`](crate::graph::Graph::backward) for leaves created
/// with `requires_grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(dim_err(format!("shape {shape:?} has a zero extent")));
        }
        if numel(&shape) != data.len() {
            return Err(dim_err(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builds a tensor whose length is already known to match.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<T>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    /// The single element of a tensor with one element.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(dim_err(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() || shape.contains(&0) {
            return Err(dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = *self.shape.last().expect("row() on rank-0 tensor");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(dim_err(format!(
                "shapes {a:?} and {b:?} are not broadcastable"
            )));
        };
    }
    Ok(out)
}

/// Maps flat indices of a broadcast output back to flat indices of one operand.
#[derive(Debug, Clone)]
pub(crate) enum BroadcastMap {
    Same,
    /// Operand is a trailing block repeated, `index % period`.
    Cyclic(usize),
    General {
        out_shape: Vec<usize>,
        strides: Vec<usize>,
    },
}

impl BroadcastMap {
    pub(crate) fn new(src: &[usize], out: &[usize]) -> Self {
        if src == out {
            return BroadcastMap::Same;
        }
        let src_n = numel(src);
        // A suffix of the output shape (leading ones dropped) repeats cyclically.
        let trimmed: Vec<usize> = src.iter().copied().skip_while(|&d| d == 1).collect();
        if out.ends_with(&trimmed) {
            return BroadcastMap::Cyclic(src_n.max(1));
        }
        let offset = out.len() - src.len();
        let mut strides = vec![0; out.len()];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            strides[i + offset] = if src[i] == 1 { 0 } else { acc };
            acc *= src[i];
        }
        BroadcastMap::General {
            out_shape: out.to_vec(),
            strides,
        }
    }

    #[inline]
    pub(crate) fn index(&self, flat: usize) -> usize {
        match self {
            BroadcastMap::Same => flat,
            BroadcastMap::Cyclic(p) => flat % p,
            BroadcastMap::General { out_shape, strides } => {
                let mut rem = flat;
                let mut idx = 0;
                for d in (0..out_shape.len()).rev() {
                    let coord = rem % out_shape[d];
                    rem /= out_shape[d];
                    idx += coord * strides[d];
                }
                idx
            }
        }
    }
}
