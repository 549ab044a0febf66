//! Dense row-major `f64` tensors.

use crate::error::{Error, Result};

/// An n-dimensional array of `f64` values in row-major order.
///
/// `grad` is only populated for tensors that live in a [`ParamStore`](crate::params::ParamStore)
/// and have been through a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!("tensor shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("tensor", "numel", numel, data.len()));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// Builds a tensor where the caller guarantees `product(shape) == data.len()`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if n == 0 || w == 0 {
            return Err(Error::Contract("from_rows needs a non-empty matrix".into()));
        }
        let mut data = Vec::with_capacity(n * w);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != w {
                return Err(Error::dim("from_rows", format!("row {i}"), w, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self::from_parts(vec![n, w], data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim("reshape", "numel", self.data.len(), numel));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape[self.shape.len() - 1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Entries `indices` along the leading axis, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let n = self.shape.first().copied().unwrap_or(0);
        let w = self.data.len() / n.max(1);
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= n {
                return Err(Error::Contract(format!("row {i} outside leading axis of {n}")));
            }
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self::from_parts(shape, data))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim("stack", "item shape", first.numel(), t.numel()));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self::from_parts(shape, data))
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        let w = self.shape[self.shape.len() - 1];
        self.data
            .chunks(w)
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}
