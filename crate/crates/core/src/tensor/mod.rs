//! Dense `f64` tensors and a reverse-mode autodiff tape.
//!
//! Storage is contiguous and row-major with no strides or views. Most
//! operations interpret a tensor as a matrix whose column count is the last
//! dimension and whose row count is the product of the leading dimensions, so
//! a knowledge base shaped `[H, W, d]` is handled as `H*W` rows of width `d`.

mod gemm;
mod tape;

pub use gemm::{gemm, matmul_naive};
pub use tape::{Gradients, Tape, Var};

use std::fmt;

/// Shape and domain errors raised by tensor operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Domain {
                op: "new",
                msg: format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// A one-dimensional tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Domain {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Self::matrix(rows.len(), cols, rows.concat())
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Width of the matrix view: the last dimension (1 for a scalar).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Height of the matrix view: product of all but the last dimension.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Splits off the first `p` columns of the matrix view.
    pub fn split_cols(&self, p: usize) -> Result<(Tensor, Tensor)> {
        let c = self.cols();
        if p > c {
            return Err(TensorError::Domain {
                op: "split_cols",
                msg: format!("split point {} beyond width {}", p, c),
            });
        }
        let r = self.rows();
        let mut a = Vec::with_capacity(r * p);
        let mut b = Vec::with_capacity(r * (c - p));
        for i in 0..r {
            let row = self.row(i);
            a.extend_from_slice(&row[..p]);
            b.extend_from_slice(&row[p..]);
        }
        let lead = &self.shape[..self.shape.len().saturating_sub(1)];
        let mut sa = lead.to_vec();
        sa.push(p);
        let mut sb = lead.to_vec();
        sb.push(c - p);
        Ok((Tensor::new(sa, a)?, Tensor::new(sb, b)?))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&self, other: &Tensor) -> Result<Tensor> {
        let la = &self.shape[..self.shape.len().saturating_sub(1)];
        let lb = &other.shape[..other.shape.len().saturating_sub(1)];
        if la != lb {
            return Err(TensorError::Shape {
                op: "concat",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (ca, cb) = (self.cols(), other.cols());
        let mut data = Vec::with_capacity(self.numel() + other.numel());
        for r in 0..self.rows() {
            data.extend_from_slice(&self.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&other.data[r * cb..(r + 1) * cb]);
        }
        let mut shape = la.to_vec();
        shape.push(ca + cb);
        Tensor::new(shape, data)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{:.6}", v)?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ... ({} total)", self.data.len())?;
        }
        write!(f, "]")
    }
}

/// Numerically stable softmax of a slice, skipping nothing.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
    }

    #[test]
    fn concat_places_left_operand_first() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0]);
        assert_eq!(a.concat(&b).unwrap().data(), &[1.0, 2.0, 3.0]);
        let empty = Tensor::vector(vec![]);
        assert_eq!(a.concat(&empty).unwrap(), a);
    }

    #[test]
    fn concat_rejects_mismatched_leading_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 1]);
        let err = a.concat(&b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[3, 1]"));
    }

    #[test]
    fn split_then_concat_round_trips() {
        let t = Tensor::matrix(2, 4, (0..8).map(f64::from).collect()).unwrap();
        for p in 0..=4 {
            let (a, b) = t.split_cols(p).unwrap();
            assert_eq!(a.concat(&b).unwrap(), t);
        }
    }

    #[test]
    fn scalar_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(elu(3.0), 3.0);
        assert!((elu(-1.0) - (-1f64).exp_m1()).abs() < 1e-15);
        assert!((elu(-1.0) + 0.6321).abs() < 1e-4);
    }
}
