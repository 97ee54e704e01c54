//! Dense row-major f64 tensors.
//!
//! A [`Tensor`] is an immutable value: shape plus a flat buffer. All
//! differentiable arithmetic lives on the gradient tape (see [`crate::tape`]);
//! the methods here are plain value-level helpers used by forward code,
//! estimators, and tests.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and a row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero extent in shape {shape:?}"
            )));
        }
        if data.len() != expect {
            return Err(Error::InvalidArgument(format!(
                "buffer length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n] }
    }

    /// Row-major identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// `rows` one-hot rows of width `k`, hot at `hot`.
    pub fn one_hot_rows(rows: usize, k: usize, hot: usize) -> Self {
        assert!(hot < k, "one-hot index {hot} out of range {k}");
        let mut t = Tensor::zeros(&[rows, k]);
        for r in 0..rows {
            t.data[r * k + hot] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("from_rows: no rows".into()));
        }
        let w = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for r in rows {
            if r.len() != w {
                return Err(Error::InvalidArgument("from_rows: ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), w], data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar extraction; panics unless the tensor has exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Row slice of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2, "row() on rank-{} tensor", self.rank());
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    /// Gather a subset of rows into a new rank-2 tensor.
    pub fn take_rows(&self, idx: &[usize]) -> Tensor {
        let w = self.cols();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { shape: vec![idx.len(), w], data }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Tensor {
        assert_eq!(self.rank(), 2);
        let (n, m) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = self.data[i * m + j];
            }
        }
        Tensor { shape: vec![m, n], data }
    }

    /// Plain matrix product of rank-2 tensors. The differentiable version
    /// lives on the tape; this one backs it and the test oracles.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (n, k, m) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            let out = &mut data[i * m..(i + 1) * m];
            for (p, &a) in arow.iter().enumerate() {
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in out.iter_mut().zip(brow.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor { shape: vec![n, m], data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Output shape of a broadcast binary op, or an error when the pair is not
/// same-shape / scalar / trailing-suffix.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() };
    if a == b {
        return Ok(a.to_vec());
    }
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let small_len: usize = small.iter().product();
    if small_len == 1 {
        return Ok(big.to_vec());
    }
    // trailing-dimension broadcast: small must equal the suffix of big
    if small.len() < big.len() && &big[big.len() - small.len()..] == small {
        return Ok(big.to_vec());
    }
    Err(mismatch())
}

/// Apply `f` elementwise under the broadcast rules of [`broadcast_shape`].
pub fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    let n: usize = out_shape.iter().product();
    let (al, bl) = (a.len(), b.len());
    let mut data = Vec::with_capacity(n);
    if al == n && bl == n {
        for i in 0..n {
            data.push(f(a.data[i], b.data[i]));
        }
    } else if bl == 1 {
        let bv = b.data[0];
        data.extend(a.data.iter().map(|&av| f(av, bv)));
    } else if al == 1 {
        let av = a.data[0];
        data.extend(b.data.iter().map(|&bv| f(av, bv)));
    } else if al == n {
        // b repeats along the leading dimensions
        for i in 0..n {
            data.push(f(a.data[i], b.data[i % bl]));
        }
    } else {
        for i in 0..n {
            data.push(f(a.data[i % al], b.data[i]));
        }
    }
    Tensor::new(out_shape, data)
}

/// Reduce a gradient of `from` shape back to `target` by summing the
/// broadcast dimensions (inverse of the expansion in [`broadcast_zip`]).
pub fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let tlen: usize = target.iter().product();
    let mut data = vec![0.0; tlen];
    for (i, &g) in grad.data().iter().enumerate() {
        data[i % tlen] += g;
    }
    Tensor { shape: target.to_vec(), data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![2, 2], vec![3.0, -1.0, 2.5, 4.0]).unwrap();
        let i2 = Tensor::eye(2);
        assert_eq!(i2.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn trailing_broadcast() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3], vec![10., 20., 30.]).unwrap();
        let c = broadcast_zip("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11., 22., 33., 14., 25., 36.]);
        let g = reduce_to_shape(&c, &[3]);
        assert_eq!(g.data(), &[25., 47., 69.]);
    }

    #[test]
    fn rich_broadcast_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 1]);
        assert!(broadcast_shape("add", a.shape(), b.shape()).is_err());
    }
}
