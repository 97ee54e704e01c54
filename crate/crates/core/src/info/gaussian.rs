//! Closed-form Gaussian total correlation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A multivariate Gaussian given by mean and covariance. The covariance
/// must be symmetric to 1e-12 and positive definite (Cholesky succeeds).
#[derive(Clone, Debug)]
pub struct GaussianJoint {
    mean: Vec<f64>,
    cov: Tensor,
    chol: Tensor,
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
fn cholesky(a: &Tensor) -> Result<Tensor> {
    let d = a.rows();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a.data()[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::NotPositiveDefinite { index: i, pivot: s });
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Tensor::new(vec![d, d], l)
}

impl GaussianJoint {
    pub fn new(mean: Vec<f64>, cov: Tensor) -> Result<Self> {
        if cov.rank() != 2 || cov.rows() != cov.cols() || cov.rows() != mean.len() {
            return Err(Error::ShapeMismatch {
                op: "GaussianJoint::new",
                lhs: cov.shape().to_vec(),
                rhs: vec![mean.len(), mean.len()],
            });
        }
        let d = cov.rows();
        for i in 0..d {
            for j in 0..i {
                if (cov.data()[i * d + j] - cov.data()[j * d + i]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "covariance not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let chol = cholesky(&cov)?;
        Ok(GaussianJoint { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &Tensor {
        &self.cov
    }

    pub fn ln_det_cov(&self) -> f64 {
        let d = self.dim();
        (0..d).map(|i| 2.0 * self.chol.data()[i * d + i].ln()).sum()
    }

    /// Draw one sample via the Cholesky factor.
    pub fn sample(&self, rng: &mut crate::rng::Rng) -> Vec<f64> {
        let d = self.dim();
        let eps: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let mut out = self.mean.clone();
        for i in 0..d {
            for k in 0..=i {
                out[i] += self.chol.data()[i * d + k] * eps[k];
            }
        }
        out
    }
}

/// Total correlation of a Gaussian in nats:
/// 0.5 (sum_i ln Sigma_ii - ln det Sigma). Zero iff the covariance is
/// diagonal; invariant under per-coordinate scaling.
pub fn gaussian_tc(g: &GaussianJoint) -> f64 {
    let d = g.dim();
    let sum_ln_diag: f64 = (0..d).map(|i| g.cov().data()[i * d + i].ln()).sum();
    0.5 * (sum_ln_diag - g.ln_det_cov())
}
