//! Latent and likelihood distributions: diagonal Gaussians, factorized
//! Bernoullis, and categoricals.
//!
//! Each family comes in two forms that share the same formulas:
//! plain-tensor methods on the structs (estimators, reports, tests) and
//! tape functions in [`diff`] (training objectives, where gradients must
//! flow to the parameter heads).

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{softplus, Tape, Value};
use crate::tensor::Tensor;

pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);
pub const LOGIT_CLAMP: (f64, f64) = (-15.0, 15.0);

const LN_2PI: f64 = 1.8378770664093453;

/// Diagonal Gaussian over a batch: mean and log-variance, both `[batch, m]`.
/// Log-variance is clamped to [-10, 10] at construction so `exp` stays in
/// a safe f64 range.
#[derive(Clone, Debug)]
pub struct DiagGaussian {
    mean: Tensor,
    log_var: Tensor,
}

impl DiagGaussian {
    pub fn new(mean: Tensor, log_var: Tensor) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(Error::ShapeMismatch {
                op: "DiagGaussian::new",
                lhs: mean.shape().to_vec(),
                rhs: log_var.shape().to_vec(),
            });
        }
        let log_var = log_var.map(|v| v.clamp(LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1));
        Ok(DiagGaussian { mean, log_var })
    }

    pub fn standard(shape: &[usize]) -> Self {
        DiagGaussian {
            mean: Tensor::zeros(shape),
            log_var: Tensor::zeros(shape),
        }
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn log_var(&self) -> &Tensor {
        &self.log_var
    }

    /// Per-dimension KL(q || N(0, 1)): 0.5 (mu^2 + sigma^2 - 1 - ln sigma^2).
    pub fn kl_std(&self) -> Tensor {
        self.mean
            .zip(&self.log_var, "kl_std", |m, lv| {
                0.5 * (m * m + lv.exp() - 1.0 - lv)
            })
            .expect("shapes checked at construction")
    }

    /// Per-dimension KL(q || r) for two diagonal Gaussians.
    pub fn kl_general(&self, r: &DiagGaussian) -> Result<Tensor> {
        if self.mean.shape() != r.mean.shape() {
            return Err(Error::ShapeMismatch {
                op: "kl_general",
                lhs: self.mean.shape().to_vec(),
                rhs: r.mean.shape().to_vec(),
            });
        }
        let n = self.mean.len();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let (mq, lq) = (self.mean.data()[i], self.log_var.data()[i]);
            let (mr, lr) = (r.mean.data()[i], r.log_var.data()[i]);
            let (vq, vr) = (lq.exp(), lr.exp());
            let d = mq - mr;
            data.push(0.5 * (lr - lq + (vq + d * d) / vr - 1.0));
        }
        Tensor::new(self.mean.shape().to_vec(), data)
    }

    /// Per-dimension log-density of `x` under the Gaussian.
    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.mean.shape() {
            return Err(Error::ShapeMismatch {
                op: "gauss_log_prob",
                lhs: self.mean.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let n = x.len();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let (m, lv) = (self.mean.data()[i], self.log_var.data()[i]);
            let d = x.data()[i] - m;
            data.push(-0.5 * (LN_2PI + lv + d * d * (-lv).exp()));
        }
        Tensor::new(x.shape().to_vec(), data)
    }

    /// `n_samples` reparameterized draws, shape `[n, batch, m]`:
    /// z = mu + sigma * eps with eps ~ N(0, 1).
    pub fn sample(&self, rng: &mut Rng, n_samples: usize) -> Tensor {
        let b = self.mean.len();
        let mut data = Vec::with_capacity(n_samples * b);
        for _ in 0..n_samples {
            for i in 0..b {
                let sigma = (0.5 * self.log_var.data()[i]).exp();
                data.push(self.mean.data()[i] + sigma * rng.normal());
            }
        }
        let mut shape = vec![n_samples];
        shape.extend_from_slice(self.mean.shape());
        Tensor::new(shape, data).expect("shape/product invariant")
    }
}

/// Factorized Bernoulli over a batch, parameterized by logits `[batch, d]`
/// clamped to [-15, 15] so probabilities stay strictly inside (0, 1).
#[derive(Clone, Debug)]
pub struct BernoulliVec {
    logits: Tensor,
}

impl BernoulliVec {
    pub fn new(logits: Tensor) -> Self {
        BernoulliVec {
            logits: logits.map(|v| v.clamp(LOGIT_CLAMP.0, LOGIT_CLAMP.1)),
        }
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn probs(&self) -> Tensor {
        self.logits.map(crate::tape::sigmoid)
    }

    /// Per-dimension log-likelihood of binary `x`, in the stable softplus
    /// form x * l - softplus(l).
    pub fn log_prob(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.logits.shape() {
            return Err(Error::ShapeMismatch {
                op: "bernoulli_log_prob",
                lhs: self.logits.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        if x.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(
                "bernoulli_log_prob: x must be binary".into(),
            ));
        }
        x.zip(&self.logits, "bernoulli_log_prob", |xv, l| {
            xv * l - softplus(l)
        })
    }
}

/// Categorical over K classes per row, parameterized by logits `[batch, K]`.
#[derive(Clone, Debug)]
pub struct CategoricalDist {
    logits: Tensor,
}

impl CategoricalDist {
    pub fn new(logits: Tensor) -> Self {
        CategoricalDist { logits }
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn k(&self) -> usize {
        self.logits.cols()
    }

    /// Softmax probabilities and per-row entropy (nats), both computed
    /// through the max-shifted log-sum-exp.
    pub fn posterior(&self) -> (Tensor, Tensor) {
        let (n, k) = (self.logits.rows(), self.logits.cols());
        let mut probs = Vec::with_capacity(n * k);
        let mut ent = Vec::with_capacity(n);
        for i in 0..n {
            let row = self.logits.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            let mut h = 0.0;
            for &l in row {
                let lp = l - lse;
                let p = lp.exp();
                probs.push(p);
                if p > 0.0 {
                    h -= p * lp;
                }
            }
            ent.push(h);
        }
        (
            Tensor::new(vec![n, k], probs).expect("shape/product invariant"),
            Tensor::new(vec![n], ent).expect("shape/product invariant"),
        )
    }

    /// Row-wise argmax with ties broken by lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.logits.rows())
            .map(|i| {
                let row = self.logits.row(i);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Tape (differentiable) counterparts of the closed forms above.
pub mod diff {
    use super::*;

    /// Clamp a raw log-variance head into the safe range.
    pub fn clamp_log_var(tape: &mut Tape, raw: Value) -> Value {
        tape.clamp(raw, LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1)
    }

    /// Per-dimension KL(q || N(0,1)) on the tape.
    pub fn gauss_kl_std(tape: &mut Tape, mean: Value, log_var: Value) -> Result<Value> {
        let m2 = tape.square(mean);
        let var = tape.exp(log_var);
        let s = tape.add(m2, var)?;
        let s = tape.sub(s, log_var)?;
        let s = tape.add_scalar(s, -1.0);
        Ok(tape.mul_scalar(s, 0.5))
    }

    /// z = mu + exp(log_var / 2) * eps, with `eps` a constant noise tensor.
    pub fn reparam(tape: &mut Tape, mean: Value, log_var: Value, eps: &Tensor) -> Result<Value> {
        let half = tape.mul_scalar(log_var, 0.5);
        let sigma = tape.exp(half);
        let e = tape.leaf(eps.clone());
        let scaled = tape.mul(sigma, e)?;
        tape.add(mean, scaled)
    }

    /// Per-dimension Bernoulli log-likelihood of a constant binary target.
    pub fn bernoulli_log_prob(tape: &mut Tape, logits: Value, x: &Tensor) -> Result<Value> {
        if x.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(
                "bernoulli_log_prob: x must be binary".into(),
            ));
        }
        let l = tape.clamp(logits, LOGIT_CLAMP.0, LOGIT_CLAMP.1);
        let xv = tape.leaf(x.clone());
        let xl = tape.mul(xv, l)?;
        let sp = tape.softplus(l);
        tape.sub(xl, sp)
    }

    /// Per-dimension Gaussian log-density; `x` may itself be a tape value
    /// (sampled latents in stacked bounds).
    pub fn gauss_log_prob(tape: &mut Tape, mean: Value, log_var: Value, x: Value) -> Result<Value> {
        let d = tape.sub(x, mean)?;
        let d2 = tape.square(d);
        let neg_lv = tape.neg(log_var);
        let prec = tape.exp(neg_lv);
        let quad = tape.mul(d2, prec)?;
        let s = tape.add(quad, log_var)?;
        let s = tape.add_scalar(s, LN_2PI);
        Ok(tape.mul_scalar(s, -0.5))
    }

    /// Per-dimension Gaussian entropy 0.5 ln(2 pi e sigma^2).
    pub fn gauss_entropy(tape: &mut Tape, log_var: Value) -> Value {
        let h = tape.add_scalar(log_var, LN_2PI + 1.0);
        tape.mul_scalar(h, 0.5)
    }
}
