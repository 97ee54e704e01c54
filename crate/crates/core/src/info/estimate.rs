//! Per-dimension mutual-information estimators and their report format.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::mixture::GaussMixture1d;

const LN_2PI: f64 = 1.8378770664093453;

/// Per-example diagonal-Gaussian posteriors over a dataset: means and
/// variances, both `[n, m]`. This is the interface between trained encoders
/// and the estimators here.
#[derive(Clone, Debug)]
pub struct PosteriorSet {
    means: Tensor,
    vars: Tensor,
}

impl PosteriorSet {
    pub fn new(means: Tensor, vars: Tensor) -> Result<Self> {
        if means.shape() != vars.shape() || means.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "PosteriorSet::new",
                lhs: means.shape().to_vec(),
                rhs: vars.shape().to_vec(),
            });
        }
        if vars.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument("non-positive posterior variance".into()));
        }
        Ok(PosteriorSet { means, vars })
    }

    pub fn len(&self) -> usize {
        self.means.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_dims(&self) -> usize {
        self.means.cols()
    }

    pub fn mean(&self, example: usize, dim: usize) -> f64 {
        self.means.row(example)[dim]
    }

    pub fn var(&self, example: usize, dim: usize) -> f64 {
        self.vars.row(example)[dim]
    }

    /// Closed-form KL(p(z_i|x_j) || N(0,1)) for one example and dimension.
    pub fn kl_std(&self, example: usize, dim: usize) -> f64 {
        let m = self.mean(example, dim);
        let v = self.var(example, dim);
        0.5 * (m * m + v - 1.0 - v.ln())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    /// Enumeration or closed form; zero sampling error.
    Exact,
    /// Monte Carlo KL to the aggregated-posterior mixture.
    McMixture,
    /// Variational lower bound (may sit below the true value).
    Bound,
}

impl Estimator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::Exact => "exact",
            Estimator::McMixture => "mc-mixture",
            Estimator::Bound => "bound",
        }
    }
}

/// One per-dimension mutual-information estimate.
#[derive(Clone, Debug)]
pub struct MiEntry {
    pub dim: usize,
    pub estimator: Estimator,
    pub value_nats: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Collection of per-dimension estimates; serializes to CSV.
#[derive(Clone, Debug, Default)]
pub struct MiReport {
    pub entries: Vec<MiEntry>,
}

impl MiReport {
    pub fn new(entries: Vec<MiEntry>) -> Result<Self> {
        for e in &entries {
            if e.std_err < 0.0 {
                return Err(Error::InvalidArgument("negative standard error".into()));
            }
            if e.estimator == Estimator::Exact && e.std_err != 0.0 {
                return Err(Error::InvalidArgument(
                    "exact estimates must carry zero standard error".into(),
                ));
            }
        }
        Ok(MiReport { entries })
    }

    pub fn sorted_desc(&self) -> MiReport {
        let mut entries = self.entries.clone();
        entries.sort_by(|a, b| b.value_nats.total_cmp(&a.value_nats));
        MiReport { entries }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,estimator,value_nats,std_err,samples\n");
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{}",
                e.dim,
                e.estimator.as_str(),
                e.value_nats,
                e.std_err,
                e.samples
            )
            .expect("string write");
        }
        out
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Monte Carlo sample counts for the latent-side estimator.
#[derive(Clone, Copy, Debug)]
pub struct McConfig {
    /// Number of data points averaged over (outer loop); capped at the
    /// dataset size.
    pub outer: usize,
    /// Posterior draws per data point (inner loop).
    pub inner: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { outer: 1024, inner: 256 }
    }
}

/// Estimate I(x : z_i) = E_x KL(p(z_i|x) || p(z_i)) with the aggregated
/// marginal standing in for p(z_i): for each sampled data point, draw from
/// the posterior and average the log-density ratio against the mixture.
pub fn estimate_mi_latent(
    post: &PosteriorSet,
    dim: usize,
    mix: &GaussMixture1d,
    mc: McConfig,
    rng: &mut Rng,
) -> Result<MiEntry> {
    if post.is_empty() {
        return Err(Error::InvalidArgument("estimate_mi_latent: empty posterior set".into()));
    }
    let n = post.len();
    let outer = mc.outer.min(n);
    let idx = if outer == n {
        (0..n).collect::<Vec<_>>()
    } else {
        rng.sample_indices(n, outer)
    };
    let mut per_example = Vec::with_capacity(idx.len());
    for &j in &idx {
        let mu = post.mean(j, dim);
        let var = post.var(j, dim);
        let sd = var.sqrt();
        let ln_var = var.ln();
        let mut acc = 0.0;
        for _ in 0..mc.inner {
            let z = mu + sd * rng.normal();
            let d = z - mu;
            let lq = -0.5 * (LN_2PI + ln_var + d * d / var);
            acc += lq - mix.log_density(z);
        }
        per_example.push(acc / mc.inner as f64);
    }
    let (value, se) = mean_and_se(&per_example);
    Ok(MiEntry {
        dim,
        estimator: Estimator::McMixture,
        value_nats: value,
        std_err: se,
        samples: idx.len() * mc.inner,
    })
}

/// Dataset-mean closed-form KL(p(z_i|x) || N(0,1)): the standard-normal
/// instance of the same upper bound, with sampling error only across
/// examples.
pub fn estimate_mi_latent_std(post: &PosteriorSet, dim: usize, outer: usize, rng: &mut Rng) -> Result<MiEntry> {
    if post.is_empty() {
        return Err(Error::InvalidArgument("estimate_mi_latent_std: empty posterior set".into()));
    }
    let n = post.len();
    let outer = outer.min(n);
    let idx = if outer == n {
        (0..n).collect::<Vec<_>>()
    } else {
        rng.sample_indices(n, outer)
    };
    let vals: Vec<f64> = idx.iter().map(|&j| post.kl_std(j, dim)).collect();
    let (value, se) = mean_and_se(&vals);
    Ok(MiEntry {
        dim,
        estimator: Estimator::McMixture,
        value_nats: value,
        std_err: se,
        samples: idx.len(),
    })
}

/// Lower bound on I(x_i : z) from the decoder side:
/// H(x_i) + <ln q(x_i | z)> under encoder samples. `ln_q_draw(j, rng)` must
/// return one Monte Carlo draw of ln q(x_i | z) for data point `j` with
/// z ~ p(z|x_j). When `entropy_xi` is unknown (continuous data) the bound
/// is reported up to that constant and flagged.
pub fn estimate_mi_input(
    mut ln_q_draw: impl FnMut(usize, &mut Rng) -> f64,
    n_examples: usize,
    entropy_xi: Option<f64>,
    dim: usize,
    mc: McConfig,
    rng: &mut Rng,
) -> Result<MiEntry> {
    if n_examples == 0 {
        return Err(Error::InvalidArgument("estimate_mi_input: empty dataset".into()));
    }
    let outer = mc.outer.min(n_examples);
    let idx = if outer == n_examples {
        (0..n_examples).collect::<Vec<_>>()
    } else {
        rng.sample_indices(n_examples, outer)
    };
    let mut per_example = Vec::with_capacity(idx.len());
    for &j in &idx {
        let mut acc = 0.0;
        for _ in 0..mc.inner {
            acc += ln_q_draw(j, rng);
        }
        per_example.push(acc / mc.inner as f64);
    }
    let (recon, se) = mean_and_se(&per_example);
    let value = entropy_xi.unwrap_or(0.0) + recon;
    Ok(MiEntry {
        dim,
        estimator: Estimator::Bound,
        value_nats: value,
        std_err: se,
        samples: idx.len() * mc.inner,
    })
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
