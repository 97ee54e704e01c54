//! Equal-weight mixtures of one-dimensional Gaussians.
//!
//! The aggregated posterior of a latent dimension, p(z_i) =
//! (1/N) sum_j p(z_i | x_j), is approximated by the mixture of per-example
//! posterior marginals over a subsample of the dataset.

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::estimate::PosteriorSet;

const LN_2PI: f64 = 1.8378770664093453;

/// Equal-weight mixture of 1-D Gaussians.
#[derive(Clone, Debug)]
pub struct GaussMixture1d {
    means: Vec<f64>,
    vars: Vec<f64>,
}

impl GaussMixture1d {
    pub fn new(means: Vec<f64>, vars: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != vars.len() {
            return Err(Error::InvalidArgument(format!(
                "mixture needs matching nonempty components: {} means, {} vars",
                means.len(),
                vars.len()
            )));
        }
        if vars.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidArgument("non-positive component variance".into()));
        }
        Ok(GaussMixture1d { means, vars })
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    pub fn component_means(&self) -> &[f64] {
        &self.means
    }

    pub fn component_vars(&self) -> &[f64] {
        &self.vars
    }

    /// Mixture mean: average of the component means.
    pub fn mean(&self) -> f64 {
        self.means.iter().sum::<f64>() / self.means.len() as f64
    }

    /// Mixture variance by the law of total variance:
    /// mean of variances + variance of means.
    pub fn variance(&self) -> f64 {
        let n = self.means.len() as f64;
        let m = self.mean();
        let within = self.vars.iter().sum::<f64>() / n;
        let between = self.means.iter().map(|&mu| (mu - m) * (mu - m)).sum::<f64>() / n;
        within + between
    }

    /// Log-density ln (1/n) sum_j N(z; mu_j, var_j), max-shifted.
    pub fn log_density(&self, z: f64) -> f64 {
        let n = self.means.len();
        let mut best = f64::NEG_INFINITY;
        let mut comp_lp = Vec::with_capacity(n);
        for j in 0..n {
            let d = z - self.means[j];
            let lp = -0.5 * (LN_2PI + self.vars[j].ln() + d * d / self.vars[j]);
            if lp > best {
                best = lp;
            }
            comp_lp.push(lp);
        }
        let s: f64 = comp_lp.iter().map(|&lp| (lp - best).exp()).sum();
        best + s.ln() - (n as f64).ln()
    }

    pub fn density(&self, z: f64) -> f64 {
        self.log_density(z).exp()
    }

    /// Draw one sample: uniform component, then its Gaussian.
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let j = rng.below(self.means.len());
        self.means[j] + self.vars[j].sqrt() * rng.normal()
    }
}

/// Fit the aggregated marginal of latent dimension `dim` from encoder
/// posteriors over a dataset, using an equal-weight mixture of a subsample
/// of `n` per-example posterior components.
pub fn fit_aggregated_marginal(
    post: &PosteriorSet,
    dim: usize,
    subsample: usize,
    rng: &mut Rng,
) -> Result<GaussMixture1d> {
    let n = post.len();
    if n == 0 {
        return Err(Error::InvalidArgument("fit_aggregated_marginal: empty dataset".into()));
    }
    if subsample > n {
        return Err(Error::InvalidArgument(format!(
            "subsample {subsample} exceeds dataset size {n}"
        )));
    }
    let idx = if subsample == n {
        (0..n).collect::<Vec<_>>()
    } else {
        rng.sample_indices(n, subsample)
    };
    let mut means = Vec::with_capacity(idx.len());
    let mut vars = Vec::with_capacity(idx.len());
    for &j in &idx {
        means.push(post.mean(j, dim));
        vars.push(post.var(j, dim));
    }
    GaussMixture1d::new(means, vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn bimodal() -> GaussMixture1d {
        GaussMixture1d::new(vec![1.0, -1.0], vec![0.01, 0.01]).unwrap()
    }

    #[test]
    fn single_point_mixture_is_that_posterior() {
        let means = Tensor::new(vec![1, 2], vec![0.7, -0.3]).unwrap();
        let vars = Tensor::new(vec![1, 2], vec![0.5, 2.0]).unwrap();
        let post = PosteriorSet::new(means, vars).unwrap();
        let mut rng = Rng::new(1).stream(1);
        let mix = fit_aggregated_marginal(&post, 0, 1, &mut rng).unwrap();
        assert_eq!(mix.n_components(), 1);
        assert_eq!(mix.mean(), 0.7);
        assert_eq!(mix.variance(), 0.5);
    }

    #[test]
    fn total_variance_matches_empirical() {
        let mix = bimodal();
        assert!((mix.variance() - 1.01).abs() < 1e-12);

        let mut rng = Rng::new(2).stream(5);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| mix.sample(&mut rng)).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|z| (z - m) * (z - m)).sum::<f64>() / (n - 1) as f64;
        assert!((v - mix.variance()).abs() / mix.variance() < 0.02, "empirical {v}");
    }

    #[test]
    fn density_integrates_to_one() {
        // trapezoid oracle on [-10, 10]
        let mix = GaussMixture1d::new(vec![0.4, -2.0, 1.2], vec![0.5, 1.3, 0.2]).unwrap();
        let steps = 20_000;
        let (lo, hi) = (-10.0, 10.0);
        let h = (hi - lo) / steps as f64;
        let mut integral = 0.5 * (mix.density(lo) + mix.density(hi));
        for k in 1..steps {
            integral += mix.density(lo + k as f64 * h);
        }
        integral *= h;
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
    }

    #[test]
    fn subsample_larger_than_dataset_rejected() {
        let means = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let vars = Tensor::ones(&[2, 1]);
        let post = PosteriorSet::new(means, vars).unwrap();
        let mut rng = Rng::new(3).stream(1);
        assert!(fit_aggregated_marginal(&post, 0, 3, &mut rng).is_err());
    }
}
