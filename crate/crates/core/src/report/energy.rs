//! Two-sample energy-distance test with a permutation-calibrated threshold.
//!
//! The scaled statistic T = (nm / (n+m)) * (2 E||X-Y|| - E||X-X'|| -
//! E||Y-Y'||) converges to a fixed null distribution, so the threshold is
//! calibrated by permuting pooled subsamples. A distance matrix over the
//! pooled subsample keeps each permutation cheap; the subsample cap bounds
//! memory at a few tens of megabytes.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Unscaled energy distance between two samples of d-vectors.
pub fn energy_distance(xs: &Tensor, ys: &Tensor) -> Result<f64> {
    if xs.cols() != ys.cols() {
        return Err(Error::ShapeMismatch {
            op: "energy_distance",
            lhs: xs.shape().to_vec(),
            rhs: ys.shape().to_vec(),
        });
    }
    let (n, m) = (xs.rows(), ys.rows());
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("energy_distance: empty sample".into()));
    }
    let mut xy = 0.0;
    for i in 0..n {
        for j in 0..m {
            xy += dist(xs.row(i), ys.row(j));
        }
    }
    let mut xx = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            xx += dist(xs.row(i), xs.row(j));
        }
    }
    let mut yy = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            yy += dist(ys.row(i), ys.row(j));
        }
    }
    Ok(2.0 * xy / (n as f64 * m as f64)
        - 2.0 * xx / (n as f64 * n as f64)
        - 2.0 * yy / (m as f64 * m as f64))
}

#[inline]
fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug)]
pub struct EnergyTest {
    /// Scaled statistic on the (subsampled) observed split.
    pub statistic: f64,
    /// Permutation 1 - alpha quantile under the pooled null.
    pub threshold: f64,
    pub alpha: f64,
    /// Samples per group actually used after subsampling.
    pub used_per_group: usize,
    /// True when the statistic does not exceed the threshold: the two
    /// samples are consistent with one distribution at level alpha.
    pub same_distribution: bool,
}

/// Permutation two-sample test at level `alpha`. Groups larger than
/// `max_per_group` are subsampled once up front; the permutation null
/// reuses a precomputed pooled distance matrix.
pub fn energy_two_sample(
    xs: &Tensor,
    ys: &Tensor,
    alpha: f64,
    n_permutations: usize,
    max_per_group: usize,
    rng: &mut Rng,
) -> Result<EnergyTest> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
    }
    let keep_x = xs.rows().min(max_per_group);
    let keep_y = ys.rows().min(max_per_group);
    let xi = rng.sample_indices(xs.rows(), keep_x);
    let yi = rng.sample_indices(ys.rows(), keep_y);
    let xs = xs.take_rows(&xi);
    let ys = ys.take_rows(&yi);
    let (n, m) = (xs.rows(), ys.rows());

    // pooled distance matrix
    let total = n + m;
    let mut pooled = Vec::with_capacity(total);
    for i in 0..n {
        pooled.push(xs.row(i).to_vec());
    }
    for j in 0..m {
        pooled.push(ys.row(j).to_vec());
    }
    let mut dmat = vec![0.0f64; total * total];
    for i in 0..total {
        for j in (i + 1)..total {
            let d = dist(&pooled[i], &pooled[j]);
            dmat[i * total + j] = d;
            dmat[j * total + i] = d;
        }
    }

    let scaled_stat = |idx: &[usize]| -> f64 {
        // first n indices form group A, the rest group B
        let (a, b) = idx.split_at(n);
        let mut xy = 0.0;
        for &i in a {
            for &j in b {
                xy += dmat[i * total + j];
            }
        }
        let mut xx = 0.0;
        for (p, &i) in a.iter().enumerate() {
            for &j in &a[p + 1..] {
                xx += dmat[i * total + j];
            }
        }
        let mut yy = 0.0;
        for (p, &i) in b.iter().enumerate() {
            for &j in &b[p + 1..] {
                yy += dmat[i * total + j];
            }
        }
        let e = 2.0 * xy / (n as f64 * m as f64)
            - 2.0 * xx / (n as f64 * n as f64)
            - 2.0 * yy / (m as f64 * m as f64);
        (n as f64 * m as f64 / total as f64) * e
    };

    let identity: Vec<usize> = (0..total).collect();
    let statistic = scaled_stat(&identity);

    let mut null = Vec::with_capacity(n_permutations);
    let mut perm = identity;
    for _ in 0..n_permutations {
        rng.shuffle(&mut perm);
        null.push(scaled_stat(&perm));
    }
    null.sort_by(f64::total_cmp);
    let rank = ((1.0 - alpha) * (n_permutations as f64 + 1.0)).ceil() as usize;
    let threshold = null[rank.min(n_permutations).saturating_sub(1)];

    Ok(EnergyTest {
        statistic,
        threshold,
        alpha,
        used_per_group: n.min(m),
        same_distribution: statistic <= threshold,
    })
}
