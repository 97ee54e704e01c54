//! Generation and analysis artifacts: prior vs aggregated-marginal
//! sampling, latent traversals, variance/MI reports, and PGM image grids.

mod energy;
mod pgm;

pub use energy::{energy_distance, energy_two_sample, EnergyTest};
pub use pgm::write_pgm_grid;

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::info::{
    estimate_mi_latent, estimate_mi_latent_std, fit_aggregated_marginal, mean_and_se,
    GaussMixture1d, McConfig, MiReport, PosteriorSet,
};
use crate::model::{HierarchicalModel, LayerKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Fitted aggregated-posterior marginals, one per latent dimension of the
/// model's top continuous layer, tied to the parameter snapshot they were
/// fitted against.
#[derive(Clone, Debug)]
pub struct MarginalBank {
    pub dims: Vec<GaussMixture1d>,
    pub subsample: usize,
    pub seed_tag: u64,
    fingerprint: u32,
}

impl MarginalBank {
    /// Fit one mixture per top-continuous-layer dimension from the model's
    /// posteriors over `data`.
    pub fn fit(
        model: &HierarchicalModel,
        data: &Tensor,
        subsample: usize,
        seed_tag: u64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let post = model.posterior_set(data)?;
        let n = subsample.min(post.len());
        let mut dims = Vec::with_capacity(post.n_dims());
        for dim in 0..post.n_dims() {
            dims.push(fit_aggregated_marginal(&post, dim, n, rng)?);
        }
        Ok(MarginalBank {
            dims,
            subsample: n,
            seed_tag,
            fingerprint: model.store.fingerprint(),
        })
    }

    pub fn n_dims(&self) -> usize {
        self.dims.len()
    }

    fn check_model(&self, model: &HierarchicalModel) -> Result<()> {
        if self.fingerprint != model.store.fingerprint() {
            return Err(Error::InvalidArgument(
                "marginal bank was fitted against a different parameter snapshot".into(),
            ));
        }
        Ok(())
    }
}

/// Decode top-prior samples to likelihood means: standard normal for a
/// continuous top layer, uniform categories for a categorical one.
/// Intermediate layers sample their decoder Gaussians.
pub fn sample_prior(model: &HierarchicalModel, n: usize, rng: &mut Rng) -> Result<Tensor> {
    if n == 0 {
        return Ok(Tensor::zeros(&[1, model.input_dim()]).take_rows(&[]));
    }
    let z_top = match model.top_kind() {
        LayerKind::Continuous { width } => rng.standard_normal(&[n, width]),
        LayerKind::Categorical { k } => {
            let mut t = Tensor::zeros(&[n, k]);
            for i in 0..n {
                let c = rng.below(k);
                t.data_mut()[i * k + c] = 1.0;
            }
            t
        }
    };
    let params = model.decode(&z_top, Some(rng))?;
    Ok(params.mean_x())
}

/// Decode draws from the fitted aggregated marginals instead of the prior:
/// each top-continuous dimension is sampled independently from its mixture.
pub fn sample_marginals(
    model: &HierarchicalModel,
    bank: &MarginalBank,
    n: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    bank.check_model(model)?;
    let tc = model.top_continuous_index()?;
    let m = bank.n_dims();
    let mut z = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for (j, mix) in bank.dims.iter().enumerate() {
            z.data_mut()[i * m + j] = mix.sample(rng);
        }
    }
    // decode from the top continuous layer downward
    let mut cur = z;
    for l in (1..=tc).rev() {
        cur = decode_to_below(model, l, &cur, rng)?;
    }
    decode_single_layer(model, 0, &cur)
}

fn decode_single_layer(model: &HierarchicalModel, l: usize, latent: &Tensor) -> Result<Tensor> {
    use crate::nn;
    use crate::tape::Tape;
    let mut tape = Tape::new();
    let bound = nn::bind_params(&mut tape, &model.store);
    let zv = tape.leaf(latent.clone());
    let heads = model.decoder_heads_t(&mut tape, &bound, l, zv)?;
    Ok(match model.likelihood() {
        crate::model::Likelihood::Bernoulli => {
            tape.value(heads["logits"]).map(crate::tape::sigmoid)
        }
        crate::model::Likelihood::Gaussian => tape.value(heads["mean"]).clone(),
    })
}

fn decode_to_below(model: &HierarchicalModel, l: usize, latent: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    use crate::nn;
    use crate::tape::Tape;
    let mut tape = Tape::new();
    let bound = nn::bind_params(&mut tape, &model.store);
    let zv = tape.leaf(latent.clone());
    let heads = model.decoder_heads_t(&mut tape, &bound, l, zv)?;
    let mean = tape.value(heads["mean"]).clone();
    let lv = tape.value(heads["log_var"]).map(|v| {
        v.clamp(crate::dist::LOG_VAR_CLAMP.0, crate::dist::LOG_VAR_CLAMP.1)
    });
    let mut out = mean;
    for i in 0..out.len() {
        out.data_mut()[i] += (0.5 * lv.data()[i]).exp() * rng.normal();
    }
    Ok(out)
}

/// Per-dimension (variance, MI) table plus the cumulative variance curve
/// and the Spearman rank correlation between the two columns.
#[derive(Clone, Debug)]
pub struct VarianceReport {
    /// (dim, mixture variance, mi_nats, mi_se), ordered by dimension.
    pub rows: Vec<(usize, f64, f64, f64)>,
    /// (variance threshold, fraction of dims with variance <= threshold).
    pub cumulative: Vec<(f64, f64)>,
    pub spearman: f64,
}

impl VarianceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dim,variance,mi_nats,mi_se\n");
        for (d, v, mi, se) in &self.rows {
            writeln!(out, "{d},{v},{mi},{se}").expect("string write");
        }
        out
    }

    pub fn cumulative_csv(&self) -> String {
        let mut out = String::from("variance,fraction_at_or_below\n");
        for (v, f) in &self.cumulative {
            writeln!(out, "{v},{f}").expect("string write");
        }
        out
    }
}

/// Build the variance/MI table from a fitted bank and a matching MI report
/// (entries aligned by dimension index).
pub fn variance_report(bank: &MarginalBank, mi: &MiReport) -> Result<VarianceReport> {
    if mi.entries.len() != bank.n_dims() {
        return Err(Error::InvalidArgument(format!(
            "MI report has {} entries for {} bank dimensions",
            mi.entries.len(),
            bank.n_dims()
        )));
    }
    let mut rows = Vec::with_capacity(bank.n_dims());
    for (dim, mixen) in bank.dims.iter().enumerate() {
        let entry = mi
            .entries
            .iter()
            .find(|e| e.dim == dim)
            .ok_or_else(|| Error::InvalidArgument(format!("MI report misses dim {dim}")))?;
        rows.push((dim, mixen.variance(), entry.value_nats, entry.std_err));
    }
    let mut sorted_vars: Vec<f64> = rows.iter().map(|r| r.1).collect();
    sorted_vars.sort_by(f64::total_cmp);
    let n = sorted_vars.len() as f64;
    let cumulative = sorted_vars
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, (i + 1) as f64 / n))
        .collect();
    let spearman = spearman_rank_correlation(
        &rows.iter().map(|r| r.1).collect::<Vec<_>>(),
        &rows.iter().map(|r| r.2).collect::<Vec<_>>(),
    );
    Ok(VarianceReport { rows, cumulative, spearman })
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman_rank_correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da == 0.0 || db == 0.0 {
        0.0
    } else {
        num / (da * db).sqrt()
    }
}

/// Traversal description: which dims to sweep, over what grid.
#[derive(Clone, Debug)]
pub struct TraversalSpec {
    pub dims: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl TraversalSpec {
    pub fn new(dims: Vec<usize>, lo: f64, hi: f64, steps: usize) -> Result<Self> {
        if lo >= hi {
            return Err(Error::InvalidArgument(format!("range [{lo}, {hi}] is empty")));
        }
        if steps < 2 {
            return Err(Error::InvalidArgument("steps must be at least 2".into()));
        }
        Ok(TraversalSpec { dims, lo, hi, steps })
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.steps)
            .map(|k| self.lo + (self.hi - self.lo) * k as f64 / (self.steps - 1) as f64)
            .collect()
    }
}

/// What anchors a traversal row: an encoded data example or a top category.
#[derive(Clone, Debug)]
pub enum TraversalSource {
    /// Encode these rows (mean path) and perturb around their codes.
    Data(Tensor),
    /// Fix the top categorical value and take the decoded mean of the layer
    /// below as the base code.
    Categories(Vec<usize>),
}

/// Image grid: rows x cols images of side^2 pixels each.
#[derive(Clone, Debug)]
pub struct ImageGrid {
    pub rows: usize,
    pub cols: usize,
    pub side: usize,
    /// Row-major list of images, each side^2 long.
    pub images: Vec<Vec<f64>>,
}

/// One grid per target dimension: rows follow the source (seed images or
/// categories), columns sweep the grid values.
pub fn latent_traverse(
    model: &HierarchicalModel,
    spec: &TraversalSpec,
    source: &TraversalSource,
) -> Result<Vec<(usize, ImageGrid)>> {
    spec.dims
        .iter()
        .map(|&dim| Ok((dim, traverse_dim(model, spec, dim, source)?)))
        .collect()
}

/// Sweep one latent dimension: each output row fixes every other coordinate
/// of the code and replaces `dim` with the grid value, decoding to
/// likelihood means.
pub fn traverse_dim(
    model: &HierarchicalModel,
    spec: &TraversalSpec,
    dim: usize,
    source: &TraversalSource,
) -> Result<ImageGrid> {
    let tc = model.top_continuous_index()?;
    let m = match model.layer(tc).kind {
        LayerKind::Continuous { width } => width,
        _ => unreachable!("top_continuous_index returns a continuous layer"),
    };
    if dim >= m {
        return Err(Error::InvalidArgument(format!(
            "traversal dim {dim} out of range for width {m}"
        )));
    }
    let side = (model.input_dim() as f64).sqrt() as usize;
    if side * side != model.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "input dimension {} is not a square image",
            model.input_dim()
        )));
    }

    // base codes, one per output row
    let base: Tensor = match source {
        TraversalSource::Data(x) => {
            let out = model.encode_mean(x)?;
            match &out.layers[tc] {
                crate::model::LayerPost::Cont { mean, .. } => mean.clone(),
                _ => unreachable!(),
            }
        }
        TraversalSource::Categories(cats) => {
            let k = match model.top_kind() {
                LayerKind::Categorical { k } => k,
                _ => {
                    return Err(Error::InvalidArgument(
                        "category traversal requires a categorical top layer".into(),
                    ))
                }
            };
            let mut rows = Vec::with_capacity(cats.len());
            for &c in cats {
                if c >= k {
                    return Err(Error::InvalidArgument(format!("category {c} out of range {k}")));
                }
                // decoded mean of q(z_tc | e_c)
                let one_hot = Tensor::one_hot_rows(1, k, c);
                let below = decode_mean_once(model, model.n_layers() - 1, &one_hot)?;
                rows.push(below.data().to_vec());
            }
            Tensor::from_rows(&rows)?
        }
    };

    let grid = spec.grid();
    let mut images = Vec::with_capacity(base.rows() * grid.len());
    for r in 0..base.rows() {
        for &v in &grid {
            let mut code = base.row(r).to_vec();
            code[dim] = v;
            let z = Tensor::new(vec![1, m], code)?;
            let x = decode_from_layer_mean(model, tc, &z)?;
            images.push(x.data().to_vec());
        }
    }
    Ok(ImageGrid { rows: base.rows(), cols: grid.len(), side, images })
}

fn decode_mean_once(model: &HierarchicalModel, l: usize, latent: &Tensor) -> Result<Tensor> {
    use crate::nn;
    use crate::tape::Tape;
    let mut tape = Tape::new();
    let bound = nn::bind_params(&mut tape, &model.store);
    let zv = tape.leaf(latent.clone());
    let heads = model.decoder_heads_t(&mut tape, &bound, l, zv)?;
    Ok(tape.value(heads["mean"]).clone())
}

/// Decode deterministically (decoder means) from layer `l` down to the
/// likelihood mean of x.
fn decode_from_layer_mean(model: &HierarchicalModel, l: usize, latent: &Tensor) -> Result<Tensor> {
    let mut cur = latent.clone();
    for layer in (0..=l).rev() {
        if layer == 0 {
            return decode_single_layer(model, 0, &cur);
        }
        cur = decode_mean_once(model, layer, &cur)?;
    }
    unreachable!("layer 0 returns")
}

/// Paired tightness comparison per dimension: dataset-mean KL(p(z_i|x) ||
/// fitted mixture) against dataset-mean KL(p(z_i|x) || N(0,1)), with the
/// standard error of the paired difference.
#[derive(Clone, Debug)]
pub struct TightnessRow {
    pub dim: usize,
    pub kl_mixture: f64,
    pub kl_std_normal: f64,
    /// mixture minus standard normal; negative when the mixture is tighter.
    pub diff: f64,
    pub diff_se: f64,
}

pub fn tightness_report(
    post: &PosteriorSet,
    bank: &MarginalBank,
    mc: McConfig,
    rng: &mut Rng,
) -> Result<Vec<TightnessRow>> {
    if bank.n_dims() != post.n_dims() {
        return Err(Error::InvalidArgument(format!(
            "bank has {} dims, posteriors have {}",
            bank.n_dims(),
            post.n_dims()
        )));
    }
    let n = post.len();
    let outer = mc.outer.min(n);
    let mut out = Vec::with_capacity(bank.n_dims());
    for dim in 0..bank.n_dims() {
        let idx = if outer == n {
            (0..n).collect::<Vec<_>>()
        } else {
            rng.sample_indices(n, outer)
        };
        let mix = &bank.dims[dim];
        let mut diffs = Vec::with_capacity(idx.len());
        let mut kl_mix_acc = Vec::with_capacity(idx.len());
        let mut kl_std_acc = Vec::with_capacity(idx.len());
        for &j in &idx {
            let mu = post.mean(j, dim);
            let var = post.var(j, dim);
            let sd = var.sqrt();
            let ln_var = var.ln();
            let mut mc_kl = 0.0;
            for _ in 0..mc.inner {
                let z = mu + sd * rng.normal();
                let d = z - mu;
                let lq = -0.5 * (1.8378770664093453 + ln_var + d * d / var);
                mc_kl += lq - mix.log_density(z);
            }
            mc_kl /= mc.inner as f64;
            let kl_std = post.kl_std(j, dim);
            kl_mix_acc.push(mc_kl);
            kl_std_acc.push(kl_std);
            diffs.push(mc_kl - kl_std);
        }
        let (diff, diff_se) = mean_and_se(&diffs);
        let (kl_mixture, _) = mean_and_se(&kl_mix_acc);
        let (kl_std_normal, _) = mean_and_se(&kl_std_acc);
        out.push(TightnessRow { dim, kl_mixture, kl_std_normal, diff, diff_se });
    }
    Ok(out)
}

/// Convenience: per-dimension MI entries against the bank's mixtures,
/// assembled into a report ordered by dimension.
pub fn mi_report_for_bank(
    post: &PosteriorSet,
    bank: &MarginalBank,
    mc: McConfig,
    rng: &mut Rng,
) -> Result<MiReport> {
    let mut entries = Vec::with_capacity(bank.n_dims());
    for dim in 0..bank.n_dims() {
        entries.push(estimate_mi_latent(post, dim, &bank.dims[dim], mc, rng)?);
    }
    MiReport::new(entries)
}

/// Dataset-mean closed-form KL to the standard normal per dimension (the
/// untightened variant of the same report).
pub fn mi_report_std_normal(post: &PosteriorSet, outer: usize, rng: &mut Rng) -> Result<MiReport> {
    let mut entries = Vec::with_capacity(post.n_dims());
    for dim in 0..post.n_dims() {
        entries.push(estimate_mi_latent_std(post, dim, outer, rng)?);
    }
    MiReport::new(entries)
}
