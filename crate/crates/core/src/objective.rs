//! Differentiable training objectives.
//!
//! The single-layer bound maximized here is
//!
//! ```text
//!   sum_i H(x_i) + sum_i <ln q(x_i|z)> - sum_i w_i KL(p(z_i|x) || r(z_i))
//! ```
//!
//! which lower-bounds the total correlation explained by the latents. With
//! all weights at one it is the ELBO shifted by the constant entropy term;
//! anchoring lowers individual w_i so those latents may carry more
//! information. Stacked models telescope the same bound through the layers:
//! intermediate layers contribute their reconstruction plus posterior
//! entropy and only the top layer pays a KL to its prior.

use crate::dist::diff;
use crate::error::{Error, Result};
use crate::info::GaussMixture1d;
use crate::model::{HierarchicalModel, LayerKind, LayerPostT, TargetT};
use crate::nn::{self, BoundParams};
use crate::rng::Rng;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum PriorKind {
    #[default]
    StandardNormal,
    /// Per-dimension aggregated-posterior mixtures; the KL term is then
    /// estimated from the same reparameterized samples as the
    /// reconstruction.
    FittedMarginal,
}

#[derive(Clone, Debug, Default)]
pub struct ObjectiveConfig {
    /// Per-latent KL weights on the top layer, all 1 when absent.
    /// Anchored dimensions use w_i = 1 - lambda.
    pub kl_weights: Option<Vec<f64>>,
    pub prior: PriorKind,
    /// Mixtures backing `PriorKind::FittedMarginal`, one per top latent dim.
    pub marginals: Option<Vec<GaussMixture1d>>,
    /// Reparameterization draws per example; 1 for training, more for
    /// low-variance evaluation.
    pub mc_samples: usize,
    /// Per-dimension data entropies H(x_i) in nats. Present: the bound is
    /// anchored to ground truth and comparable to TC(x). Absent: the offset
    /// is a constant left out (continuous data without known entropies).
    pub entropy_offsets: Option<Vec<f64>>,
}

impl ObjectiveConfig {
    pub fn training() -> Self {
        ObjectiveConfig { mc_samples: 1, ..Default::default() }
    }

    pub fn eval() -> Self {
        ObjectiveConfig { mc_samples: 64, ..Default::default() }
    }

    pub fn with_weights(mut self, w: Vec<f64>) -> Self {
        self.kl_weights = Some(w);
        self
    }

    pub fn with_offsets(mut self, h: Vec<f64>) -> Self {
        self.entropy_offsets = Some(h);
        self
    }

    /// Weight vector from anchor indices: anchored dims get 1 - lambda.
    pub fn anchor_weights(m: usize, anchors: &[usize], lambda: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
        }
        let mut w = vec![1.0; m];
        for &a in anchors {
            if a >= m {
                return Err(Error::InvalidArgument(format!("anchor dim {a} out of range {m}")));
            }
            w[a] = 1.0 - lambda;
        }
        Ok(w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EntropyOffset {
    Included(f64),
    ConstantOmitted,
}

impl EntropyOffset {
    pub fn value(&self) -> f64 {
        match self {
            EntropyOffset::Included(v) => *v,
            EntropyOffset::ConstantOmitted => 0.0,
        }
    }
}

/// Evaluated objective: the scalar node for backprop plus diagnostics.
#[derive(Debug)]
pub struct ObjectiveValue {
    /// Bound value including the entropy offset when available.
    pub total: f64,
    /// Scalar tape node (excludes the constant offset).
    pub total_node: Value,
    /// Per-example totals (offset included); mean equals `total`.
    pub per_example_total: Vec<f64>,
    /// Per input dimension <ln q(x_i|z)>.
    pub reconstruction: Vec<f64>,
    /// Per top-layer latent dimension KL (unweighted); a single entry for a
    /// categorical top layer.
    pub kl: Vec<f64>,
    /// KL weights in effect (matches `kl`).
    pub kl_weights: Vec<f64>,
    /// Estimated per-layer objectives L(theta_l; z_{l-1}), layer 0 first.
    pub per_layer_gain: Vec<f64>,
    pub per_layer_gain_se: Vec<f64>,
    /// Per-example per-layer gains backing the summaries, `[layer][example]`.
    pub per_layer_gain_pe: Vec<Vec<f64>>,
    pub entropy_offset: EntropyOffset,
}

impl ObjectiveValue {
    pub fn total_se(&self) -> f64 {
        crate::info::mean_and_se(&self.per_example_total).1
    }
}

fn weights_for_top(model: &HierarchicalModel, cfg: &ObjectiveConfig) -> Result<Vec<f64>> {
    let top = model.n_layers() - 1;
    let width = match model.layer(top).kind {
        LayerKind::Continuous { width } => width,
        LayerKind::Categorical { .. } => 1,
    };
    match &cfg.kl_weights {
        None => Ok(vec![1.0; width]),
        Some(w) => {
            if w.len() != width {
                return Err(Error::InvalidArgument(format!(
                    "kl_weights has {} entries, top layer has {width}",
                    w.len()
                )));
            }
            if w.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidArgument("kl_weights outside [0, 1]".into()));
            }
            Ok(w.clone())
        }
    }
}

/// One Monte Carlo bound evaluation shared by every public objective.
struct PassTerms {
    /// Per-example total bound contribution `[n]` (no offset).
    total_pe: Value,
    /// Per-input-dimension reconstruction `[n, d]`.
    recon_x: Value,
    /// Per-dim unweighted top KL values `[n, m_top]` (or `[n, 1]`).
    kl_top: Value,
    /// Per-example per-layer gains (value side, offset-free for layer 0).
    gain_pe: Vec<Vec<f64>>,
}

fn one_pass(
    tape: &mut Tape,
    model: &HierarchicalModel,
    bound: &BoundParams,
    batch: &Tensor,
    weights: &[f64],
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<PassTerms> {
    let n = batch.rows();
    let l_count = model.n_layers();
    let x = tape.leaf(batch.clone());
    let mut noise = |shape: &[usize]| rng.standard_normal(shape);
    let posts = model.encode_t(tape, bound, x, &mut noise)?;

    // reconstruction of each layer's input by its decoder, plus posterior
    // entropies of every non-top layer
    let mut recon_x: Option<Value> = None;
    let mut kl_top: Option<Value> = None;
    let mut total_pe: Option<Value> = None;
    let mut gain_pe: Vec<Vec<f64>> = Vec::with_capacity(l_count);

    let mut add_pe = |tape: &mut Tape, acc: Option<Value>, v: Value| -> Result<Option<Value>> {
        Ok(Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        }))
    };

    for l in 0..l_count {
        let is_top = l + 1 == l_count;
        let target = if l == 0 {
            TargetT::Data(batch)
        } else {
            match &posts[l - 1] {
                LayerPostT::Cont { z, .. } => TargetT::Node(*z),
                LayerPostT::Cat { .. } => unreachable!("categorical below top rejected"),
            }
        };

        // entropy bonus of the layer below (the -<ln p> surrogate for its
        // marginal entropies), and this layer's own entropy if non-top
        match &posts[l] {
            LayerPostT::Cont { mean, log_var, z } => {
                let recon = model.layer_log_prob_t(tape, bound, l, *z, &target)?;
                let recon_pe = tape.sum_axis(recon, 1)?;
                total_pe = add_pe(tape, total_pe, recon_pe)?;

                let kl = diff::gauss_kl_std(tape, *mean, *log_var)?;
                let h = diff::gauss_entropy(tape, *log_var);
                let h_pe = tape.sum_axis(h, 1)?;

                if is_top {
                    let kl_for_total = match cfg.prior {
                        PriorKind::StandardNormal => kl,
                        PriorKind::FittedMarginal => {
                            let mixes = cfg.marginals.as_ref().ok_or_else(|| {
                                Error::InvalidArgument(
                                    "FittedMarginal prior requires cfg.marginals".into(),
                                )
                            })?;
                            sampled_mixture_kl(tape, *mean, *log_var, *z, mixes)?
                        }
                    };
                    let wv = tape.leaf(Tensor::new(vec![weights.len()], weights.to_vec())?);
                    let weighted = tape.mul(kl_for_total, wv)?;
                    let w_pe = tape.sum_axis(weighted, 1)?;
                    let neg = tape.neg(w_pe);
                    total_pe = add_pe(tape, total_pe, neg)?;
                    kl_top = Some(kl_for_total);
                } else {
                    // intermediate layer: entropy enters the total
                    total_pe = add_pe(tape, total_pe, h_pe)?;
                }

                // gain_l = [entropy term] + rowsum(recon) - rowsum(kl vs std);
                // layer 0's entropy term is the data offset added later
                let kl_pe = tape.sum_axis(kl, 1)?;
                let mut g: Vec<f64> = tape
                    .value(recon_pe)
                    .data()
                    .iter()
                    .zip(tape.value(kl_pe).data())
                    .map(|(r, k)| r - k)
                    .collect();
                if l > 0 {
                    let h_below = batch_marginal_entropy_pe(tape, &posts[l - 1])?;
                    for (gi, hb) in g.iter_mut().zip(h_below) {
                        *gi += hb;
                    }
                }
                gain_pe.push(g);

                if l == 0 {
                    recon_x = Some(recon);
                }
            }
            LayerPostT::Cat { logits } => {
                // categorical top: exact enumeration over the K categories
                let (recon, kl) = model.decode_marginalized_t(tape, bound, *logits, &target)?;
                let recon_pe = tape.sum_axis(recon, 1)?;
                total_pe = add_pe(tape, total_pe, recon_pe)?;
                let w = weights[0];
                let wkl = tape.mul_scalar(kl, w);
                let neg = tape.neg(wkl);
                total_pe = add_pe(tape, total_pe, neg)?;
                kl_top = Some(tape.reshape(kl, vec![n, 1])?);

                let mut g: Vec<f64> = tape
                    .value(recon_pe)
                    .data()
                    .iter()
                    .zip(tape.value(kl).data())
                    .map(|(r, k)| r - k)
                    .collect();
                if l > 0 {
                    let h_below = batch_marginal_entropy_pe(tape, &posts[l - 1])?;
                    for (gi, hb) in g.iter_mut().zip(h_below) {
                        *gi += hb;
                    }
                }
                gain_pe.push(g);

                if l == 0 {
                    recon_x = Some(recon);
                }
            }
        }
    }

    Ok(PassTerms {
        total_pe: total_pe.expect("at least one layer"),
        recon_x: recon_x.expect("layer 0 always decodes x"),
        kl_top: kl_top.expect("top layer emits a KL"),
        gain_pe,
    })
}

/// Per-example marginal-entropy estimate for the latent below a stacked
/// layer: -ln of the batch-mixture density (1/n) sum_j' N(z_i; mu_i(j'),
/// v_i(j')) at the sampled z, summed over dimensions. The decomposed
/// per-layer objective needs the marginal entropies H(z_i), not the
/// conditional ones; the batch's own posteriors estimate them without any
/// extra sampling.
fn batch_marginal_entropy_pe(tape: &Tape, post: &LayerPostT) -> Result<Vec<f64>> {
    const LN_2PI: f64 = 1.8378770664093453;
    match post {
        LayerPostT::Cont { mean, log_var, z } => {
            let (mu, lv, zs) = (tape.value(*mean), tape.value(*log_var), tape.value(*z));
            let (n, m) = (zs.rows(), zs.cols());
            let ln_n = (n as f64).ln();
            let mut out = vec![0.0; n];
            for i in 0..m {
                // component constants for dimension i
                let comps: Vec<(f64, f64, f64)> = (0..n)
                    .map(|j| {
                        let v = lv.row(j)[i].exp();
                        (mu.row(j)[i], v, -0.5 * (LN_2PI + lv.row(j)[i]))
                    })
                    .collect();
                for (j, slot) in out.iter_mut().enumerate() {
                    let zv = zs.row(j)[i];
                    let mut best = f64::NEG_INFINITY;
                    let lps: Vec<f64> = comps
                        .iter()
                        .map(|&(cmu, cv, cc)| {
                            let d = zv - cmu;
                            let lp = cc - 0.5 * d * d / cv;
                            if lp > best {
                                best = lp;
                            }
                            lp
                        })
                        .collect();
                    let lse = best + lps.iter().map(|lp| (lp - best).exp()).sum::<f64>().ln();
                    *slot -= lse - ln_n;
                }
            }
            Ok(out)
        }
        LayerPostT::Cat { .. } => Err(Error::InvalidArgument(
            "categorical layers appear only at the top".into(),
        )),
    }
}

/// Per-dimension sampled KL against fitted mixtures: ln q(z) - ln mix(z),
/// assembled column by column into an `[n, m]` value.
fn sampled_mixture_kl(
    tape: &mut Tape,
    mean: Value,
    log_var: Value,
    z: Value,
    mixes: &[GaussMixture1d],
) -> Result<Value> {
    let (n, m) = (tape.value(z).rows(), tape.value(z).cols());
    if mixes.len() != m {
        return Err(Error::InvalidArgument(format!(
            "{} fitted marginals for {m} latent dimensions",
            mixes.len()
        )));
    }
    let lq = diff::gauss_log_prob(tape, mean, log_var, z)?;

    // Build ln mix(z_i) for each dim as [n], lift back into [n, m] by
    // scattering through one-hot column masks, then subtract.
    let mut lmix_cols: Option<Value> = None;
    for (i, mix) in mixes.iter().enumerate() {
        let zi = tape.slice_cols(z, i, 1)?;
        let zi = tape.reshape(zi, vec![n])?;
        let j = mix.n_components();
        let mu = tape.leaf(Tensor::new(vec![j], mix.component_means().to_vec())?);
        let d = tape.outer_sub(zi, mu)?;
        let d2 = tape.square(d);
        let inv_var: Vec<f64> = mix.component_vars().iter().map(|v| 1.0 / v).collect();
        let iv = tape.leaf(Tensor::new(vec![j], inv_var)?);
        let quad = tape.mul(d2, iv)?;
        let consts: Vec<f64> = mix
            .component_vars()
            .iter()
            .map(|v| -0.5 * (1.8378770664093453 + v.ln()) - (j as f64).ln())
            .collect();
        let c = tape.leaf(Tensor::new(vec![j], consts)?);
        let quad_half = tape.mul_scalar(quad, -0.5);
        let comp_lp = tape.add(quad_half, c)?;
        let lmix = tape.log_sum_exp(comp_lp, 1)?; // [n]
        let col = tape.reshape(lmix, vec![n, 1])?;
        // widen [n,1] into column i of [n,m] via an outer product with a
        // one-hot mask row, so the per-dim columns can be summed
        let mask = tape.leaf(Tensor::one_hot_rows(1, m, i));
        let widened = tape.matmul(col, mask)?;
        lmix_cols = Some(match lmix_cols {
            None => widened,
            Some(acc) => tape.add(acc, widened)?,
        });
    }
    tape.sub(lq, lmix_cols.expect("at least one latent dim"))
}

fn assemble(
    tape: &mut Tape,
    model: &HierarchicalModel,
    bound: &BoundParams,
    batch: &Tensor,
    weights: Vec<f64>,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<ObjectiveValue> {
    if batch.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if batch.cols() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "objective",
            lhs: batch.shape().to_vec(),
            rhs: vec![batch.rows(), model.input_dim()],
        });
    }
    if let Some(h) = &cfg.entropy_offsets {
        if h.len() != model.input_dim() {
            return Err(Error::InvalidArgument(format!(
                "{} entropy offsets for input dimension {}",
                h.len(),
                model.input_dim()
            )));
        }
    }
    let samples = cfg.mc_samples.max(1);
    let n = batch.rows();
    let mut total_acc: Option<Value> = None;
    let mut recon_acc: Option<Tensor> = None;
    let mut kl_acc: Option<Tensor> = None;
    let mut gain_acc: Vec<Vec<f64>> = Vec::new();

    for s in 0..samples {
        let terms = one_pass(tape, model, bound, batch, &weights, cfg, rng)?;
        total_acc = Some(match total_acc {
            None => terms.total_pe,
            Some(acc) => tape.add(acc, terms.total_pe)?,
        });
        let recon_t = tape.value(terms.recon_x).clone();
        recon_acc = Some(match recon_acc {
            None => recon_t,
            Some(acc) => acc.zip(&recon_t, "recon_acc", |a, b| a + b)?,
        });
        let kl_t = tape.value(terms.kl_top).clone();
        kl_acc = Some(match kl_acc {
            None => kl_t,
            Some(acc) => acc.zip(&kl_t, "kl_acc", |a, b| a + b)?,
        });
        if s == 0 {
            gain_acc = terms.gain_pe;
        } else {
            for (acc, g) in gain_acc.iter_mut().zip(terms.gain_pe) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
    }

    let inv_s = 1.0 / samples as f64;
    let total_pe_node = tape.mul_scalar(total_acc.expect("samples >= 1"), inv_s);
    let total_node = tape.mean_all(total_pe_node);

    let offset = match &cfg.entropy_offsets {
        Some(h) => EntropyOffset::Included(h.iter().sum()),
        None => EntropyOffset::ConstantOmitted,
    };

    let per_example_total: Vec<f64> = tape
        .value(total_pe_node)
        .data()
        .iter()
        .map(|v| v + offset.value())
        .collect();
    let total = tape.value(total_node).item() + offset.value();

    // per-dim diagnostics: mean over batch and samples
    let recon_mat = recon_acc.expect("samples >= 1");
    let d = recon_mat.cols();
    let mut reconstruction = vec![0.0; d];
    for i in 0..recon_mat.rows() {
        for (j, r) in reconstruction.iter_mut().enumerate() {
            *r += recon_mat.row(i)[j];
        }
    }
    for r in &mut reconstruction {
        *r *= inv_s / n as f64;
    }
    let kl_mat = kl_acc.expect("samples >= 1");
    let m = kl_mat.cols();
    let mut kl = vec![0.0; m];
    for i in 0..kl_mat.rows() {
        for (j, k) in kl.iter_mut().enumerate() {
            *k += kl_mat.row(i)[j];
        }
    }
    for k in &mut kl {
        *k *= inv_s / n as f64;
    }

    // per-layer gains: averaged per example over samples, then summarized;
    // layer 0 carries the entropy offset when present
    let mut per_layer_gain = Vec::with_capacity(gain_acc.len());
    let mut per_layer_gain_se = Vec::with_capacity(gain_acc.len());
    let mut per_layer_gain_pe = Vec::with_capacity(gain_acc.len());
    for (l, g) in gain_acc.iter().enumerate() {
        let scaled: Vec<f64> = g
            .iter()
            .map(|v| v * inv_s + if l == 0 { offset.value() } else { 0.0 })
            .collect();
        let (mean, se) = crate::info::mean_and_se(&scaled);
        per_layer_gain.push(mean);
        per_layer_gain_se.push(se);
        per_layer_gain_pe.push(scaled);
    }

    Ok(ObjectiveValue {
        total,
        total_node,
        per_example_total,
        reconstruction,
        kl,
        kl_weights: weights,
        per_layer_gain,
        per_layer_gain_se,
        per_layer_gain_pe,
        entropy_offset: offset,
    })
}

/// Bound evaluation against an explicit parameter binding. Normal training
/// goes through [`corex_bound`] and friends, which bind the model's own
/// store; this entry point lets gradient checks rebuild the binding from a
/// flattened parameter vector.
pub fn bound_with_params(
    tape: &mut Tape,
    model: &HierarchicalModel,
    bound: &BoundParams,
    batch: &Tensor,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<ObjectiveValue> {
    let weights = weights_for_top(model, cfg)?;
    assemble(tape, model, bound, batch, weights, cfg, rng)
}

/// Single-layer variational bound (offset + reconstruction - weighted KL).
pub fn corex_bound(
    tape: &mut Tape,
    model: &HierarchicalModel,
    batch: &Tensor,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<ObjectiveValue> {
    if model.n_layers() != 1 {
        return Err(Error::InvalidArgument(format!(
            "corex_bound expects a single-layer model, got {} layers (use stacked_bound)",
            model.n_layers()
        )));
    }
    let weights = weights_for_top(model, cfg)?;
    let bound = nn::bind_params(tape, &model.store);
    assemble(tape, model, &bound, batch, weights, cfg, rng)
}

/// The VAE evidence lower bound: identical to [`corex_bound`] up to the
/// constant entropy offset, computed from the same reparameterization
/// samples when given the same rng state.
pub fn elbo(
    tape: &mut Tape,
    model: &HierarchicalModel,
    batch: &Tensor,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<(f64, Value)> {
    let v = corex_bound(tape, model, batch, cfg, rng)?;
    Ok((v.total - v.entropy_offset.value(), v.total_node))
}

/// Anchored bound: per-latent KL weights must be configured and lie in
/// [0, 1]; everything else matches [`corex_bound`].
pub fn anchor_bound(
    tape: &mut Tape,
    model: &HierarchicalModel,
    batch: &Tensor,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<ObjectiveValue> {
    if cfg.kl_weights.is_none() {
        return Err(Error::InvalidArgument("anchor_bound requires kl_weights".into()));
    }
    corex_bound(tape, model, batch, cfg, rng)
}

/// Stacked bound over L layers: per-layer reconstructions, posterior
/// entropies for every non-top layer, and the top layer's KL to its prior.
/// Per-layer gain estimates ride along from the same forward pass.
pub fn stacked_bound(
    tape: &mut Tape,
    model: &HierarchicalModel,
    batch: &Tensor,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
) -> Result<ObjectiveValue> {
    let weights = weights_for_top(model, cfg)?;
    let bound = nn::bind_params(tape, &model.store);
    assemble(tape, model, &bound, batch, weights, cfg, rng)
}

/// Gain estimate for one stacked layer, with its depth-decision flag.
#[derive(Clone, Debug)]
pub struct LayerGain {
    /// 1-based layer number (2..=L; layer 1 is the base model).
    pub layer: usize,
    pub gain: f64,
    pub std_err: f64,
    /// gain > 3 standard errors above zero: keep the layer.
    pub positive: bool,
}

/// Monte Carlo per-layer gain estimates over a dataset, batched. Layers
/// above the first are reported (those are the add-or-not decisions); a
/// single-layer model yields an empty report.
pub fn layer_gain_report(
    model: &HierarchicalModel,
    data: &Tensor,
    cfg: &ObjectiveConfig,
    rng: &mut Rng,
    batch_size: usize,
) -> Result<Vec<LayerGain>> {
    if model.n_layers() < 2 {
        return Ok(Vec::new());
    }
    let n = data.rows();
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::with_capacity(n); model.n_layers()];
    let mut start = 0;
    while start < n {
        let stop = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..stop).collect();
        let batch = data.take_rows(&idx);
        let mut tape = Tape::new();
        let v = stacked_bound(&mut tape, model, &batch, cfg, rng)?;
        for (l, pe) in v.per_layer_gain_pe.iter().enumerate() {
            per_layer[l].extend_from_slice(pe);
        }
        start = stop;
    }
    let mut out = Vec::new();
    for (l, pe) in per_layer.iter().enumerate().skip(1) {
        let (gain, se) = crate::info::mean_and_se(pe);
        out.push(LayerGain { layer: l + 1, gain, std_err: se, positive: gain > 3.0 * se });
    }
    Ok(out)
}
