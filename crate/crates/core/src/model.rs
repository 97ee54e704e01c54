//! Hierarchical encoder/decoder stacks.
//!
//! A model is a chain of stochastic layers. Each continuous layer encodes
//! the layer below into a diagonal Gaussian; a categorical layer (top only)
//! encodes into class logits and is decoded by exact enumeration over its
//! one-hot values, weighted by the softmax probabilities, rather than by
//! sampling the discrete variable.

use serde::{Deserialize, Serialize};

use crate::dist::{diff, BernoulliVec, CategoricalDist, DiagGaussian};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, BoundParams, MlpSpec, ParameterStore};
use crate::rng::Rng;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

/// Exact-enumeration guard for the categorical top layer.
pub const CATEGORICAL_GUARD: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Continuous { width: usize },
    Categorical { k: usize },
}

impl LayerKind {
    /// Width of the latent as fed to the decoder (categories are one-hot).
    pub fn latent_width(&self) -> usize {
        match self {
            LayerKind::Continuous { width } => *width,
            LayerKind::Categorical { k } => *k,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Bernoulli,
    Gaussian,
}

/// One stochastic layer: its kind plus encoder and decoder networks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub enc: MlpSpec,
    pub dec: MlpSpec,
}

/// Plain description used to build a model (and recorded in checkpoints).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub likelihood: Likelihood,
    pub layers: Vec<LayerSpec>,
}

/// Convenience shape for constructing layer specs from hidden widths.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerConfig {
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub enc_hidden: Vec<usize>,
    #[serde(default)]
    pub dec_hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug)]
pub struct HierarchicalModel {
    arch: ModelArch,
    pub store: ParameterStore,
}

/// Posterior of one layer along a forward pass on the tape.
pub enum LayerPostT {
    Cont { mean: Value, log_var: Value, z: Value },
    Cat { logits: Value },
}

/// A decoding target: constant data or a value already on the tape.
pub enum TargetT<'a> {
    Data(&'a Tensor),
    Node(Value),
}

/// Likelihood parameters for the data layer.
#[derive(Clone, Debug)]
pub enum LikelihoodParams {
    Bernoulli(BernoulliVec),
    Gaussian(DiagGaussian),
}

impl LikelihoodParams {
    /// Mean of the likelihood (Bernoulli probabilities or Gaussian mean);
    /// what gets rendered when generating images.
    pub fn mean_x(&self) -> Tensor {
        match self {
            LikelihoodParams::Bernoulli(b) => b.probs(),
            LikelihoodParams::Gaussian(g) => g.mean().clone(),
        }
    }
}

fn build_arch(input_dim: usize, likelihood: Likelihood, cfgs: &[LayerConfig]) -> Result<ModelArch> {
    if cfgs.is_empty() {
        return Err(Error::InvalidArgument("model needs at least one layer".into()));
    }
    let mut layers = Vec::with_capacity(cfgs.len());
    let mut below_width = input_dim;
    for (l, cfg) in cfgs.iter().enumerate() {
        if let LayerKind::Categorical { k } = cfg.kind {
            if l + 1 != cfgs.len() {
                return Err(Error::InvalidArgument(
                    "categorical layers are supported only at the top".into(),
                ));
            }
            if k > CATEGORICAL_GUARD {
                return Err(Error::EnumerationGuard { states: k, guard: CATEGORICAL_GUARD });
            }
        }
        let (enc_out, enc_heads): (usize, Vec<(String, usize)>) = match cfg.kind {
            LayerKind::Continuous { width } => (
                2 * width,
                vec![("mean".into(), width), ("log_var".into(), width)],
            ),
            LayerKind::Categorical { k } => (k, vec![("logits".into(), k)]),
        };
        let mut enc_widths = vec![below_width];
        enc_widths.extend_from_slice(&cfg.enc_hidden);
        enc_widths.push(enc_out);
        let enc = MlpSpec::new(enc_widths, cfg.activation, enc_heads)?;

        let (dec_out, dec_heads): (usize, Vec<(String, usize)>) = if l == 0 {
            match likelihood {
                Likelihood::Bernoulli => (input_dim, vec![("logits".into(), input_dim)]),
                Likelihood::Gaussian => (
                    2 * input_dim,
                    vec![("mean".into(), input_dim), ("log_var".into(), input_dim)],
                ),
            }
        } else {
            (2 * below_width, vec![("mean".into(), below_width), ("log_var".into(), below_width)])
        };
        let mut dec_widths = vec![cfg.kind.latent_width()];
        dec_widths.extend_from_slice(&cfg.dec_hidden);
        dec_widths.push(dec_out);
        let dec = MlpSpec::new(dec_widths, cfg.activation, dec_heads)?;

        layers.push(LayerSpec { kind: cfg.kind, enc, dec });
        below_width = cfg.kind.latent_width();
    }
    Ok(ModelArch { input_dim, likelihood, layers })
}

impl HierarchicalModel {
    pub fn new(
        input_dim: usize,
        likelihood: Likelihood,
        cfgs: &[LayerConfig],
        rng: &mut Rng,
    ) -> Result<Self> {
        let arch = build_arch(input_dim, likelihood, cfgs)?;
        let mut store = ParameterStore::new();
        for (l, layer) in arch.layers.iter().enumerate() {
            nn::init_params(&mut store, &format!("enc{l}"), &layer.enc, rng)?;
            nn::init_params(&mut store, &format!("dec{l}"), &layer.dec, rng)?;
        }
        Ok(HierarchicalModel { arch, store })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn n_layers(&self) -> usize {
        self.arch.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn likelihood(&self) -> Likelihood {
        self.arch.likelihood
    }

    pub fn layer(&self, l: usize) -> &LayerSpec {
        &self.arch.layers[l]
    }

    /// Index of the highest continuous layer (the one marginal banks and
    /// MI reports range over).
    pub fn top_continuous_index(&self) -> Result<usize> {
        for (l, layer) in self.arch.layers.iter().enumerate().rev() {
            if matches!(layer.kind, LayerKind::Continuous { .. }) {
                return Ok(l);
            }
        }
        Err(Error::InvalidArgument("model has no continuous layer".into()))
    }

    pub fn top_kind(&self) -> LayerKind {
        self.arch.layers.last().expect("nonempty").kind
    }

    /// Save parameters with the architecture JSON in the checkpoint header.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::to_string(&self.arch)
            .map_err(|e| Error::Format(format!("architecture serialization: {e}")))?;
        nn::save_params(&self.store, &meta, path)
    }

    /// Load a model back from a checkpoint written by [`Self::save`].
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (meta, store) = nn::load_params(path)?;
        let arch: ModelArch = serde_json::from_str(&meta)
            .map_err(|e| Error::Format(format!("architecture metadata: {e}")))?;
        let model = HierarchicalModel { arch, store };
        model.validate_store()?;
        Ok(model)
    }

    fn validate_store(&self) -> Result<()> {
        for (l, layer) in self.arch.layers.iter().enumerate() {
            nn::expect_shapes(&self.store, &layer.enc.param_shapes(&format!("enc{l}")))?;
            nn::expect_shapes(&self.store, &layer.dec.param_shapes(&format!("dec{l}")))?;
        }
        Ok(())
    }

    // -- tape-side forward ---------------------------------------------------

    pub fn encoder_heads_t(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        l: usize,
        input: Value,
    ) -> Result<std::collections::BTreeMap<String, Value>> {
        nn::mlp_forward(tape, &self.arch.layers[l].enc, bound, &format!("enc{l}"), input)
    }

    pub fn decoder_heads_t(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        l: usize,
        latent: Value,
    ) -> Result<std::collections::BTreeMap<String, Value>> {
        nn::mlp_forward(tape, &self.arch.layers[l].dec, bound, &format!("dec{l}"), latent)
    }

    /// Encode a batch up the chain on the tape. `noise` must yield one
    /// `[n, m_l]` tensor per continuous layer, in layer order (reuse a
    /// closure over the run's rng, or zeros for a deterministic mean path).
    pub fn encode_t(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Value,
        noise: &mut dyn FnMut(&[usize]) -> Tensor,
    ) -> Result<Vec<LayerPostT>> {
        let n = tape.value(x).rows();
        if tape.value(x).cols() != self.arch.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![n, self.arch.input_dim],
            });
        }
        let mut input = x;
        let mut out = Vec::with_capacity(self.n_layers());
        for (l, layer) in self.arch.layers.iter().enumerate() {
            let heads = self.encoder_heads_t(tape, bound, l, input)?;
            match layer.kind {
                LayerKind::Continuous { width } => {
                    let mean = heads["mean"];
                    let log_var = diff::clamp_log_var(tape, heads["log_var"]);
                    let eps = noise(&[n, width]);
                    let z = diff::reparam(tape, mean, log_var, &eps)?;
                    input = z;
                    out.push(LayerPostT::Cont { mean, log_var, z });
                }
                LayerKind::Categorical { .. } => {
                    out.push(LayerPostT::Cat { logits: heads["logits"] });
                }
            }
        }
        Ok(out)
    }

    /// Per-dimension log-probability of a layer's decoding target under the
    /// decoder at `l`, shape `[n, d_below]`. Layer 0 uses the data
    /// likelihood; higher layers are diagonal Gaussians over the latent
    /// below.
    pub fn layer_log_prob_t(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        l: usize,
        latent: Value,
        target: &TargetT,
    ) -> Result<Value> {
        let heads = self.decoder_heads_t(tape, bound, l, latent)?;
        if l == 0 {
            match self.arch.likelihood {
                Likelihood::Bernoulli => match target {
                    TargetT::Data(x) => diff::bernoulli_log_prob(tape, heads["logits"], x),
                    TargetT::Node(_) => Err(Error::InvalidArgument(
                        "bernoulli targets must be constant data".into(),
                    )),
                },
                Likelihood::Gaussian => {
                    let xv = match target {
                        TargetT::Data(x) => tape.leaf((*x).clone()),
                        TargetT::Node(v) => *v,
                    };
                    let lv = diff::clamp_log_var(tape, heads["log_var"]);
                    diff::gauss_log_prob(tape, heads["mean"], lv, xv)
                }
            }
        } else {
            let zv = match target {
                TargetT::Data(x) => tape.leaf((*x).clone()),
                TargetT::Node(v) => *v,
            };
            let lv = diff::clamp_log_var(tape, heads["log_var"]);
            diff::gauss_log_prob(tape, heads["mean"], lv, zv)
        }
    }

    /// Expected decoding through the categorical top layer: for each of the
    /// K one-hot values, decode and evaluate the per-dimension
    /// reconstruction ln q(below | e_k); combine the K results under the
    /// softmax probabilities. Also returns the exact per-example
    /// KL(Cat(p) || Uniform(K)) = ln K - H(p). No sampling of the discrete
    /// variable is involved.
    pub fn decode_marginalized_t(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        logits: Value,
        target: &TargetT,
    ) -> Result<(Value, Value)> {
        let l = self.n_layers() - 1;
        let k = match self.arch.layers[l].kind {
            LayerKind::Categorical { k } => k,
            _ => {
                return Err(Error::InvalidArgument(
                    "decode_marginalized: top layer is not categorical".into(),
                ))
            }
        };
        if k > CATEGORICAL_GUARD {
            return Err(Error::EnumerationGuard { states: k, guard: CATEGORICAL_GUARD });
        }
        let n = tape.value(logits).rows();
        let log_probs = tape.log_softmax(logits)?;

        let mut expected: Option<Value> = None;
        for cat in 0..k {
            let one_hot = tape.leaf(Tensor::one_hot_rows(n, k, cat));
            let lp = self.layer_log_prob_t(tape, bound, l, one_hot, target)?;
            let lp_cat = tape.slice_cols(log_probs, cat, 1)?;
            let p_cat = tape.exp(lp_cat);
            let p_cat = tape.reshape(p_cat, vec![n])?;
            let weighted = tape.scale_rows(lp, p_cat)?;
            expected = Some(match expected {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }

        // KL(Cat(p) || U) = ln K - H(p) = sum_k p_k ln p_k + ln K
        let probs = tape.exp(log_probs);
        let plogp = tape.mul(probs, log_probs)?;
        let neg_h = tape.sum_axis(plogp, 1)?;
        let kl = tape.add_scalar(neg_h, (k as f64).ln());
        Ok((expected.expect("k >= 1"), kl))
    }

    // -- value-side forward (scratch tapes inside) ----------------------------

    /// Encode one batch, sampling each continuous layer once. Returns the
    /// per-layer posteriors and the sampled path.
    pub fn encode(&self, x: &Tensor, rng: &mut Rng) -> Result<EncodeOut> {
        let mut tape = Tape::new();
        let bound = nn::bind_params(&mut tape, &self.store);
        let xv = tape.leaf(x.clone());
        let mut noise = |shape: &[usize]| rng.standard_normal(shape);
        let posts = self.encode_t(&mut tape, &bound, xv, &mut noise)?;
        Ok(EncodeOut::from_tape(&tape, &posts))
    }

    /// Encode along the deterministic mean path (noise forced to zero).
    pub fn encode_mean(&self, x: &Tensor) -> Result<EncodeOut> {
        let mut tape = Tape::new();
        let bound = nn::bind_params(&mut tape, &self.store);
        let xv = tape.leaf(x.clone());
        let mut noise = |shape: &[usize]| Tensor::zeros(shape);
        let posts = self.encode_t(&mut tape, &bound, xv, &mut noise)?;
        Ok(EncodeOut::from_tape(&tape, &posts))
    }

    /// Decode a top-layer latent down to likelihood parameters for x.
    /// Intermediate layers pass their decoder means down (`rng: None`) or
    /// sample from the decoder Gaussians (`rng: Some`).
    pub fn decode(&self, z_top: &Tensor, mut rng: Option<&mut Rng>) -> Result<LikelihoodParams> {
        let mut z = z_top.clone();
        for l in (0..self.n_layers()).rev() {
            let mut tape = Tape::new();
            let bound = nn::bind_params(&mut tape, &self.store);
            let zv = tape.leaf(z.clone());
            let heads = self.decoder_heads_t(&mut tape, &bound, l, zv)?;
            if l == 0 {
                return Ok(match self.arch.likelihood {
                    Likelihood::Bernoulli => {
                        LikelihoodParams::Bernoulli(BernoulliVec::new(tape.value(heads["logits"]).clone()))
                    }
                    Likelihood::Gaussian => LikelihoodParams::Gaussian(DiagGaussian::new(
                        tape.value(heads["mean"]).clone(),
                        tape.value(heads["log_var"]).clone(),
                    )?),
                });
            }
            let mean = tape.value(heads["mean"]).clone();
            z = match rng.as_deref_mut() {
                None => mean,
                Some(r) => {
                    let lv = tape.value(heads["log_var"]).map(|v| {
                        v.clamp(crate::dist::LOG_VAR_CLAMP.0, crate::dist::LOG_VAR_CLAMP.1)
                    });
                    let eps = r.standard_normal(mean.shape());
                    let mut out = mean.clone();
                    for i in 0..out.len() {
                        out.data_mut()[i] += (0.5 * lv.data()[i]).exp() * eps.data()[i];
                    }
                    out
                }
            };
        }
        unreachable!("layer 0 always returns");
    }

    /// Top-layer cluster index per example: argmax of the categorical
    /// posterior logits along the mean encoding path, ties to lowest index.
    pub fn cluster_assign(&self, x: &Tensor) -> Result<Vec<usize>> {
        match self.top_kind() {
            LayerKind::Categorical { .. } => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "cluster_assign: top layer is not categorical".into(),
                ))
            }
        }
        let out = self.encode_mean(x)?;
        let logits = match out.layers.last().expect("nonempty") {
            LayerPost::Cat { logits } => logits.clone(),
            _ => unreachable!("top checked categorical"),
        };
        Ok(CategoricalDist::new(logits).argmax())
    }

    /// Mean-path posteriors of the top continuous layer over a dataset,
    /// as the estimator-facing [`crate::info::PosteriorSet`].
    pub fn posterior_set(&self, data: &Tensor) -> Result<crate::info::PosteriorSet> {
        let idx = self.top_continuous_index()?;
        let out = self.encode_mean(data)?;
        match &out.layers[idx] {
            LayerPost::Cont { mean, log_var, .. } => {
                crate::info::PosteriorSet::new(mean.clone(), log_var.map(f64::exp))
            }
            LayerPost::Cat { .. } => unreachable!("index points at a continuous layer"),
        }
    }
}

/// Value-side posterior of one layer.
#[derive(Clone, Debug)]
pub enum LayerPost {
    Cont { mean: Tensor, log_var: Tensor, z: Tensor },
    Cat { logits: Tensor },
}

/// Value-side encoding result: posteriors plus the sampled path.
#[derive(Clone, Debug)]
pub struct EncodeOut {
    pub layers: Vec<LayerPost>,
}

impl EncodeOut {
    fn from_tape(tape: &Tape, posts: &[LayerPostT]) -> Self {
        let layers = posts
            .iter()
            .map(|p| match p {
                LayerPostT::Cont { mean, log_var, z } => LayerPost::Cont {
                    mean: tape.value(*mean).clone(),
                    log_var: tape.value(*log_var).clone(),
                    z: tape.value(*z).clone(),
                },
                LayerPostT::Cat { logits } => LayerPost::Cat { logits: tape.value(*logits).clone() },
            })
            .collect();
        EncodeOut { layers }
    }

    /// Sampled value of layer `l` (continuous layers only).
    pub fn z(&self, l: usize) -> &Tensor {
        match &self.layers[l] {
            LayerPost::Cont { z, .. } => z,
            LayerPost::Cat { .. } => panic!("layer {l} is categorical"),
        }
    }
}

/// Best bijective mapping accuracy between cluster indices and labels,
/// by exhaustive search over permutations (k <= 10).
pub fn mapped_cluster_accuracy(assign: &[usize], labels: &[usize], k: usize) -> Result<f64> {
    if assign.len() != labels.len() || assign.is_empty() {
        return Err(Error::InvalidArgument("mapped_cluster_accuracy: length mismatch".into()));
    }
    if k > 10 {
        return Err(Error::InvalidArgument("mapped_cluster_accuracy: k > 10".into()));
    }
    // confusion counts
    let mut counts = vec![vec![0usize; k]; k];
    for (&a, &l) in assign.iter().zip(labels) {
        counts[a][l] += 1;
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let hits: usize = (0..k).map(|c| counts[c][p[c]]).sum();
        if hits > best {
            best = hits;
        }
    });
    Ok(best as f64 / assign.len() as f64)
}

fn permute(xs: &mut Vec<usize>, at: usize, visit: &mut impl FnMut(&[usize])) {
    if at == xs.len() {
        visit(xs);
        return;
    }
    for i in at..xs.len() {
        xs.swap(at, i);
        permute(xs, at + 1, visit);
        xs.swap(at, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model(rng: &mut Rng) -> HierarchicalModel {
        HierarchicalModel::new(
            4,
            Likelihood::Bernoulli,
            &[LayerConfig {
                kind: LayerKind::Continuous { width: 2 },
                enc_hidden: vec![6],
                dec_hidden: vec![6],
                activation: Activation::Tanh,
            }],
            rng,
        )
        .unwrap()
    }

    fn two_layer_model(rng: &mut Rng) -> HierarchicalModel {
        HierarchicalModel::new(
            4,
            Likelihood::Bernoulli,
            &[
                LayerConfig {
                    kind: LayerKind::Continuous { width: 3 },
                    enc_hidden: vec![8],
                    dec_hidden: vec![8],
                    activation: Activation::Tanh,
                },
                LayerConfig {
                    kind: LayerKind::Categorical { k: 2 },
                    enc_hidden: vec![5],
                    dec_hidden: vec![5],
                    activation: Activation::Tanh,
                },
            ],
            rng,
        )
        .unwrap()
    }

    #[test]
    fn encode_single_layer_is_vae_encoder() {
        let mut rng = Rng::new(1).stream(1);
        let model = tiny_model(&mut rng);
        let x = Tensor::zeros(&[3, 4]);
        let out = model.encode(&x, &mut rng.stream(5)).unwrap();
        assert_eq!(out.layers.len(), 1);
        match &out.layers[0] {
            LayerPost::Cont { mean, z, .. } => {
                assert_eq!(mean.shape(), &[3, 2]);
                assert_eq!(z.shape(), &[3, 2]);
            }
            _ => panic!("expected continuous"),
        }
    }

    #[test]
    fn encode_deterministic_given_seed() {
        let mut rng = Rng::new(2).stream(1);
        let model = tiny_model(&mut rng);
        let x = Rng::new(3).stream(1).standard_normal(&[2, 4]).map(|v| (v > 0.0) as u8 as f64);
        let a = model.encode(&x, &mut Rng::new(4).stream(9)).unwrap();
        let b = model.encode(&x, &mut Rng::new(4).stream(9)).unwrap();
        assert_eq!(a.z(0), b.z(0));
    }

    #[test]
    fn near_deterministic_encoder_path_tracks_means() {
        // force log_var to the clamp floor: sigma = e^{-5}, so a sampled
        // path deviates from the mean by < 3 sigma ~ 2e-2 at 3 draws
        let mut rng = Rng::new(5).stream(1);
        let mut model = tiny_model(&mut rng);
        // bias the log_var head hard negative: set final enc bias slice
        let key = "enc0.b1";
        let mut b = model.store.get(key).unwrap().clone();
        for i in 2..4 {
            b.data_mut()[i] = -50.0; // clamps to -10
        }
        model.store.set(key, b).unwrap();
        let x = Tensor::zeros(&[1, 4]);
        let out = model.encode(&x, &mut rng.stream(2)).unwrap();
        match &out.layers[0] {
            LayerPost::Cont { mean, z, .. } => {
                for (zi, mi) in z.data().iter().zip(mean.data()) {
                    assert!((zi - mi).abs() < 3.0 * (-5.0f64).exp() * 3.0);
                }
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn encode_width_mismatch() {
        let mut rng = Rng::new(6).stream(1);
        let model = tiny_model(&mut rng);
        let x = Tensor::zeros(&[2, 5]);
        assert!(model.encode(&x, &mut rng).is_err());
    }

    #[test]
    fn decode_zero_weights_gives_uniform_bernoulli() {
        let mut rng = Rng::new(7).stream(1);
        let mut model = tiny_model(&mut rng);
        for key in ["dec0.w0", "dec0.b0", "dec0.w1", "dec0.b1"] {
            let t = model.store.get(key).unwrap().clone();
            model.store.set(key, Tensor::zeros(t.shape())).unwrap();
        }
        let z = Tensor::zeros(&[1, 2]);
        match model.decode(&z, None).unwrap() {
            LikelihoodParams::Bernoulli(b) => {
                assert!(b.logits().data().iter().all(|&l| l == 0.0));
                assert!(b.probs().data().iter().all(|&p| p == 0.5));
            }
            _ => panic!("expected bernoulli"),
        }
    }

    #[test]
    fn two_layer_decode_composes() {
        let mut rng = Rng::new(8).stream(1);
        let model = two_layer_model(&mut rng);
        let one_hot = Tensor::one_hot_rows(1, 2, 1);
        let params = model.decode(&one_hot, None).unwrap();
        match params {
            LikelihoodParams::Bernoulli(b) => assert_eq!(b.logits().shape(), &[1, 4]),
            _ => panic!("expected bernoulli"),
        }
    }

    #[test]
    fn decoder_jacobian_grad_check() {
        let mut rng = Rng::new(9).stream(1);
        let model = tiny_model(&mut rng);
        let z0 = rng.standard_normal(&[1, 2]);
        let err = crate::tape::grad_check(
            |tape, zv| {
                let bound = nn::bind_params(tape, &model.store);
                let heads = model.decoder_heads_t(tape, &bound, 0, zv)?;
                let s = tape.sum_all(heads["logits"]);
                let t = tape.tanh(s);
                Ok(tape.sum_all(t))
            },
            &z0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "err {err}");
    }

    #[test]
    fn marginalized_k1_equals_plain_decode() {
        // a K=1 categorical top contributes zero KL and its single branch
        let mut rng = Rng::new(10).stream(1);
        let model = HierarchicalModel::new(
            4,
            Likelihood::Bernoulli,
            &[
                LayerConfig {
                    kind: LayerKind::Continuous { width: 2 },
                    enc_hidden: vec![5],
                    dec_hidden: vec![5],
                    activation: Activation::Tanh,
                },
                LayerConfig {
                    kind: LayerKind::Categorical { k: 1 },
                    enc_hidden: vec![3],
                    dec_hidden: vec![3],
                    activation: Activation::Tanh,
                },
            ],
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = nn::bind_params(&mut tape, &model.store);
        let logits = tape.leaf(Tensor::zeros(&[2, 1]));
        let target = tape.leaf(Rng::new(1).stream(2).standard_normal(&[2, 2]));
        let (recon, kl) = model
            .decode_marginalized_t(&mut tape, &bound, logits, &TargetT::Node(target))
            .unwrap();

        // single branch by hand
        let one_hot = tape.leaf(Tensor::one_hot_rows(2, 1, 0));
        let direct = model
            .layer_log_prob_t(&mut tape, &bound, 1, one_hot, &TargetT::Node(target))
            .unwrap();

        for (a, b) in tape.value(recon).data().iter().zip(tape.value(direct).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(tape.value(kl).data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn marginalized_uniform_two_identical_branches() {
        let mut rng = Rng::new(11).stream(1);
        let mut model = two_layer_model(&mut rng);
        // make both one-hot inputs produce identical decoder output: zero the
        // first decoder layer's weights so only biases matter
        let t = model.store.get("dec1.w0").unwrap().clone();
        model.store.set("dec1.w0", Tensor::zeros(t.shape())).unwrap();

        let mut tape = Tape::new();
        let bound = nn::bind_params(&mut tape, &model.store);
        let logits = tape.leaf(Tensor::zeros(&[3, 2]));
        let target = tape.leaf(Rng::new(2).stream(3).standard_normal(&[3, 3]));
        let (recon, kl) = model
            .decode_marginalized_t(&mut tape, &bound, logits, &TargetT::Node(target))
            .unwrap();

        let one_hot = tape.leaf(Tensor::one_hot_rows(3, 2, 0));
        let branch = model
            .layer_log_prob_t(&mut tape, &bound, 1, one_hot, &TargetT::Node(target))
            .unwrap();

        for (a, b) in tape.value(recon).data().iter().zip(tape.value(branch).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // uniform over K=2: KL to uniform is zero
        assert!(tape.value(kl).data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn marginalized_dominant_logit_matches_single_branch() {
        let mut rng = Rng::new(12).stream(1);
        let model = HierarchicalModel::new(
            4,
            Likelihood::Bernoulli,
            &[
                LayerConfig {
                    kind: LayerKind::Continuous { width: 2 },
                    enc_hidden: vec![5],
                    dec_hidden: vec![5],
                    activation: Activation::Tanh,
                },
                LayerConfig {
                    kind: LayerKind::Categorical { k: 10 },
                    enc_hidden: vec![4],
                    dec_hidden: vec![4],
                    activation: Activation::Tanh,
                },
            ],
            &mut rng,
        )
        .unwrap();
        let mut tape = Tape::new();
        let bound = nn::bind_params(&mut tape, &model.store);
        let mut raw = vec![0.0; 10];
        raw[4] = 15.0;
        let logits = tape.leaf(Tensor::new(vec![1, 10], raw).unwrap());
        let target = tape.leaf(Rng::new(5).stream(4).standard_normal(&[1, 2]));
        let (recon, _) = model
            .decode_marginalized_t(&mut tape, &bound, logits, &TargetT::Node(target))
            .unwrap();

        let one_hot = tape.leaf(Tensor::one_hot_rows(1, 10, 4));
        let branch = model
            .layer_log_prob_t(&mut tape, &bound, 1, one_hot, &TargetT::Node(target))
            .unwrap();
        let rsum: f64 = tape.value(recon).sum();
        let bsum: f64 = tape.value(branch).sum();
        assert!((rsum - bsum).abs() < 1e-5, "{rsum} vs {bsum}");
    }

    #[test]
    fn cluster_assign_uniform_ties_to_zero_and_dominant_wins() {
        let mut rng = Rng::new(13).stream(1);
        let mut model = two_layer_model(&mut rng);
        // zero the categorical encoder entirely: logits all zero, tie at 0
        for key in ["enc1.w0", "enc1.b0", "enc1.w1", "enc1.b1"] {
            let t = model.store.get(key).unwrap().clone();
            model.store.set(key, Tensor::zeros(t.shape())).unwrap();
        }
        let x = Tensor::zeros(&[3, 4]);
        assert_eq!(model.cluster_assign(&x).unwrap(), vec![0, 0, 0]);

        // dominant logit k wins: bias the final layer toward class 1
        let mut b = model.store.get("enc1.b1").unwrap().clone();
        b.data_mut()[1] = 5.0;
        model.store.set("enc1.b1", b).unwrap();
        assert_eq!(model.cluster_assign(&x).unwrap(), vec![1, 1, 1]);
    }

    #[test]
    fn cluster_assign_requires_categorical_top() {
        let mut rng = Rng::new(14).stream(1);
        let model = tiny_model(&mut rng);
        assert!(model.cluster_assign(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn save_load_round_trip_reconstructs_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.cxae");
        let mut rng = Rng::new(15).stream(1);
        let model = two_layer_model(&mut rng);
        model.save(&path).unwrap();
        let loaded = HierarchicalModel::load(&path).unwrap();
        assert_eq!(loaded.n_layers(), 2);
        assert_eq!(loaded.input_dim(), 4);
        for (k, t) in model.store.iter() {
            assert_eq!(loaded.store.get(k).unwrap(), t);
        }
        // forward agreement on the mean path
        let x = Tensor::zeros(&[2, 4]);
        let a = model.encode_mean(&x).unwrap();
        let b = loaded.encode_mean(&x).unwrap();
        assert_eq!(a.z(0), b.z(0));
    }

    #[test]
    fn categorical_below_top_rejected() {
        let mut rng = Rng::new(16).stream(1);
        let bad = HierarchicalModel::new(
            4,
            Likelihood::Bernoulli,
            &[
                LayerConfig {
                    kind: LayerKind::Categorical { k: 3 },
                    enc_hidden: vec![],
                    dec_hidden: vec![],
                    activation: Activation::Relu,
                },
                LayerConfig {
                    kind: LayerKind::Continuous { width: 2 },
                    enc_hidden: vec![],
                    dec_hidden: vec![],
                    activation: Activation::Relu,
                },
            ],
            &mut rng,
        );
        assert!(bad.is_err());
    }

    #[test]
    fn mapped_accuracy_permutation_search() {
        // clusters are a relabeling of truth: accuracy 1.0
        let labels = vec![0, 1, 2, 0, 1, 2];
        let assign = vec![2, 0, 1, 2, 0, 1];
        assert_eq!(mapped_cluster_accuracy(&assign, &labels, 3).unwrap(), 1.0);
        // one mistake
        let assign = vec![2, 0, 1, 2, 0, 0];
        let acc = mapped_cluster_accuracy(&assign, &labels, 3).unwrap();
        assert!((acc - 5.0 / 6.0).abs() < 1e-12);
    }
}
