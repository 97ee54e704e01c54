//! Multilayer perceptrons, parameter storage, Adam, and binary checkpoints.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

/// Fully connected network description. `widths` runs input to output and
/// the final width must equal the sum of the head widths; heads are column
/// slices of one linear output layer (mean and log-variance, say, rather
/// than two separate networks).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub heads: Vec<(String, usize)>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, heads: Vec<(String, usize)>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "MlpSpec: need at least input and output widths".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("MlpSpec: zero width".into()));
        }
        let head_sum: usize = heads.iter().map(|(_, w)| w).sum();
        if heads.is_empty() || head_sum != *widths.last().expect("nonempty") {
            return Err(Error::InvalidArgument(format!(
                "MlpSpec: head widths sum to {head_sum}, final fan-out is {}",
                widths.last().expect("nonempty")
            )));
        }
        Ok(MlpSpec { widths, activation, heads })
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Parameter keys and shapes under a prefix, in forward order.
    pub fn param_shapes(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in 0..self.n_layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            out.push((format!("{prefix}.w{l}"), vec![fan_in, fan_out]));
            out.push((format!("{prefix}.b{l}"), vec![fan_out]));
        }
        out
    }
}

/// Named parameter tensors with immutable shapes and a version counter that
/// ticks on every mutation.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Tensor>,
    version: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: &str, t: Tensor) -> Result<()> {
        if self.entries.contains_key(key) {
            return Err(Error::DuplicateKey(key.into()));
        }
        self.entries.insert(key.into(), t);
        self.version += 1;
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&Tensor> {
        self.entries.get(key).ok_or_else(|| Error::UnknownKey(key.into()))
    }

    /// Replace a tensor; the shape is immutable after creation.
    pub fn set(&mut self, key: &str, t: Tensor) -> Result<()> {
        let cur = self.entries.get_mut(key).ok_or_else(|| Error::UnknownKey(key.into()))?;
        if cur.shape() != t.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParameterStore::set",
                lhs: cur.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        *cur = t;
        self.version += 1;
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// CRC-32 of the serialized parameter records; cheap fingerprint used to
    /// tie derived artifacts (marginal banks) to a parameter snapshot.
    pub fn fingerprint(&self) -> u32 {
        let mut body = Vec::new();
        write_records(&mut body, self);
        crc32(&body)
    }
}

/// Tape bindings for a store's parameters: key -> leaf Value.
pub struct BoundParams {
    map: BTreeMap<String, Value>,
}

impl BoundParams {
    /// Bindings from an explicit key -> Value map (parameter vectors
    /// reassembled on the tape, as in whole-objective gradient checks).
    pub fn from_map(map: BTreeMap<String, Value>) -> Self {
        BoundParams { map }
    }

    pub fn value(&self, key: &str) -> Result<Value> {
        self.map.get(key).copied().ok_or_else(|| Error::UnknownKey(key.into()))
    }

    /// Gradients keyed like the store, for parameters that received any.
    pub fn gradients(&self, grads: &mut crate::tape::Gradients) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, &v) in &self.map {
            if let Some(g) = grads.take(v) {
                out.insert(k.clone(), g);
            }
        }
        out
    }
}

/// Insert every parameter of the store as a parameter leaf on the tape.
pub fn bind_params(tape: &mut Tape, store: &ParameterStore) -> BoundParams {
    let mut map = BTreeMap::new();
    for (k, t) in store.iter() {
        map.insert(k.clone(), tape.param(t.clone()));
    }
    BoundParams { map }
}

/// Glorot-uniform initialization: weights ~ U(-a, a) with
/// a = sqrt(6 / (fan_in + fan_out)), biases zero.
pub fn init_params(store: &mut ParameterStore, prefix: &str, spec: &MlpSpec, rng: &mut Rng) -> Result<()> {
    for l in 0..spec.n_layers() {
        let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.uniform_range(-a, a)).collect();
        store.insert(&format!("{prefix}.w{l}"), Tensor::new(vec![fan_in, fan_out], w)?)?;
        store.insert(&format!("{prefix}.b{l}"), Tensor::zeros(&[fan_out]))?;
    }
    Ok(())
}

/// Forward pass through the MLP on the tape, returning one Value per head.
pub fn mlp_forward(
    tape: &mut Tape,
    spec: &MlpSpec,
    bound: &BoundParams,
    prefix: &str,
    x: Value,
) -> Result<BTreeMap<String, Value>> {
    let got = tape.value(x).cols();
    if got != spec.input_width() {
        return Err(Error::ShapeMismatch {
            op: "mlp_forward",
            lhs: tape.value(x).shape().to_vec(),
            rhs: vec![spec.input_width()],
        });
    }
    let mut h = x;
    for l in 0..spec.n_layers() {
        let w = bound.value(&format!("{prefix}.w{l}"))?;
        let b = bound.value(&format!("{prefix}.b{l}"))?;
        let z = tape.matmul(h, w)?;
        h = tape.add(z, b)?;
        // the final layer stays linear; heads slice its output
        if l + 1 < spec.n_layers() {
            h = match spec.activation {
                Activation::Relu => tape.relu(h),
                Activation::Tanh => tape.tanh(h),
                Activation::Identity => h,
            };
        }
    }
    let mut heads = BTreeMap::new();
    let mut start = 0;
    for (name, width) in &spec.heads {
        heads.insert(name.clone(), tape.slice_cols(h, start, *width)?);
        start += width;
    }
    Ok(heads)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Clone, Debug)]
pub struct AdamState {
    params: AdamParams,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: AdamParams) -> Self {
        AdamState { params, m: BTreeMap::new(), v: BTreeMap::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update in place. Parameters without a gradient entry are left
/// untouched; non-finite gradients abort naming the parameter.
pub fn adam_step(
    state: &mut AdamState,
    store: &mut ParameterStore,
    grads: &BTreeMap<String, Tensor>,
) -> Result<()> {
    for (key, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(key.clone()));
        }
        let p = store.get(key)?;
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.step += 1;
    let t = state.step;
    let AdamParams { lr, beta1, beta2, eps } = state.params;
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);

    for (key, g) in grads {
        let m = state
            .m
            .entry(key.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .v
            .entry(key.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let mut p = store.get(key)?.clone();
        let pd = p.data_mut();
        for i in 0..g.len() {
            let gi = g.data()[i];
            let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
            let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            pd[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        }
        store.set(key, p)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "CXAE", version u32, metadata block (u32 length +
// UTF-8 JSON), record count u32, per-parameter records (key length u32, key
// bytes, rank u32, extents u32 each, little-endian f64 payload), trailing
// CRC-32 of the whole body. All integers little-endian.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"CXAE";
const FORMAT_VERSION: u32 = 1;

pub fn crc32(data: &[u8]) -> u32 {
    // CRC-32/ISO-HDLC, bitwise reflected form
    let mut crc = !0u32;
    for &b in data {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

fn write_records(body: &mut Vec<u8>, store: &ParameterStore) {
    body.extend((store.len() as u32).to_le_bytes());
    for (key, t) in store.iter() {
        body.extend((key.len() as u32).to_le_bytes());
        body.extend(key.as_bytes());
        body.extend((t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            body.extend((e as u32).to_le_bytes());
        }
        for &v in t.data() {
            body.extend(v.to_le_bytes());
        }
    }
}

/// Write a checkpoint: the parameter store plus a metadata string (the model
/// architecture as JSON, or empty for a bare store).
pub fn save_params(store: &ParameterStore, meta: &str, path: &Path) -> Result<()> {
    let mut body = Vec::new();
    body.extend(MAGIC);
    body.extend(FORMAT_VERSION.to_le_bytes());
    body.extend((meta.len() as u32).to_le_bytes());
    body.extend(meta.as_bytes());
    write_records(&mut body, store);
    let crc = crc32(&body);
    body.extend(crc.to_le_bytes());
    let mut f = std::fs::File::create(path)?;
    f.write_all(&body)?;
    Ok(())
}

/// Read a checkpoint back: (metadata, store). Fails on bad magic, version
/// mismatch, truncation, or checksum mismatch.
pub fn load_params(path: &Path) -> Result<(String, ParameterStore)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 4 + 4 + 4 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut cur = body;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };

    if take(4)? != MAGIC {
        return Err(Error::Format(format!(
            "bad magic: expected {:?}, found other bytes",
            std::str::from_utf8(MAGIC).expect("ascii")
        )));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: FORMAT_VERSION });
    }
    let meta_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let meta = std::str::from_utf8(take(meta_len)?)
        .map_err(|_| Error::Format("metadata is not UTF-8".into()))?
        .to_string();

    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let klen = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let key = std::str::from_utf8(take(klen)?)
            .map_err(|_| Error::Format("key is not UTF-8".into()))?
            .to_string();
        let rank = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize);
        }
        let n: usize = shape.iter().product();
        let payload = take(n * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store.insert(&key, Tensor::new(shape, data)?)?;
    }
    if !cur.is_empty() {
        return Err(Error::Format("trailing bytes after records".into()));
    }
    Ok((meta, store))
}

/// Check that a loaded store matches the shapes an `MlpSpec` expects.
pub fn expect_shapes(store: &ParameterStore, expected: &[(String, Vec<usize>)]) -> Result<()> {
    for (key, shape) in expected {
        let t = store.get(key)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint load",
                lhs: t.shape().to_vec(),
                rhs: shape.clone(),
            });
        }
    }
    Ok(())
}
