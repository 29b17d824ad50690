//! Dense binary classifier over a flat parameter vector.
//!
//! Parameters live in a [`ParamVector`] with a fixed layout: for each layer
//! (hidden layers in order, then the single-logit output layer), the weight
//! matrix row-major — one row per output unit — followed by the biases.
//! That layout is what [`PartitionMask`] indexes into and what the binary
//! serialization writes.

use std::ops::Index;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{clamp_prob, sigmoid, Tape, Var};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("feature dimension {got} does not match model input dimension {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("vector length {got}, expected {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("mask fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("corrupt parameter bytes: {0}")]
    CorruptBytes(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

/// Architecture of the classifier: dense hidden layers and one output logit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_layers: Vec<usize>, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden_layers,
            activation,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidSpec("input_dim must be positive".into()));
        }
        if self.hidden_layers.contains(&0) {
            return Err(ModelError::InvalidSpec(
                "hidden layer sizes must be positive".into(),
            ));
        }
        Ok(())
    }

    /// (fan_in, fan_out) per layer, output layer included.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_layers {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, 1));
        dims
    }

    /// Total number of trainable scalars: sum of (fan_in + 1) * fan_out.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(fi, fo)| (fi + 1) * fo)
            .sum()
    }

    /// Offset of each layer's block in the flat vector.
    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::new();
        let mut off = 0;
        for (fi, fo) in self.layer_dims() {
            offsets.push(off);
            off += (fi + 1) * fo;
        }
        offsets
    }
}

/// Flat, ordered collection of all trainable scalars of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// In-place `self -= rate * grad`. Lengths must already match.
    pub fn step(&mut self, grad: &[f64], rate: f64) {
        debug_assert_eq!(self.0.len(), grad.len());
        for (p, g) in self.0.iter_mut().zip(grad) {
            *p -= rate * g;
        }
    }

    /// Little-endian binary form: u32 length then f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * self.0.len());
        out.extend_from_slice(&(self.0.len() as u32).to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 4 {
            return Err(ModelError::CorruptBytes("missing length prefix".into()));
        }
        let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let want = 4 + 8 * n;
        if bytes.len() != want {
            return Err(ModelError::CorruptBytes(format!(
                "expected {} bytes for {} values, got {}",
                want,
                n,
                bytes.len()
            )));
        }
        let values = bytes[4..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self(values))
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Structured (per-layer) view of a parameter vector. `weights[u]` holds the
/// incoming weights of output unit `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

/// Unflatten into per-layer matrices. Inverse of [`flatten_layers`].
pub fn unflatten_layers(spec: &ModelSpec, params: &ParamVector) -> Result<Vec<LayerParams>, ModelError> {
    let want = spec.param_count();
    if params.len() != want {
        return Err(ModelError::LengthMismatch {
            got: params.len(),
            want,
        });
    }
    let values = params.as_slice();
    let mut layers = Vec::new();
    let mut off = 0;
    for (fan_in, fan_out) in spec.layer_dims() {
        let mut weights = Vec::with_capacity(fan_out);
        for _ in 0..fan_out {
            weights.push(values[off..off + fan_in].to_vec());
            off += fan_in;
        }
        let biases = values[off..off + fan_out].to_vec();
        off += fan_out;
        layers.push(LayerParams { weights, biases });
    }
    Ok(layers)
}

pub fn flatten_layers(layers: &[LayerParams]) -> ParamVector {
    let mut out = Vec::new();
    for layer in layers {
        for row in &layer.weights {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&layer.biases);
    }
    ParamVector(out)
}

/// Glorot-uniform weights, zero biases, deterministic per seed.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_dims() {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            values.push(rng.random_range(-s..s));
        }
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector(values)
}

/// Boolean mask over a [`ParamVector`] splitting it into a shared region
/// (synchronized and meta-updated) and a local region (frozen at the server,
/// persistent per client).
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionMask {
    shared: Vec<bool>,
}

impl PartitionMask {
    /// Unit-granularity partition: for every hidden layer the first
    /// `ceil(fraction * H)` units are shared — their incoming weights and
    /// bias — plus the output weights reading from shared units of the last
    /// hidden layer and the output bias. Everything else is local.
    pub fn by_units(spec: &ModelSpec, fraction: f64) -> Result<Self, ModelError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(ModelError::InvalidFraction(fraction));
        }
        if spec.hidden_layers.is_empty() {
            return Err(ModelError::InvalidSpec(
                "unit-granularity mask needs at least one hidden layer; use a flat mask".into(),
            ));
        }
        let mut shared = vec![false; spec.param_count()];
        let dims = spec.layer_dims();
        let offsets = spec.layer_offsets();
        let shared_units: Vec<usize> = spec
            .hidden_layers
            .iter()
            .map(|&h| (fraction * h as f64).ceil() as usize)
            .collect();

        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let off = offsets[l];
            let is_output = l == spec.hidden_layers.len();
            if is_output {
                // Single output unit: weights from shared units are shared,
                // and so is the bias.
                let from_shared = shared_units[l - 1];
                for j in 0..from_shared {
                    shared[off + j] = true;
                }
                shared[off + fan_in] = true;
            } else {
                for u in 0..shared_units[l] {
                    for j in 0..fan_in {
                        shared[off + u * fan_in + j] = true;
                    }
                    shared[off + fan_out * fan_in + u] = true;
                }
            }
        }
        Ok(Self { shared })
    }

    /// Flat partition: the first `ceil(fraction * n)` entries are shared.
    pub fn flat(n: usize, fraction: f64) -> Result<Self, ModelError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(ModelError::InvalidFraction(fraction));
        }
        let cut = (fraction * n as f64).ceil() as usize;
        Ok(Self {
            shared: (0..n).map(|i| i < cut).collect(),
        })
    }

    pub fn all_shared(n: usize) -> Self {
        Self {
            shared: vec![true; n],
        }
    }

    pub fn all_local(n: usize) -> Self {
        Self {
            shared: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.shared.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shared.is_empty()
    }

    pub fn is_shared(&self, i: usize) -> bool {
        self.shared[i]
    }

    pub fn shared_count(&self) -> usize {
        self.shared.iter().filter(|&&s| s).count()
    }

    /// New vector taking shared entries from `shared_src` and local entries
    /// from `local_src`.
    pub fn combine(
        &self,
        shared_src: &ParamVector,
        local_src: &ParamVector,
    ) -> Result<ParamVector, ModelError> {
        if shared_src.len() != self.len() || local_src.len() != self.len() {
            return Err(ModelError::LengthMismatch {
                got: shared_src.len().max(local_src.len()),
                want: self.len(),
            });
        }
        Ok(ParamVector(
            self.shared
                .iter()
                .enumerate()
                .map(|(i, &s)| if s { shared_src[i] } else { local_src[i] })
                .collect(),
        ))
    }

    /// Packed little-endian bitmap, bit i = shared[i], LSB first.
    pub fn to_bitmap(&self) -> Vec<u8> {
        let mut bytes = vec![0u8; self.shared.len().div_ceil(8)];
        for (i, &s) in self.shared.iter().enumerate() {
            if s {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        bytes
    }

    pub fn from_bitmap(bytes: &[u8], len: usize) -> Result<Self, ModelError> {
        if bytes.len() != len.div_ceil(8) {
            return Err(ModelError::CorruptBytes(format!(
                "bitmap of {} bytes cannot hold {} bits",
                bytes.len(),
                len
            )));
        }
        Ok(Self {
            shared: (0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect(),
        })
    }
}

/// One batch of labeled feature rows, detached from its source dataset.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl TaskBatch {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<u8>) -> Self {
        Self { features, labels }
    }

    /// Gather the rows at `indices`.
    pub fn gather(features: &[Vec<f64>], labels: &[u8], indices: &[usize]) -> Self {
        Self {
            features: indices.iter().map(|&i| features[i].clone()).collect(),
            labels: indices.iter().map(|&i| labels[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn activate<'t>(v: Var<'t>, activation: Activation) -> Var<'t> {
    match activation {
        Activation::Tanh => v.tanh(),
        Activation::Relu => v.relu(),
        Activation::Sigmoid => v.sigmoid(),
    }
}

/// Output logit of the network for one feature row, built on the tape.
pub fn logit_graph<'t>(
    tape: &'t Tape,
    spec: &ModelSpec,
    params: &[Var<'t>],
    row: &[f64],
) -> Result<Var<'t>, ModelError> {
    if row.len() != spec.input_dim {
        return Err(ModelError::DimensionMismatch {
            got: row.len(),
            want: spec.input_dim,
        });
    }
    if params.len() != spec.param_count() {
        return Err(ModelError::LengthMismatch {
            got: params.len(),
            want: spec.param_count(),
        });
    }

    let mut inputs: Vec<Var<'t>> = row.iter().map(|&x| tape.constant(x)).collect();
    let mut off = 0;
    let n_layers = spec.layer_dims().len();
    for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let bias_off = off + fan_out * fan_in;
        let mut outputs = Vec::with_capacity(fan_out);
        for u in 0..fan_out {
            let mut acc = params[bias_off + u];
            for (j, &x) in inputs.iter().enumerate() {
                acc = params[off + u * fan_in + j].mul_add(x, acc);
            }
            if l + 1 < n_layers {
                acc = activate(acc, spec.activation);
            }
            outputs.push(acc);
        }
        inputs = outputs;
        off = bias_off + fan_out;
    }
    Ok(inputs[0])
}

/// Mean binary cross-entropy of the batch, built on the tape. Probabilities
/// are clamped to `[1e-12, 1 - 1e-12]` before the logs.
pub fn loss_graph<'t>(
    tape: &'t Tape,
    spec: &ModelSpec,
    params: &[Var<'t>],
    batch: &TaskBatch,
) -> Result<Var<'t>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let one = tape.constant(1.0);
    let mut sum = tape.constant(0.0);
    for (row, &label) in batch.features.iter().zip(&batch.labels) {
        let p = logit_graph(tape, spec, params, row)?.sigmoid().clamp_prob();
        let term = if label == 1 { -p.ln() } else { -(one - p).ln() };
        sum = sum + term;
    }
    Ok(sum / tape.constant(batch.len() as f64))
}

/// Convenience: register `params` as leaves and build the batch loss.
/// Returns the loss together with the leaves for gradient queries.
pub fn forward_loss<'t>(
    tape: &'t Tape,
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &TaskBatch,
) -> Result<(Var<'t>, Vec<Var<'t>>), ModelError> {
    let leaves = tape.leaves(params.as_slice());
    let loss = loss_graph(tape, spec, &leaves, batch)?;
    Ok((loss, leaves))
}

/// Predicted probability for one feature row — a direct evaluation that does
/// not touch any tape. Clamped like the loss, so the result is in (0, 1).
pub fn predict_proba(spec: &ModelSpec, params: &ParamVector, row: &[f64]) -> Result<f64, ModelError> {
    if row.len() != spec.input_dim {
        return Err(ModelError::DimensionMismatch {
            got: row.len(),
            want: spec.input_dim,
        });
    }
    if params.len() != spec.param_count() {
        return Err(ModelError::LengthMismatch {
            got: params.len(),
            want: spec.param_count(),
        });
    }
    let values = params.as_slice();
    let mut inputs: Vec<f64> = row.to_vec();
    let mut off = 0;
    let n_layers = spec.layer_dims().len();
    for (l, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let bias_off = off + fan_out * fan_in;
        let mut outputs = Vec::with_capacity(fan_out);
        for u in 0..fan_out {
            let mut acc = values[bias_off + u];
            for (j, &x) in inputs.iter().enumerate() {
                acc = values[off + u * fan_in + j].mul_add(x, acc);
            }
            if l + 1 < n_layers {
                acc = match spec.activation {
                    Activation::Tanh => acc.tanh(),
                    Activation::Relu => acc.max(0.0),
                    Activation::Sigmoid => sigmoid(acc),
                };
            }
            outputs.push(acc);
        }
        inputs = outputs;
        off = bias_off + fan_out;
    }
    Ok(clamp_prob(sigmoid(inputs[0])))
}

/// Gradient step restricted to the shared region: shared entries become
/// `p - rate * g`, local entries are returned bit-identical.
pub fn apply_masked_update(
    params: &ParamVector,
    gradient: &ParamVector,
    rate: f64,
    mask: &PartitionMask,
) -> Result<ParamVector, ModelError> {
    if params.len() != gradient.len() || params.len() != mask.len() {
        return Err(ModelError::LengthMismatch {
            got: gradient.len(),
            want: params.len(),
        });
    }
    Ok(ParamVector(
        params
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if mask.is_shared(i) {
                    p - rate * gradient[i]
                } else {
                    p
                }
            })
            .collect(),
    ))
}
