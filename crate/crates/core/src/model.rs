//! One-hidden-layer traffic-state classifier: `tanh` hidden layer, softmax
//! output, mean cross-entropy loss and hand-written backpropagation.
//!
//! Parameters are stored flat in a [`ParamVector`] with the layout
//! `[W1 (hidden x input, row-major) | b1 | W2 (classes x hidden, row-major) | b2]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, TAG_INIT};
use crate::traffic::{TrafficSample, FEATURE_DIM, NUM_CLASSES};

/// Probabilities are clamped to this floor before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub num_classes: usize,
}

impl ModelArch {
    pub fn new(input_dim: usize, hidden_width: usize, num_classes: usize) -> Result<Self> {
        for (field, v) in [
            ("input_dim", input_dim),
            ("hidden_width", hidden_width),
            ("num_classes", num_classes),
        ] {
            if v == 0 || v > u32::MAX as usize {
                return Err(Error::invalid(field, "must be a positive 32-bit integer"));
            }
        }
        Ok(Self {
            input_dim,
            hidden_width,
            num_classes,
        })
    }

    /// The architecture used for traffic samples: five features, three congestion classes.
    pub fn traffic(hidden_width: usize) -> Result<Self> {
        Self::new(FEATURE_DIM, hidden_width, NUM_CLASSES)
    }

    pub fn param_count(&self) -> usize {
        (self.input_dim + 1) * self.hidden_width + (self.hidden_width + 1) * self.num_classes
    }

    fn b1_offset(&self) -> usize {
        self.input_dim * self.hidden_width
    }

    fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden_width
    }

    fn b2_offset(&self) -> usize {
        self.w2_offset() + self.hidden_width * self.num_classes
    }

    /// Returns true if the parameter at `index` is a bias term.
    pub fn is_bias(&self, index: usize) -> bool {
        (self.b1_offset()..self.w2_offset()).contains(&index) || index >= self.b2_offset()
    }
}

/// Flat model parameters tagged with the architecture they belong to.
///
/// Every element is finite and the length always equals `arch.param_count()`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    arch: ModelArch,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(arch: ModelArch) -> Self {
        Self {
            arch,
            values: vec![0.0; arch.param_count()],
        }
    }

    pub fn from_values(arch: ModelArch, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector"));
        }
        Ok(Self { arch, values })
    }

    pub fn arch(&self) -> ModelArch {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Size in bytes of the serialized form.
    pub fn encoded_len(&self) -> usize {
        3 * 4 + 8 * self.values.len()
    }

    /// Little-endian encoding: the architecture triple as three `u32`, then
    /// every value as an `f64`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        for dim in [
            self.arch.input_dim,
            self.arch.hidden_width,
            self.arch.num_classes,
        ] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a vector from the front of `bytes`, returning it together with
    /// the number of bytes consumed.
    pub fn from_bytes_prefix(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 12 {
            return Err(Error::Parse("parameter header truncated".into()));
        }
        let dim = |i: usize| {
            u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize
        };
        let arch = ModelArch::new(dim(0), dim(1), dim(2))
            .map_err(|e| Error::Parse(format!("bad architecture header: {e}")))?;
        let end = 12 + 8 * arch.param_count();
        if bytes.len() < end {
            return Err(Error::Parse(format!(
                "parameter payload truncated: need {end} bytes, have {}",
                bytes.len()
            )));
        }
        let values = bytes[12..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((Self::from_values(arch, values)?, end))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, used) = Self::from_bytes_prefix(bytes)?;
        if used != bytes.len() {
            return Err(Error::Parse(format!(
                "{} trailing bytes after parameters",
                bytes.len() - used
            )));
        }
        Ok(params)
    }
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_params(arch: ModelArch, seed: u64) -> ParamVector {
    let mut rng = rng_for(seed, &[TAG_INIT]);
    let mut values = vec![0.0; arch.param_count()];
    let hidden_bound = 1.0 / (arch.input_dim as f64).sqrt();
    let out_bound = 1.0 / (arch.hidden_width as f64).sqrt();
    for v in &mut values[..arch.b1_offset()] {
        *v = rng.random_range(-hidden_bound..=hidden_bound);
    }
    for v in &mut values[arch.w2_offset()..arch.b2_offset()] {
        *v = rng.random_range(-out_bound..=out_bound);
    }
    ParamVector { arch, values }
}

struct Activations {
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

fn forward_inner(params: &ParamVector, x: &[f64]) -> Activations {
    let arch = params.arch;
    let v = &params.values;
    let (w1, rest) = v.split_at(arch.b1_offset());
    let (b1, rest) = rest.split_at(arch.hidden_width);
    let (w2, b2) = rest.split_at(arch.hidden_width * arch.num_classes);

    let hidden: Vec<f64> = w1
        .chunks_exact(arch.input_dim)
        .zip(b1)
        .map(|(row, b)| (b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()).tanh())
        .collect();
    let logits: Vec<f64> = w2
        .chunks_exact(arch.hidden_width)
        .zip(b2)
        .map(|(row, b)| b + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>())
        .collect();
    Activations {
        hidden,
        probs: softmax(&logits),
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_input(params: &ParamVector, x: &[f64]) -> Result<()> {
    if x.len() != params.arch.input_dim {
        return Err(Error::DimensionMismatch {
            expected: params.arch.input_dim,
            actual: x.len(),
        });
    }
    Ok(())
}

fn check_batch(params: &ParamVector, batch: &[TrafficSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    check_input(params, &batch[0].features)?;
    if let Some(bad) = batch
        .iter()
        .find(|s| s.label as usize >= params.arch.num_classes)
    {
        return Err(Error::OutOfRange(format!(
            "label {} for a {}-class model",
            bad.label, params.arch.num_classes
        )));
    }
    Ok(())
}

/// Class probabilities for a single feature vector.
pub fn forward(params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    check_input(params, x)?;
    Ok(forward_inner(params, x).probs)
}

/// Index of the most probable class; ties go to the lowest index.
pub fn predict(params: &ParamVector, x: &[f64]) -> Result<usize> {
    let probs = forward(params, x)?;
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Mean cross-entropy over `batch`.
pub fn loss(params: &ParamVector, batch: &[TrafficSample]) -> Result<f64> {
    check_batch(params, batch)?;
    let total: f64 = batch
        .iter()
        .map(|s| {
            let probs = forward_inner(params, &s.features).probs;
            -probs[s.label as usize].max(PROB_FLOOR).ln()
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Gradient of [`loss`] with respect to every parameter.
pub fn grad(params: &ParamVector, batch: &[TrafficSample]) -> Result<ParamVector> {
    check_batch(params, batch)?;
    let arch = params.arch;
    let (w2_off, b2_off) = (arch.w2_offset(), arch.b2_offset());
    let w2 = &params.values[w2_off..b2_off];
    let mut g = vec![0.0; arch.param_count()];
    let mut delta_hidden = vec![0.0; arch.hidden_width];

    for sample in batch {
        let act = forward_inner(params, &sample.features);
        let label = sample.label as usize;
        // d(-ln p_y)/d logit_c = p_c - [c == y]; the clamp only matters once
        // p_y < 1e-12, where its derivative is zero
        let clamped = act.probs[label] < PROB_FLOOR;
        delta_hidden.iter_mut().for_each(|d| *d = 0.0);
        for c in 0..arch.num_classes {
            let dlogit = if clamped {
                0.0
            } else {
                act.probs[c] - if c == label { 1.0 } else { 0.0 }
            };
            let row = w2_off + c * arch.hidden_width;
            for (j, h) in act.hidden.iter().enumerate() {
                g[row + j] += dlogit * h;
                delta_hidden[j] += dlogit * w2[c * arch.hidden_width + j];
            }
            g[b2_off + c] += dlogit;
        }
        for (j, h) in act.hidden.iter().enumerate() {
            let dpre = delta_hidden[j] * (1.0 - h * h);
            let row = j * arch.input_dim;
            for (i, xi) in sample.features.iter().enumerate() {
                g[row + i] += dpre * xi;
            }
            g[arch.b1_offset() + j] += dpre;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    g.iter_mut().for_each(|v| *v *= scale);
    ParamVector::from_values(arch, g)
}

/// `params - eta * g`, element-wise.
pub fn sgd_step(params: &ParamVector, g: &ParamVector, eta: f64) -> Result<ParamVector> {
    if params.len() != g.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: g.len(),
        });
    }
    if !eta.is_finite() || eta < 0.0 {
        return Err(Error::InvalidRate(eta));
    }
    let values = params
        .values
        .iter()
        .zip(&g.values)
        .map(|(p, gi)| p - eta * gi)
        .collect();
    ParamVector::from_values(params.arch, values)
}
