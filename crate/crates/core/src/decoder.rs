//! A weightless single-head causal decoder.
//!
//! Layer `l` computes `A_l = softmax(h_l h_lᵀ / sqrt(D) + M)` with the causal
//! mask `M`, then `h_{l+1} = rmsnorm(h_l + alpha * A_l h_l)`. Attention
//! matrices are the row-stochastic probabilities, not the value-weighted
//! output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyDecoderConfig {
    pub num_layers: usize,
    pub mix_alpha: f64,
    pub epsilon: f64,
}

impl Default for ToyDecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            mix_alpha: 0.5,
            epsilon: 1e-6,
        }
    }
}

impl ToyDecoderConfig {
    pub fn with_layers(num_layers: usize) -> Self {
        Self {
            num_layers,
            ..Default::default()
        }
    }
}

/// Hidden states and attention for layers `start_layer..num_layers`.
///
/// `hidden[i]` holds the input of layer `start_layer + i`; the final entry is
/// the output of the last layer. `attention[i]` belongs to layer
/// `start_layer + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderTrace {
    pub start_layer: usize,
    pub hidden: Vec<Matrix>,
    pub attention: Vec<Matrix>,
}

impl DecoderTrace {
    pub fn end_layer(&self) -> usize {
        self.start_layer + self.attention.len()
    }

    /// Input hidden states of `layer` (or the final output when
    /// `layer == end_layer()`).
    pub fn hidden_at(&self, layer: usize) -> Option<&Matrix> {
        layer.checked_sub(self.start_layer).and_then(|i| self.hidden.get(i))
    }

    pub fn attention_at(&self, layer: usize) -> Option<&Matrix> {
        layer.checked_sub(self.start_layer).and_then(|i| self.attention.get(i))
    }

    /// Row sums of every attention matrix plus the listed rows of each,
    /// for diagnostic dumps.
    pub fn diagnostics(&self, rows: &[usize]) -> TraceDiagnostics {
        let layers = self
            .attention
            .iter()
            .enumerate()
            .map(|(i, a)| LayerDiagnostics {
                layer: self.start_layer + i,
                tokens: a.rows(),
                row_sums: a.iter_rows().map(|r| r.iter().sum()).collect(),
                rows: rows
                    .iter()
                    .filter(|&&r| r < a.rows())
                    .map(|&r| (r, a.row(r).to_vec()))
                    .collect(),
            })
            .collect();
        TraceDiagnostics { layers }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceDiagnostics {
    pub layers: Vec<LayerDiagnostics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub tokens: usize,
    pub row_sums: Vec<f64>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

/// Causal softmax attention probabilities for one layer.
pub fn causal_attention(h: &Matrix) -> Matrix {
    let n = h.rows();
    let scale = 1.0 / (h.cols() as f64).sqrt();
    let mut a = Matrix::zeros(n, n);
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        logits.clear();
        logits.extend((0..=i).map(|j| dot(h.row(i), h.row(j)) * scale));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let row = a.row_mut(i);
        let mut sum = 0.0;
        for (dst, &z) in row.iter_mut().zip(&logits) {
            *dst = (z - max).exp();
            sum += *dst;
        }
        let inv = 1.0 / sum;
        row[..=i].iter_mut().for_each(|v| *v *= inv);
    }
    a
}

fn rmsnorm_rows(m: &mut Matrix, epsilon: f64) {
    let d = m.cols() as f64;
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + epsilon).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

fn layer_step(h: &Matrix, a: &Matrix, config: &ToyDecoderConfig) -> Matrix {
    let (n, d) = (h.rows(), h.cols());
    let mut next = h.clone();
    let mut mixed = vec![0.0; d];
    for i in 0..n {
        mixed.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..=i {
            let w = a.get(i, j);
            for (m, x) in mixed.iter_mut().zip(h.row(j)) {
                *m += w * x;
            }
        }
        for (dst, m) in next.row_mut(i).iter_mut().zip(&mixed) {
            *dst += config.mix_alpha * m;
        }
    }
    rmsnorm_rows(&mut next, config.epsilon);
    next
}

/// Runs layers `start_layer..num_layers` from the given hidden states.
pub fn resume_forward(hidden: &Matrix, start_layer: usize, config: &ToyDecoderConfig) -> Result<DecoderTrace> {
    if start_layer >= config.num_layers {
        return Err(Error::invalid(format!(
            "start layer {start_layer} is not below the layer count {}",
            config.num_layers
        )));
    }
    if hidden.rows() == 0 || hidden.cols() == 0 {
        return Err(Error::invalid("decoder input needs at least one row and column"));
    }
    if !hidden.is_finite() {
        return Err(Error::invalid("decoder input contains non-finite values"));
    }
    let layers = config.num_layers - start_layer;
    let mut states = Vec::with_capacity(layers + 1);
    let mut attention = Vec::with_capacity(layers);
    states.push(hidden.clone());
    for _ in 0..layers {
        let h = states.last().expect("non-empty");
        let a = causal_attention(h);
        let next = layer_step(h, &a, config);
        attention.push(a);
        states.push(next);
    }
    Ok(DecoderTrace {
        start_layer,
        hidden: states,
        attention,
    })
}

pub fn forward(embeddings: &Matrix, config: &ToyDecoderConfig) -> Result<DecoderTrace> {
    resume_forward(embeddings, 0, config)
}

/// Mean over heads, for traces imported from multi-head models.
pub fn average_heads(heads: &[Matrix]) -> Result<Matrix> {
    let first = heads.first().ok_or_else(|| Error::invalid("no attention heads"))?;
    if heads.iter().any(|h| h.rows() != first.rows() || h.cols() != first.cols()) {
        return Err(Error::invalid("attention heads differ in shape"));
    }
    let inv = 1.0 / heads.len() as f64;
    let mut out = Matrix::zeros(first.rows(), first.cols());
    for i in 0..first.rows() {
        for j in 0..first.cols() {
            out.set(i, j, heads.iter().map(|h| h.get(i, j)).sum::<f64>() * inv);
        }
    }
    Ok(out)
}
