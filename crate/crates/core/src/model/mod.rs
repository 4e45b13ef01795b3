//! The sequence autoencoder with its performance predictor.
//!
//! * the encoder is an LSTM over batch-index tokens whose per-step hidden
//!   states, each scaled to unit length, form the [`Embedding`];
//! * the predictor mean-pools the embedding and applies one affine layer
//!   followed by a logistic squashing onto `(0, 1)`;
//! * the decoder is an LSTM started from a projection of the last embedding
//!   vector. Each step attends over the whole embedding and emits a batch
//!   index; indices already emitted are masked out, so decoding always yields
//!   a permutation.

mod params;
mod pass;
mod train;

use ndarray::{Array2, Array3, ArrayView2, Axis};

pub use params::{AssemblyParams, Dims, ModelConfig, Tensor};
pub use train::{
    assembly_loss, assembly_loss_parts, loss_gradient, train_assembly, train_assembly_from, Adam, TrainedAssembly,
    TrainingConfig,
};

use crate::error::{invalid, Result};
use crate::strategy::Strategy;

/// Tolerance on the unit-norm invariant of embedding vectors.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// `T` unit-norm hidden vectors of dimension `d_enc`, one per position.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    vectors: Array2<f64>,
}

impl Embedding {
    /// Wraps already-normalized vectors, checking the unit-norm invariant.
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(invalid("an embedding needs at least one non-empty vector"));
        }
        for (t, row) in vectors.outer_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !n.is_finite() || (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(invalid(format!("embedding vector {t} has norm {n}")));
            }
        }
        Ok(Self { vectors })
    }

    /// Scales every row to unit length.
    pub fn from_unnormalized(mut vectors: Array2<f64>) -> Result<Self> {
        for mut row in vectors.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            if !(n.is_finite() && n > 0.0) {
                return Err(invalid("cannot normalize a zero or non-finite vector"));
            }
            row /= n;
        }
        Self::new(vectors)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.vectors
    }
}

fn check_strategy(params: &AssemblyParams, s: &Strategy) -> Result<()> {
    if s.len() != params.dims().t {
        return Err(invalid(format!(
            "strategy length {} does not match assembly length {}",
            s.len(),
            params.dims().t
        )));
    }
    Ok(())
}

fn check_matrix(params: &AssemblyParams, m: &ArrayView2<f64>) -> Result<()> {
    let d = params.dims();
    if m.dim() != (d.t, d.d_enc) {
        return Err(invalid(format!(
            "embedding shape {:?} does not match assembly ({}, {})",
            m.dim(),
            d.t,
            d.d_enc
        )));
    }
    Ok(())
}

fn stack(embeddings: &[&Embedding]) -> Array3<f64> {
    let views: Vec<_> = embeddings.iter().map(|e| e.vectors.view()).collect();
    ndarray::stack(Axis(0), &views).expect("embeddings share a shape")
}

/// Encodes one strategy.
pub fn encode(params: &AssemblyParams, s: &Strategy) -> Result<Embedding> {
    Ok(encode_many(params, std::slice::from_ref(s))?.remove(0))
}

/// Encodes a batch of strategies in one pass.
pub fn encode_many(params: &AssemblyParams, strategies: &[Strategy]) -> Result<Vec<Embedding>> {
    for s in strategies {
        check_strategy(params, s)?;
    }
    if strategies.is_empty() {
        return Ok(Vec::new());
    }
    let tokens: Vec<&[usize]> = strategies.iter().map(Strategy::as_slice).collect();
    let trace = pass::encode_batch(params, &tokens, false);
    Ok(trace
        .hidden
        .outer_iter()
        .map(|h| Embedding { vectors: h.to_owned() })
        .collect())
}

/// Predicted accuracy of an embedding.
pub fn predict(params: &AssemblyParams, e: &Embedding) -> Result<f64> {
    predict_matrix(params, e.vectors.view())
}

/// [`predict`] on an arbitrary `(T, d_enc)` matrix, without the unit-norm
/// requirement.
pub fn predict_matrix(params: &AssemblyParams, hidden: ArrayView2<f64>) -> Result<f64> {
    check_matrix(params, &hidden)?;
    let batch = hidden.insert_axis(Axis(0)).to_owned();
    Ok(pass::predict_batch(params, &batch).1[0])
}

pub fn predict_many(params: &AssemblyParams, embeddings: &[&Embedding]) -> Result<Vec<f64>> {
    for e in embeddings {
        check_matrix(params, &e.vectors.view())?;
    }
    if embeddings.is_empty() {
        return Ok(Vec::new());
    }
    Ok(pass::predict_batch(params, &stack(embeddings)).1.to_vec())
}

/// Greedy masked decoding of one embedding.
pub fn decode(params: &AssemblyParams, e: &Embedding) -> Result<Strategy> {
    Ok(decode_many(params, &[e])?.remove(0))
}

pub fn decode_many(params: &AssemblyParams, embeddings: &[&Embedding]) -> Result<Vec<Strategy>> {
    for e in embeddings {
        check_matrix(params, &e.vectors.view())?;
    }
    if embeddings.is_empty() {
        return Ok(Vec::new());
    }
    pass::greedy_decode(params, &stack(embeddings))
        .into_iter()
        .map(Strategy::new)
        .collect()
}

/// Gradient of the predicted accuracy w.r.t. every embedding vector.
///
/// Mean pooling makes every row identical: `σ'(z) · w / T`.
pub fn grad_wrt_hidden(params: &AssemblyParams, e: &Embedding) -> Result<Array2<f64>> {
    grad_wrt_hidden_matrix(params, e.vectors.view())
}

pub fn grad_wrt_hidden_matrix(params: &AssemblyParams, hidden: ArrayView2<f64>) -> Result<Array2<f64>> {
    let y = predict_matrix(params, hidden)?;
    let t = hidden.nrows();
    let w = params[Tensor::PredictorWeights]
        .column(0)
        .mapv(|v| v * y * (1.0 - y) / t as f64);
    let mut g = Array2::zeros(hidden.raw_dim());
    for mut row in g.outer_iter_mut() {
        row.assign(&w);
    }
    Ok(g)
}

/// One ascent step `h'_t = normalize(h_t + eta * g_t)`.
///
/// Rows whose update is exactly zero are copied unchanged.
pub fn latent_step(e: &Embedding, g: &Array2<f64>, eta: f64) -> Result<Embedding> {
    if g.dim() != e.vectors.dim() {
        return Err(invalid(format!(
            "gradient shape {:?} does not match embedding {:?}",
            g.dim(),
            e.vectors.dim()
        )));
    }
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(invalid(format!("step size {eta} must be finite and non-negative")));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(invalid("gradient contains non-finite values"));
    }
    let mut out = e.vectors.clone();
    for (mut row, grow) in out.outer_iter_mut().zip(g.outer_iter()) {
        if eta == 0.0 || grow.iter().all(|&v| v == 0.0) {
            continue;
        }
        row.scaled_add(eta, &grow);
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) {
            return Err(invalid("ascent step collapsed an embedding vector to zero"));
        }
        row /= n;
    }
    Embedding::new(out)
}
