use std::fs;
use std::ops::{Index, IndexMut};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, TsoError};

/// Layer sizes of the assembly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    /// Feed an attention context over the whole embedding into every decoder
    /// step. When off, the decoder only sees the embedding through its
    /// initial state.
    pub attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            token_dim: 32,
            enc_hidden: 96,
            dec_hidden: 128,
            attention: true,
        }
    }
}

/// Full dimension header: the model sizes plus the strategy length `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub t: usize,
    pub token_dim: usize,
    pub d_enc: usize,
    pub d_dec: usize,
    pub attention: bool,
}

impl Dims {
    pub fn new(t: usize, model: &ModelConfig) -> Result<Self> {
        if t == 0 || model.token_dim == 0 || model.enc_hidden == 0 || model.dec_hidden == 0 {
            return Err(invalid("all assembly dimensions must be positive"));
        }
        Ok(Self {
            t,
            token_dim: model.token_dim,
            d_enc: model.enc_hidden,
            d_dec: model.dec_hidden,
            attention: model.attention,
        })
    }

    /// Vocabulary size: the `t` batch indices plus a start-of-sequence token.
    pub fn vocab(&self) -> usize {
        self.t + 1
    }

    pub fn sos(&self) -> usize {
        self.t
    }

    /// Width of the attention context fed to the decoder (0 without attention).
    pub fn context_dim(&self) -> usize {
        if self.attention {
            self.d_enc
        } else {
            0
        }
    }

    pub fn enc_input(&self) -> usize {
        self.token_dim + self.d_enc
    }

    pub fn dec_input(&self) -> usize {
        self.token_dim + self.context_dim() + self.d_dec
    }
}

/// Named parameter tensors. Weight matrices are stored `(inputs, outputs)`
/// so that a batch of row vectors multiplies on the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tensor {
    TokenEmbedding,
    EncoderWeights,
    EncoderBias,
    PredictorWeights,
    PredictorBias,
    InitWeights,
    InitBias,
    QueryWeights,
    DecoderWeights,
    DecoderBias,
    OutputWeights,
    OutputBias,
}

impl Tensor {
    pub const ALL: [Tensor; 12] = [
        Tensor::TokenEmbedding,
        Tensor::EncoderWeights,
        Tensor::EncoderBias,
        Tensor::PredictorWeights,
        Tensor::PredictorBias,
        Tensor::InitWeights,
        Tensor::InitBias,
        Tensor::QueryWeights,
        Tensor::DecoderWeights,
        Tensor::DecoderBias,
        Tensor::OutputWeights,
        Tensor::OutputBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::TokenEmbedding => "token_embedding",
            Tensor::EncoderWeights => "encoder_weights",
            Tensor::EncoderBias => "encoder_bias",
            Tensor::PredictorWeights => "predictor_weights",
            Tensor::PredictorBias => "predictor_bias",
            Tensor::InitWeights => "init_weights",
            Tensor::InitBias => "init_bias",
            Tensor::QueryWeights => "query_weights",
            Tensor::DecoderWeights => "decoder_weights",
            Tensor::DecoderBias => "decoder_bias",
            Tensor::OutputWeights => "output_weights",
            Tensor::OutputBias => "output_bias",
        }
    }

    pub fn shape(self, d: &Dims) -> (usize, usize) {
        match self {
            Tensor::TokenEmbedding => (d.vocab(), d.token_dim),
            Tensor::EncoderWeights => (d.enc_input(), 4 * d.d_enc),
            Tensor::EncoderBias => (1, 4 * d.d_enc),
            Tensor::PredictorWeights => (d.d_enc, 1),
            Tensor::PredictorBias => (1, 1),
            Tensor::InitWeights => (d.d_enc, d.d_dec),
            Tensor::InitBias => (1, d.d_dec),
            Tensor::QueryWeights if d.attention => (d.d_dec, d.d_enc),
            Tensor::QueryWeights => (0, 0),
            Tensor::DecoderWeights => (d.dec_input(), 4 * d.d_dec),
            Tensor::DecoderBias => (1, 4 * d.d_dec),
            Tensor::OutputWeights => (d.d_dec, d.t),
            Tensor::OutputBias => (1, d.t),
        }
    }

    fn fan_in(self, d: &Dims) -> usize {
        match self {
            // a one-hot lookup has a single active input
            Tensor::TokenEmbedding => 1,
            Tensor::EncoderWeights | Tensor::EncoderBias => d.enc_input(),
            Tensor::PredictorWeights | Tensor::PredictorBias => d.d_enc,
            Tensor::InitWeights | Tensor::InitBias => d.d_enc,
            Tensor::QueryWeights => d.d_dec,
            Tensor::DecoderWeights | Tensor::DecoderBias => d.dec_input(),
            Tensor::OutputWeights | Tensor::OutputBias => d.d_dec,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Every trainable tensor of the encoder, predictor and decoder. The same
/// layout doubles as a gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct AssemblyParams {
    dims: Dims,
    tensors: Vec<Array2<f64>>,
}

impl AssemblyParams {
    pub fn zeros(dims: Dims) -> Self {
        let tensors = Tensor::ALL.iter().map(|t| Array2::zeros(t.shape(&dims))).collect();
        Self { dims, tensors }
    }

    /// Uniform initialization in `[-r, r]` with `r = 1/sqrt(fan_in)`.
    pub fn init(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Self::zeros(dims);
        for t in Tensor::ALL {
            let r = 1.0 / (t.fan_in(&dims) as f64).sqrt();
            params[t].mapv_inplace(|_| rng.random_range(-r..=r));
        }
        params
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Tensor, &Array2<f64>)> {
        Tensor::ALL.into_iter().zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (Tensor, &mut Array2<f64>)> {
        Tensor::ALL.into_iter().zip(&mut self.tensors)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            dims: self.dims,
            tensors: self
                .iter()
                .map(|(t, a)| StoredTensor {
                    name: t.name().to_string(),
                    shape: [a.nrows(), a.ncols()],
                    data: a.iter().copied().collect(),
                })
                .collect(),
        };
        fs::write(path, serde_json::to_vec(&ckpt)?)?;
        Ok(())
    }

    /// Loads a checkpoint and checks its dimension header against `expected`.
    pub fn load(path: &Path, expected: &Dims) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(TsoError::Checkpoint(format!("unknown format {:?}", ckpt.format)));
        }
        if ckpt.dims != *expected {
            return Err(TsoError::Checkpoint(format!(
                "checkpoint dimensions {:?} do not match run configuration {:?}",
                ckpt.dims, expected
            )));
        }
        let mut params = Self::zeros(ckpt.dims);
        if ckpt.tensors.len() != Tensor::ALL.len() {
            return Err(TsoError::Checkpoint("wrong number of tensors".into()));
        }
        for (t, stored) in Tensor::ALL.into_iter().zip(ckpt.tensors) {
            let shape = t.shape(&ckpt.dims);
            if stored.name != t.name() || stored.shape != [shape.0, shape.1] {
                return Err(TsoError::Checkpoint(format!(
                    "tensor {} has unexpected name or shape",
                    stored.name
                )));
            }
            params[t] = Array2::from_shape_vec(shape, stored.data).map_err(|e| TsoError::Checkpoint(e.to_string()))?;
        }
        if !params.is_finite() {
            return Err(TsoError::Checkpoint("non-finite parameter values".into()));
        }
        Ok(params)
    }
}

impl Index<Tensor> for AssemblyParams {
    type Output = Array2<f64>;

    fn index(&self, t: Tensor) -> &Array2<f64> {
        &self.tensors[t.index()]
    }
}

impl IndexMut<Tensor> for AssemblyParams {
    fn index_mut(&mut self, t: Tensor) -> &mut Array2<f64> {
        &mut self.tensors[t.index()]
    }
}

const CHECKPOINT_FORMAT: &str = "tso-assembly-v1";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    dims: Dims,
    tensors: Vec<StoredTensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_dims() {
        let dims = Dims::new(100, &ModelConfig::default()).unwrap();
        let p = AssemblyParams::init(dims, 0);
        assert_eq!(p[Tensor::TokenEmbedding].dim(), (101, 32));
        assert_eq!(p[Tensor::EncoderWeights].dim(), (128, 384));
        assert_eq!(p[Tensor::PredictorWeights].dim(), (96, 1));
        assert_eq!(p[Tensor::InitWeights].dim(), (96, 128));
        assert_eq!(p[Tensor::QueryWeights].dim(), (128, 96));
        assert_eq!(p[Tensor::DecoderWeights].dim(), (32 + 96 + 128, 512));
        assert_eq!(p[Tensor::OutputWeights].dim(), (128, 100));
        assert!(p.is_finite());

        let plain = ModelConfig {
            attention: false,
            ..ModelConfig::default()
        };
        let p = AssemblyParams::init(Dims::new(10, &plain).unwrap(), 0);
        assert_eq!(p[Tensor::QueryWeights].len(), 0);
        assert_eq!(p[Tensor::DecoderWeights].dim(), (32 + 128, 512));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let dims = Dims::new(12, &ModelConfig::default()).unwrap();
        let p = AssemblyParams::init(dims, 3);
        let r = 1.0 / (dims.dec_input() as f64).sqrt();
        assert!(p[Tensor::DecoderWeights].iter().all(|v| v.abs() <= r));
        assert_eq!(p, AssemblyParams::init(dims, 3));
        assert_ne!(p, AssemblyParams::init(dims, 4));
    }

    #[test]
    fn checkpoint_round_trip_and_header_check() {
        let dims = Dims::new(6, &ModelConfig::default()).unwrap();
        let p = AssemblyParams::init(dims, 9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        p.save(&path).unwrap();
        assert_eq!(AssemblyParams::load(&path, &dims).unwrap(), p);

        let other = Dims { t: 7, ..dims };
        assert!(matches!(
            AssemblyParams::load(&path, &other),
            Err(TsoError::Checkpoint(_))
        ));
    }
}
