//! Single-layer multi-head self-attention encoder over frame descriptors.
//!
//! The layer is post-norm with no positional encoding:
//!
//! ```text
//! h = LayerNorm1(x + Dropout(MultiHead(x)))
//! y = LayerNorm2(h + W2 · Dropout(ReLU(W1 · h + b1)) + b2)
//! ```
//!
//! Padded frames are masked out as attention keys and their output rows are
//! zeroed, so appending padding never changes the rows of real frames.

mod backward;
mod forward;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{mismatch, Error, Result};
use crate::features::l2_normalize;
use crate::matrix::Matrix;
use crate::sequence::FrameDescriptorSequence;

pub use backward::{backward_from_cache, encoder_backward, video_backward};
pub use forward::{encode_frames, forward, mean_attention_response, ForwardCache};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { dim: 1024, heads: 8, ffn_dim: 2048, dropout_rate: 0.5, seed: 0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "encoder dims must be positive (dim {}, heads {}, ffn_dim {})",
                self.dim, self.heads, self.ffn_dim
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate {} must be in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Glorot-uniform half-width for a `fan_in × fan_out` weight.
    pub fn init_bound(fan_in: usize, fan_out: usize) -> f64 {
        libm::sqrt(6.0 / (fan_in + fan_out) as f64)
    }
}

/// Names of the parameter tensors in their fixed serialization order.
pub const TENSOR_NAMES: [&str; 12] = [
    "w_q", "w_k", "w_v", "w_o", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln1_gain", "ln1_bias",
    "ln2_gain", "ln2_bias",
];

/// All learnable weights. The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Vec<f64>,
    pub ffn_w2: Matrix,
    pub ffn_b2: Vec<f64>,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

impl EncoderParams {
    /// All-zero tensors shaped for `config`.
    pub fn zeros(config: EncoderConfig) -> Self {
        let d = config.dim;
        let h = config.ffn_dim;
        Self {
            config,
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            ffn_w1: Matrix::zeros(d, h),
            ffn_b1: vec![0.0; h],
            ffn_w2: Matrix::zeros(h, d),
            ffn_b2: vec![0.0; d],
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// `(rows, cols)` of every tensor, in [`TENSOR_NAMES`] order. Vectors are `1 × n`.
    pub fn tensor_shapes(config: &EncoderConfig) -> [(usize, usize); 12] {
        let d = config.dim;
        let h = config.ffn_dim;
        [(d, d), (d, d), (d, d), (d, d), (d, h), (1, h), (h, d), (1, d), (1, d), (1, d), (1, d), (1, d)]
    }

    pub fn tensors(&self) -> [&[f64]; 12] {
        [
            self.w_q.as_slice(),
            self.w_k.as_slice(),
            self.w_v.as_slice(),
            self.w_o.as_slice(),
            self.ffn_w1.as_slice(),
            &self.ffn_b1,
            self.ffn_w2.as_slice(),
            &self.ffn_b2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 12] {
        [
            self.w_q.as_mut_slice(),
            self.w_k.as_mut_slice(),
            self.w_v.as_mut_slice(),
            self.w_o.as_mut_slice(),
            self.ffn_w1.as_mut_slice(),
            &mut self.ffn_b1,
            self.ffn_w2.as_mut_slice(),
            &mut self.ffn_b2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds parameters from flat tensors in [`TENSOR_NAMES`] order.
    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        if tensors.len() != TENSOR_NAMES.len() {
            return Err(mismatch("encoder tensor count", TENSOR_NAMES.len(), tensors.len()));
        }
        let mut params = Self::zeros(config);
        for (dst, src) in params.tensors_mut().into_iter().zip(tensors) {
            if dst.len() != src.len() {
                return Err(mismatch("encoder tensor length", dst.len(), src.len()));
            }
            dst.copy_from_slice(&src);
        }
        if !params.is_finite() {
            return Err(Error::MalformedInput("encoder parameters contain non-finite values".into()));
        }
        Ok(params)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            dst.iter_mut().zip(src).for_each(|(a, b)| *a += scale * b);
        }
    }
}

/// Deterministic Glorot-uniform initialization from `config.seed`.
pub fn init_encoder(config: EncoderConfig) -> Result<EncoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = EncoderParams::zeros(config);
    let d = config.dim;
    let h = config.ffn_dim;
    let mut fill = |m: &mut Matrix, fan_in: usize, fan_out: usize| {
        let a = EncoderConfig::init_bound(fan_in, fan_out);
        m.as_mut_slice().iter_mut().for_each(|v| *v = rng.random_range(-a..a));
    };
    fill(&mut params.w_q, d, d);
    fill(&mut params.w_k, d, d);
    fill(&mut params.w_v, d, d);
    fill(&mut params.w_o, d, d);
    fill(&mut params.ffn_w1, d, h);
    fill(&mut params.ffn_w2, h, d);
    params.ln1_gain.fill(1.0);
    params.ln2_gain.fill(1.0);
    Ok(params)
}

/// Marks real frames (`true`) versus padding (`false`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMask(Vec<bool>);

impl FrameMask {
    pub fn new(flags: Vec<bool>) -> Result<Self> {
        if !flags.iter().any(|&b| b) {
            return Err(Error::MalformedInput("frame mask has no real frames".into()));
        }
        Ok(Self(flags))
    }

    pub fn all(len: usize) -> Result<Self> {
        Self::new(vec![true; len])
    }

    /// `real` true entries followed by `len - real` false entries.
    pub fn prefix(real: usize, len: usize) -> Result<Self> {
        Self::new((0..len).map(|i| i < real).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn is_real(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn real_count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

/// An L2-normalized video-level descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoDescriptor(Vec<f64>);

impl VideoDescriptor {
    /// Normalizes `v`; fails on a (near-)zero vector.
    pub fn from_raw(v: &[f64]) -> Result<Self> {
        Ok(Self(l2_normalize(v)?))
    }

    /// Wraps a vector that is already unit norm (within `1e-9`) without rescaling it.
    pub fn from_unit(v: Vec<f64>) -> Result<Self> {
        let n = crate::matrix::norm(&v);
        if !n.is_finite() || libm::fabs(n - 1.0) > 1e-9 {
            return Err(Error::MalformedInput(format!("expected a unit vector, got norm {n}")));
        }
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Unnormalized mean over the real rows.
pub fn mean_pool(rows: &Matrix, mask: &FrameMask) -> Result<Vec<f64>> {
    if rows.rows() != mask.len() {
        return Err(mismatch("frame mask", rows.rows(), mask.len()));
    }
    let mut mean = vec![0.0; rows.cols()];
    for (i, row) in rows.row_iter().enumerate() {
        if mask.is_real(i) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
    }
    let count = mask.real_count() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    Ok(mean)
}

/// Mean over the real frames followed by L2 normalization.
pub fn aggregate_video(refined: &FrameDescriptorSequence, mask: &FrameMask) -> Result<VideoDescriptor> {
    let mean = mean_pool(refined.matrix(), mask)?;
    VideoDescriptor::from_raw(&mean)
        .map_err(|_| Error::Degenerate("mean of real frames is the zero vector".into()))
}
