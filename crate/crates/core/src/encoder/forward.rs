use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{EncoderParams, FrameMask, LAYER_NORM_EPS};
use crate::error::{mismatch, Result};
use crate::matrix::Matrix;
use crate::sequence::FrameDescriptorSequence;

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) x: Matrix,
    pub(crate) mask: FrameMask,
    pub(crate) q: Matrix,
    pub(crate) k: Matrix,
    pub(crate) v: Matrix,
    /// Attention probabilities per head, `f × f`.
    pub(crate) attn: Vec<Matrix>,
    /// Concatenated head outputs before `W_O`.
    pub(crate) heads_out: Matrix,
    /// Dropout multipliers (0 or `1/(1-p)`) for the attention output; `None` at eval.
    pub(crate) drop_attn: Option<Vec<f64>>,
    pub(crate) ln1: LayerNormCache,
    pub(crate) h: Matrix,
    pub(crate) z1: Matrix,
    pub(crate) drop_ffn: Option<Vec<f64>>,
    pub(crate) ffn_hidden: Matrix,
    pub(crate) ln2: LayerNormCache,
    pub(crate) output: Matrix,
}

impl ForwardCache {
    /// Encoder output, `f × d`, with padded rows zeroed.
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn mask(&self) -> &FrameMask {
        &self.mask
    }

    /// Attention probabilities of each head.
    pub fn attention(&self) -> &[Matrix] {
        &self.attn
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormCache {
    pub(crate) normalized: Matrix,
    pub(crate) inv_std: Vec<f64>,
}

fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, LayerNormCache) {
    let (f, d) = x.shape();
    let mut normalized = Matrix::zeros(f, d);
    let mut out = Matrix::zeros(f, d);
    let mut inv_std = Vec::with_capacity(f);
    for i in 0..f {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
        inv_std.push(s);
        let nrow = normalized.row_mut(i);
        for (n, v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * s;
        }
        let nrow = normalized.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = gain[j] * nrow[j] + bias[j];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

fn dropout_pattern<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
}

/// Row-wise softmax of `scale · q kᵀ` with padded keys excluded.
pub(crate) fn attention_probs(q: &Matrix, k: &Matrix, mask: &FrameMask, scale: f64) -> Matrix {
    let mut logits = q.matmul_t(k);
    let f = logits.rows();
    for i in 0..f {
        let row = logits.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for (j, v) in row.iter_mut().enumerate() {
            *v *= scale;
            if mask.is_real(j) && *v > max {
                max = *v;
            }
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            *v = if mask.is_real(j) { libm::exp(*v - max) } else { 0.0 };
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    logits
}

fn check_inputs(params: &EncoderParams, x: &Matrix, mask: &FrameMask) -> Result<()> {
    if x.cols() != params.config.dim {
        return Err(mismatch("frame descriptor dim", params.config.dim, x.cols()));
    }
    if x.rows() != mask.len() {
        return Err(mismatch("frame mask length", x.rows(), mask.len()));
    }
    if x.rows() == 0 {
        return Err(mismatch("frame count", 1, 0));
    }
    Ok(())
}

/// Runs the encoder and keeps every intermediate. Dropout is applied iff `dropout_rng` is given
/// and the configured rate is positive.
pub fn forward<R: Rng + ?Sized>(
    params: &EncoderParams,
    x: &Matrix,
    mask: &FrameMask,
    dropout_rng: Option<&mut R>,
) -> Result<ForwardCache> {
    check_inputs(params, x, mask)?;
    let cfg = &params.config;
    let (f, d) = x.shape();
    let dh = cfg.head_dim();
    let scale = 1.0 / libm::sqrt(dh as f64);

    let q = x.matmul(&params.w_q);
    let k = x.matmul(&params.w_k);
    let v = x.matmul(&params.w_v);

    let mut attn = Vec::with_capacity(cfg.heads);
    let mut heads_out = Matrix::zeros(f, d);
    for head in 0..cfg.heads {
        let qh = q.column_block(head * dh, dh);
        let kh = k.column_block(head * dh, dh);
        let vh = v.column_block(head * dh, dh);
        let probs = attention_probs(&qh, &kh, mask, scale);
        heads_out.set_column_block(head * dh, &probs.matmul(&vh));
        attn.push(probs);
    }
    let mut attn_out = heads_out.matmul(&params.w_o);

    let (drop_attn, drop_ffn) = match dropout_rng {
        Some(rng) if cfg.dropout_rate > 0.0 => (
            Some(dropout_pattern(f * d, cfg.dropout_rate, rng)),
            Some(dropout_pattern(f * cfg.ffn_dim, cfg.dropout_rate, rng)),
        ),
        _ => (None, None),
    };
    if let Some(m) = &drop_attn {
        attn_out.as_mut_slice().iter_mut().zip(m).for_each(|(a, s)| *a *= s);
    }

    let mut residual = x.clone();
    residual.add_assign(&attn_out);
    let (h, ln1) = layer_norm(&residual, &params.ln1_gain, &params.ln1_bias);

    let mut z1 = h.matmul(&params.ffn_w1);
    for i in 0..f {
        z1.row_mut(i).iter_mut().zip(&params.ffn_b1).for_each(|(z, b)| *z += b);
    }
    let mut ffn_hidden = z1.clone();
    ffn_hidden.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    if let Some(m) = &drop_ffn {
        ffn_hidden.as_mut_slice().iter_mut().zip(m).for_each(|(a, s)| *a *= s);
    }
    let mut z2 = ffn_hidden.matmul(&params.ffn_w2);
    for i in 0..f {
        z2.row_mut(i).iter_mut().zip(&params.ffn_b2).for_each(|(z, b)| *z += b);
    }
    let mut residual2 = h.clone();
    residual2.add_assign(&z2);
    let (mut output, ln2) = layer_norm(&residual2, &params.ln2_gain, &params.ln2_bias);
    for i in 0..f {
        if !mask.is_real(i) {
            output.row_mut(i).fill(0.0);
        }
    }

    Ok(ForwardCache {
        x: x.clone(),
        mask: mask.clone(),
        q,
        k,
        v,
        attn,
        heads_out,
        drop_attn,
        ln1,
        h,
        z1,
        drop_ffn,
        ffn_hidden,
        ln2,
        output,
    })
}

/// Refines a frame sequence; output has the input's shape. Dropout is active only when `training`.
pub fn encode_frames<R: Rng + ?Sized>(
    params: &EncoderParams,
    x: &FrameDescriptorSequence,
    mask: &FrameMask,
    training: bool,
    rng: &mut R,
) -> Result<FrameDescriptorSequence> {
    let cache = forward(params, x.matrix(), mask, if training { Some(rng) } else { None })?;
    FrameDescriptorSequence::new(cache.output)
}

/// Attention each real frame receives, averaged over heads and real query positions,
/// normalized to sum to one. Padded frames get zero.
pub fn mean_attention_response(
    params: &EncoderParams,
    x: &FrameDescriptorSequence,
    mask: &FrameMask,
) -> Result<Vec<f64>> {
    let cache = forward::<rand_chacha::ChaCha8Rng>(params, x.matrix(), mask, None)?;
    let f = x.frames();
    let mut response = vec![0.0; f];
    for probs in &cache.attn {
        for i in (0..f).filter(|&i| mask.is_real(i)) {
            response.iter_mut().zip(probs.row(i)).for_each(|(r, p)| *r += p);
        }
    }
    for (j, r) in response.iter_mut().enumerate() {
        if !mask.is_real(j) {
            *r = 0.0;
        }
    }
    let total: f64 = response.iter().sum();
    response.iter_mut().for_each(|r| *r /= total);
    Ok(response)
}
