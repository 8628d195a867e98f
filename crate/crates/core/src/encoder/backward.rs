use alloc::vec::Vec;

use super::forward::{forward, ForwardCache, LayerNormCache};
use super::{mean_pool, EncoderParams, FrameMask};
use crate::error::{mismatch, Result};
use crate::matrix::{dot, norm, Matrix};

/// Returns the input gradient and accumulates `gain`/`bias` gradients.
fn layer_norm_backward(
    upstream: &Matrix,
    cache: &LayerNormCache,
    gain: &[f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
) -> Matrix {
    let (f, d) = upstream.shape();
    let mut dx = Matrix::zeros(f, d);
    let mut dxhat = alloc::vec![0.0; d];
    for i in 0..f {
        let dy = upstream.row(i);
        let xhat = cache.normalized.row(i);
        for j in 0..d {
            d_gain[j] += dy[j] * xhat[j];
            d_bias[j] += dy[j];
            dxhat[j] = dy[j] * gain[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xhat) / d as f64;
        let s = cache.inv_std[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = s * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn add_column_sums(acc: &mut [f64], m: &Matrix) {
    for row in m.row_iter() {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
}

/// Exact gradients of `Σ upstream ⊙ output` given a recorded forward pass.
///
/// Dropout, if it was active, is replayed from the patterns stored in the cache.
pub fn backward_from_cache(
    params: &EncoderParams,
    cache: &ForwardCache,
    upstream: &Matrix,
) -> Result<(EncoderParams, Matrix)> {
    if upstream.shape() != cache.output.shape() {
        return Err(mismatch("upstream gradient rows", cache.output.rows(), upstream.rows()));
    }
    let cfg = &params.config;
    let (f, _) = upstream.shape();
    let dh = cfg.head_dim();
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut grads = params.zeros_like();

    let mut dy = upstream.clone();
    for i in 0..f {
        if !cache.mask.is_real(i) {
            dy.row_mut(i).fill(0.0);
        }
    }

    // Second sub-layer: y = LN2(h + FFN(h)).
    let d_res2 = layer_norm_backward(&dy, &cache.ln2, &params.ln2_gain, &mut grads.ln2_gain, &mut grads.ln2_bias);
    add_column_sums(&mut grads.ffn_b2, &d_res2);
    grads.ffn_w2 = cache.ffn_hidden.t_matmul(&d_res2);
    let mut d_hidden = d_res2.matmul_t(&params.ffn_w2);
    if let Some(m) = &cache.drop_ffn {
        d_hidden.as_mut_slice().iter_mut().zip(m).for_each(|(g, s)| *g *= s);
    }
    for (g, z) in d_hidden.as_mut_slice().iter_mut().zip(cache.z1.as_slice()) {
        if *z <= 0.0 {
            *g = 0.0;
        }
    }
    add_column_sums(&mut grads.ffn_b1, &d_hidden);
    grads.ffn_w1 = cache.h.t_matmul(&d_hidden);
    let mut dh_total = d_res2;
    dh_total.add_assign(&d_hidden.matmul_t(&params.ffn_w1));

    // First sub-layer: h = LN1(x + MultiHead(x)).
    let d_res1 = layer_norm_backward(&dh_total, &cache.ln1, &params.ln1_gain, &mut grads.ln1_gain, &mut grads.ln1_bias);
    let mut dx = d_res1.clone();
    let mut d_attn_out = d_res1;
    if let Some(m) = &cache.drop_attn {
        d_attn_out.as_mut_slice().iter_mut().zip(m).for_each(|(g, s)| *g *= s);
    }
    grads.w_o = cache.heads_out.t_matmul(&d_attn_out);
    let d_heads = d_attn_out.matmul_t(&params.w_o);

    let mut dq = Matrix::zeros(f, cfg.dim);
    let mut dk = Matrix::zeros(f, cfg.dim);
    let mut dv = Matrix::zeros(f, cfg.dim);
    for (head, probs) in cache.attn.iter().enumerate() {
        let off = head * dh;
        let d_out = d_heads.column_block(off, dh);
        let vh = cache.v.column_block(off, dh);
        let qh = cache.q.column_block(off, dh);
        let kh = cache.k.column_block(off, dh);

        dv.set_column_block(off, &probs.t_matmul(&d_out));
        let d_probs = d_out.matmul_t(&vh);
        let mut d_logits = Matrix::zeros(f, f);
        for i in 0..f {
            let p = probs.row(i);
            let g = d_probs.row(i);
            let inner = dot(p, g);
            for (j, o) in d_logits.row_mut(i).iter_mut().enumerate() {
                *o = scale * p[j] * (g[j] - inner);
            }
        }
        dq.set_column_block(off, &d_logits.matmul(&kh));
        dk.set_column_block(off, &d_logits.t_matmul(&qh));
    }

    grads.w_q = cache.x.t_matmul(&dq);
    grads.w_k = cache.x.t_matmul(&dk);
    grads.w_v = cache.x.t_matmul(&dv);
    dx.add_assign(&dq.matmul_t(&params.w_q));
    dx.add_assign(&dk.matmul_t(&params.w_k));
    dx.add_assign(&dv.matmul_t(&params.w_v));
    Ok((grads, dx))
}

/// Exact parameter and input gradients of `Σ upstream ⊙ encode(x)` in evaluation mode.
pub fn encoder_backward(
    params: &EncoderParams,
    x: &Matrix,
    mask: &FrameMask,
    upstream: &Matrix,
) -> Result<(EncoderParams, Matrix)> {
    let cache = forward::<rand_chacha::ChaCha8Rng>(params, x, mask, None)?;
    backward_from_cache(params, &cache, upstream)
}

/// Upstream gradient on encoder rows given a gradient on the normalized video descriptor
/// `z = w / ‖w‖`, where `w` is the mean of the real rows.
pub fn video_backward(rows: &Matrix, mask: &FrameMask, d_z: &[f64]) -> Result<Matrix> {
    let w = mean_pool(rows, mask)?;
    if d_z.len() != w.len() {
        return Err(mismatch("video gradient", w.len(), d_z.len()));
    }
    let n = norm(&w);
    let z: Vec<f64> = w.iter().map(|v| v / n).collect();
    let radial = dot(&z, d_z);
    let count = mask.real_count() as f64;
    let d_row: Vec<f64> = d_z.iter().zip(&z).map(|(g, zi)| (g - radial * zi) / (n * count)).collect();
    let mut out = Matrix::zeros(rows.rows(), rows.cols());
    for i in 0..rows.rows() {
        if mask.is_real(i) {
            out.row_mut(i).copy_from_slice(&d_row);
        }
    }
    Ok(out)
}
