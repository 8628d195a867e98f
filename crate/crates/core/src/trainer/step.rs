use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::bank::MemoryBank;
use crate::encoder::{
    backward_from_cache, forward, mean_pool, video_backward, EncoderParams, ForwardCache, FrameMask,
    VideoDescriptor,
};
use crate::error::{Error, Result};
use crate::losses::{LossKind, ScoreSet};
use crate::matrix::dot;
use crate::sequence::FrameDescriptorSequence;

/// Encoder-ready sequences for one step, already cropped or padded.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub anchors: Vec<(FrameDescriptorSequence, FrameMask)>,
    pub positives: Vec<(FrameDescriptorSequence, FrameMask)>,
    pub negatives: Vec<(FrameDescriptorSequence, FrameMask)>,
}

/// Batch loss and its exact parameter gradient.
#[derive(Debug, Clone)]
pub struct StepGradient {
    /// Mean loss over anchors.
    pub loss: f64,
    pub grads: EncoderParams,
    /// One per anchor: fresh negatives first, then bank entries oldest first.
    pub scores: Vec<ScoreSet>,
    pub fresh_negatives: Vec<VideoDescriptor>,
}

struct Encoded {
    cache: ForwardCache,
    z: VideoDescriptor,
}

fn encode<R: Rng + ?Sized>(
    params: &EncoderParams,
    (x, mask): &(FrameDescriptorSequence, FrameMask),
    rng: Option<&mut R>,
) -> Result<Encoded> {
    let cache = forward(params, x.matrix(), mask, rng)?;
    let w = mean_pool(cache.output(), mask)?;
    let z = VideoDescriptor::from_raw(&w)
        .map_err(|_| Error::Degenerate("encoded video has a zero mean descriptor".into()))?;
    Ok(Encoded { cache, z })
}

fn similarity(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0)
}

fn axpy(acc: &mut [f64], s: f64, v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, x)| *a += s * x);
}

/// Forward and backward pass of the contrastive objective.
///
/// Every anchor is scored against its own positive, all fresh negatives and every
/// bank entry. Bank entries are constants. Sequences are encoded in the order
/// anchors, positives, negatives, each drawing dropout masks from `rng` if given.
pub fn step_gradient<R: Rng + ?Sized>(
    params: &EncoderParams,
    inputs: &StepInputs,
    bank: &MemoryBank,
    loss: &LossKind,
    mut rng: Option<&mut R>,
) -> Result<StepGradient> {
    let b = inputs.anchors.len();
    if b == 0 || inputs.positives.len() != b {
        return Err(Error::MalformedInput(format!(
            "step needs matching non-empty anchors and positives, got {b} and {}",
            inputs.positives.len()
        )));
    }
    if inputs.negatives.is_empty() && bank.is_empty() {
        return Err(Error::MalformedInput("step has no negatives".into()));
    }
    let mut encode_all = |seqs: &[(FrameDescriptorSequence, FrameMask)]| {
        seqs.iter().map(|s| encode(params, s, rng.as_deref_mut())).collect::<Result<Vec<_>>>()
    };
    let anchors = encode_all(&inputs.anchors)?;
    let positives = encode_all(&inputs.positives)?;
    let negatives = encode_all(&inputs.negatives)?;
    let banked: Vec<&[f64]> = bank.iter().map(VideoDescriptor::as_slice).collect();

    let d = params.config.dim;
    let zero = || alloc::vec![0.0; d];
    let mut d_anchor: Vec<Vec<f64>> = (0..b).map(|_| zero()).collect();
    let mut d_positive: Vec<Vec<f64>> = (0..b).map(|_| zero()).collect();
    let mut d_negative: Vec<Vec<f64>> = negatives.iter().map(|_| zero()).collect();
    let mut total = 0.0;
    let mut scores = Vec::with_capacity(b);
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let za = anchors[i].z.as_slice();
        let zp = positives[i].z.as_slice();
        let sn: Vec<f64> = negatives
            .iter()
            .map(|n| similarity(za, n.z.as_slice()))
            .chain(banked.iter().map(|e| similarity(za, e)))
            .collect();
        let set = ScoreSet::new(similarity(za, zp), sn)?;
        let out = loss.evaluate(&set)?;
        if !out.value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {} for anchor {i} (s_p = {}, max s_n = {})",
                out.value,
                set.positive(),
                set.negatives().iter().copied().fold(f64::NEG_INFINITY, f64::max)
            )));
        }
        total += out.value;
        axpy(&mut d_anchor[i], out.d_sp * inv_b, zp);
        axpy(&mut d_positive[i], out.d_sp * inv_b, za);
        let fresh = negatives.len();
        for (j, &g) in out.d_sn.iter().enumerate() {
            let g = g * inv_b;
            if j < fresh {
                axpy(&mut d_anchor[i], g, negatives[j].z.as_slice());
                axpy(&mut d_negative[j], g, za);
            } else {
                axpy(&mut d_anchor[i], g, banked[j - fresh]);
            }
        }
        scores.push(set);
    }

    let mut grads = params.zeros_like();
    let groups = [(&anchors, &d_anchor), (&positives, &d_positive), (&negatives, &d_negative)];
    for (encoded, dz) in groups {
        for (e, g) in encoded.iter().zip(dz) {
            let upstream = video_backward(e.cache.output(), e.cache.mask(), g)?;
            let (pg, _) = backward_from_cache(params, &e.cache, &upstream)?;
            grads.add_scaled(&pg, 1.0);
        }
    }
    let fresh_negatives = negatives.into_iter().map(|n| n.z).collect();
    Ok(StepGradient { loss: total * inv_b, grads, scores, fresh_negatives })
}
