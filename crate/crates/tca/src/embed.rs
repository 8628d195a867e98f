use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use tca_core::encoder::{aggregate_video, encode_frames, EncoderParams, FrameMask};
use tca_core::features::l2_normalize;
use tca_core::retrieval::RetrievalCorpus;
use tca_core::{FrameDescriptorSequence, Matrix};

use crate::error::{TcaError, TcaResult};

/// Refined frame-level corpus and the matching one-row video-level corpus.
pub struct Embedded {
    pub frames: RetrievalCorpus,
    pub videos: RetrievalCorpus,
}

/// Encodes every video in evaluation mode (full length, no dropout). Refined frames are
/// L2-normalized for frame-level retrieval; the video descriptor is the normalized mean
/// of the unnormalized rows, as in training. Videos are encoded in parallel; the output
/// does not depend on the thread count.
pub fn embed_corpus(params: &EncoderParams, corpus: &RetrievalCorpus) -> TcaResult<Embedded> {
    if let Some(d) = corpus.dim() {
        if d != params.config.dim {
            return Err(TcaError::Data(format!(
                "corpus descriptors have dim {d} but the encoder expects {}",
                params.config.dim
            )));
        }
    }
    let entries: Vec<(&str, &FrameDescriptorSequence)> = corpus.iter().collect();
    let encoded = entries
        .par_iter()
        .map(|(id, seq)| {
            let mask = FrameMask::all(seq.frames())?;
            let refined = encode_frames::<ChaCha8Rng>(params, seq, &mask, false, &mut rand::SeedableRng::seed_from_u64(0))?;
            let video = aggregate_video(&refined, &mask)?;
            let rows = refined.rows().map(l2_normalize).collect::<Result<Vec<_>, _>>()?;
            let refined = FrameDescriptorSequence::from_rows(&rows)?;
            let row = FrameDescriptorSequence::new(Matrix::from_vec(1, video.as_slice().len(), video.into_vec())?)?;
            Ok(((*id).to_string(), refined, row))
        })
        .collect::<Result<Vec<_>, tca_core::Error>>()?;
    let mut frames = RetrievalCorpus::new();
    let mut videos = RetrievalCorpus::new();
    for (id, refined, row) in encoded {
        frames.insert(id.clone(), refined)?;
        videos.insert(id, row)?;
    }
    Ok(Embedded { frames, videos })
}
