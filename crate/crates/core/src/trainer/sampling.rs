use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoder::FrameMask;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::sequence::FrameDescriptorSequence;

/// Positive pairs from the labelled core split plus the distractor pool.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPairs {
    core_pairs: Vec<(String, String)>,
    distractors: Vec<String>,
}

impl TrainingPairs {
    pub fn new(core_pairs: Vec<(String, String)>, distractors: Vec<String>) -> Result<Self> {
        let mut seen_pairs = BTreeSet::new();
        let mut core_ids = BTreeSet::new();
        for (a, b) in &core_pairs {
            if a == b {
                return Err(Error::MalformedInput(format!("pair ({a:?}, {b:?}) repeats one video")));
            }
            let key = if a < b { (a, b) } else { (b, a) };
            if !seen_pairs.insert(key) {
                return Err(Error::MalformedInput(format!("duplicate pair ({a:?}, {b:?})")));
            }
            core_ids.insert(a);
            core_ids.insert(b);
        }
        let mut seen = BTreeSet::new();
        for d in &distractors {
            if !seen.insert(d) {
                return Err(Error::MalformedInput(format!("duplicate distractor {d:?}")));
            }
            if core_ids.contains(d) {
                return Err(Error::MalformedInput(format!("{d:?} is both a core and a distractor video")));
            }
        }
        Ok(Self { core_pairs, distractors })
    }

    pub fn core_pairs(&self) -> &[(String, String)] {
        &self.core_pairs
    }

    pub fn distractors(&self) -> &[String] {
        &self.distractors
    }

    /// Every id referenced by a pair or the distractor pool.
    pub fn video_ids(&self) -> BTreeSet<&str> {
        self.core_pairs
            .iter()
            .flat_map(|(a, b)| [a.as_str(), b.as_str()])
            .chain(self.distractors.iter().map(String::as_str))
            .collect()
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.core_pairs.len().div_ceil(batch_size)
    }
}

/// Ids needed for one optimization step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSample {
    /// `(anchor, positive)`.
    pub pairs: Vec<(String, String)>,
    pub negatives: Vec<String>,
}

/// `n` distinct distractors drawn uniformly.
pub fn sample_negatives<R: Rng + ?Sized>(distractors: &[String], n: usize, rng: &mut R) -> Result<Vec<String>> {
    if distractors.is_empty() {
        return Err(Error::MalformedInput("distractor set is empty".into()));
    }
    if n > distractors.len() {
        return Err(Error::InsufficientData { needed: n, got: distractors.len() });
    }
    let mut pool: Vec<&String> = distractors.iter().collect();
    let (chosen, _) = pool.partial_shuffle(rng, n);
    Ok(chosen.iter().map(|s| (*s).clone()).collect())
}

/// Plans one epoch: every core pair appears exactly once, in shuffled order, with a
/// fair coin choosing which side is the anchor; each step draws fresh negatives.
pub fn sample_epoch<R: Rng + ?Sized>(
    pairs: &TrainingPairs,
    rng: &mut R,
    batch_size: usize,
    negatives_per_step: usize,
) -> Result<Vec<StepSample>> {
    if pairs.core_pairs.is_empty() {
        return Err(Error::MalformedInput("core pair set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..pairs.core_pairs.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let (a, b) = &pairs.core_pairs[i];
                    if rng.random::<bool>() {
                        (a.clone(), b.clone())
                    } else {
                        (b.clone(), a.clone())
                    }
                })
                .collect();
            Ok(StepSample { pairs: batch, negatives: sample_negatives(&pairs.distractors, negatives_per_step, rng)? })
        })
        .collect()
}

/// Fits a sequence to the training window.
///
/// In training mode a longer sequence is cut to a uniformly random contiguous
/// segment of `pad_length` frames and a shorter one is zero-padded (mask false on
/// the padding). In evaluation mode the full sequence is returned with an all-true mask.
pub fn prepare_sequence<R: Rng + ?Sized>(
    x: &FrameDescriptorSequence,
    pad_length: usize,
    training: bool,
    rng: &mut R,
) -> Result<(FrameDescriptorSequence, FrameMask)> {
    let f = x.frames();
    if !training {
        return Ok((x.clone(), FrameMask::all(f)?));
    }
    if pad_length == 0 {
        return Err(Error::InvalidConfig("pad length must be positive".into()));
    }
    if f > pad_length {
        let start = rng.random_range(0..=f - pad_length);
        return Ok((x.segment(start, pad_length)?, FrameMask::all(pad_length)?));
    }
    let mut padded = Matrix::zeros(pad_length, x.dim());
    for (i, row) in x.rows().enumerate() {
        padded.row_mut(i).copy_from_slice(row);
    }
    Ok((FrameDescriptorSequence::new(padded)?, FrameMask::prefix(f, pad_length)?))
}
