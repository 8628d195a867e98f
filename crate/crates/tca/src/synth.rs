//! Synthetic event-retrieval datasets.
//!
//! Every event has a base sequence of random unit frames. Its positives are noisy
//! temporal crops of the base. Distractors are independent random sequences. Each
//! video, base included, also receives a constant "style" offset drawn from a fixed
//! low-rank subspace shared by the whole dataset. The offset survives averaging over
//! frames while the frame content mostly cancels, so plain mean pooling is dominated
//! by the nuisance and a learned encoder has something to remove.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tca_core::features::l2_normalize;
use tca_core::retrieval::{GroundTruth, RetrievalCorpus, DEFAULT_TIER};
use tca_core::trainer::TrainingPairs;
use tca_core::FrameDescriptorSequence;

use crate::error::{TcaError, TcaResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_events: usize,
    pub positives_per_event: usize,
    pub num_distractors: usize,
    /// Inclusive frame-count range of base and distractor videos.
    pub frames_range: (usize, usize),
    pub dim: usize,
    /// Standard deviation of the per-frame noise vector's norm.
    pub noise_sigma: f64,
    /// Fraction of the base kept by each positive crop.
    pub crop_fraction: f64,
    /// Norm of the per-video style offset.
    pub style_strength: f64,
    /// Dimension of the shared style subspace.
    pub style_rank: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_events: 20,
            positives_per_event: 3,
            num_distractors: 500,
            frames_range: (10, 30),
            dim: 64,
            noise_sigma: 0.2,
            crop_fraction: 0.5,
            style_strength: 0.5,
            style_rank: 4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> TcaResult<()> {
        let counts = [
            ("num_events", self.num_events),
            ("positives_per_event", self.positives_per_event),
            ("num_distractors", self.num_distractors),
            ("dim", self.dim),
            ("frames_range.0", self.frames_range.0),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(TcaError::Usage(format!("{name} must be at least 1")));
        }
        if self.frames_range.0 > self.frames_range.1 {
            return Err(TcaError::Usage(format!(
                "frames_range {:?} is empty",
                self.frames_range
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(TcaError::Usage(format!("noise_sigma {} must be non-negative", self.noise_sigma)));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(TcaError::Usage(format!("crop_fraction {} must lie in (0, 1]", self.crop_fraction)));
        }
        if !(self.style_strength >= 0.0 && self.style_strength.is_finite()) {
            return Err(TcaError::Usage(format!(
                "style_strength {} must be non-negative",
                self.style_strength
            )));
        }
        if self.style_rank > self.dim {
            return Err(TcaError::Usage(format!(
                "style_rank {} exceeds dim {}",
                self.style_rank, self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub corpus: RetrievalCorpus,
    pub pairs: TrainingPairs,
    pub ground_truth: GroundTruth,
}

pub fn query_id(event: usize) -> String {
    format!("e{event:03}q")
}

pub fn positive_id(event: usize, k: usize) -> String {
    format!("e{event:03}p{k}")
}

pub fn distractor_id(i: usize) -> String {
    format!("d{i:05}")
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Orthonormal basis of a random `rank`-dimensional subspace.
fn style_basis(rng: &mut ChaCha8Rng, dim: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if let Ok(u) = l2_normalize(&v) {
            basis.push(u);
        }
    }
    basis
}

struct Generator {
    rng: ChaCha8Rng,
    spec: SyntheticSpec,
    basis: Vec<Vec<f64>>,
}

impl Generator {
    fn unit_row(&mut self) -> Vec<f64> {
        loop {
            if let Ok(u) = l2_normalize(&gaussian(&mut self.rng, self.spec.dim)) {
                return u;
            }
        }
    }

    fn frame_count(&mut self) -> usize {
        let (lo, hi) = self.spec.frames_range;
        self.rng.random_range(lo..=hi)
    }

    fn style_offset(&mut self) -> Vec<f64> {
        let mut offset = vec![0.0; self.spec.dim];
        if self.basis.is_empty() || self.spec.style_strength == 0.0 {
            return offset;
        }
        let scale = self.spec.style_strength / (self.basis.len() as f64).sqrt();
        for b in &self.basis {
            let g: f64 = StandardNormal.sample(&mut self.rng);
            offset.iter_mut().zip(b).for_each(|(o, x)| *o += scale * g * x);
        }
        offset
    }

    /// Adds noise and the video's style to each row, then renormalizes.
    fn finish(&mut self, rows: &[Vec<f64>], sigma: f64) -> TcaResult<FrameDescriptorSequence> {
        let style = self.style_offset();
        let per_coord = sigma / (self.spec.dim as f64).sqrt();
        let mut out = Vec::with_capacity(rows.len());
        for row in rows {
            let mut v: Vec<f64> = row.iter().zip(&style).map(|(x, s)| x + s).collect();
            if sigma > 0.0 {
                for x in v.iter_mut() {
                    let g: f64 = StandardNormal.sample(&mut self.rng);
                    *x += per_coord * g;
                }
            }
            out.push(l2_normalize(&v)?);
        }
        Ok(FrameDescriptorSequence::from_rows(&out)?)
    }
}

/// Generates the dataset; identical specs give identical datasets.
///
/// Core pairs are all pairs among an event's base and positives. Ground truth maps each
/// event's base to its positives under the single tier [`DEFAULT_TIER`].
pub fn generate(spec: &SyntheticSpec) -> TcaResult<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let basis = style_basis(&mut rng, spec.dim, spec.style_rank);
    let mut g = Generator { rng, spec: *spec, basis };
    let mut videos: BTreeMap<String, FrameDescriptorSequence> = BTreeMap::new();
    let mut core_pairs = Vec::new();
    let mut ground_truth = GroundTruth::new();
    for e in 0..spec.num_events {
        let f = g.frame_count();
        let base: Vec<Vec<f64>> = (0..f).map(|_| g.unit_row()).collect();
        let mut members = vec![query_id(e)];
        videos.insert(query_id(e), g.finish(&base, 0.0)?);
        let len = ((spec.crop_fraction * f as f64).round() as usize).clamp(1, f);
        for k in 0..spec.positives_per_event {
            let start = g.rng.random_range(0..=f - len);
            let crop = &base[start..start + len];
            videos.insert(positive_id(e, k), g.finish(crop, spec.noise_sigma)?);
            members.push(positive_id(e, k));
        }
        for i in 0..members.len() {
            for j in i + 1..members.len() {
                core_pairs.push((members[i].clone(), members[j].clone()));
            }
        }
        ground_truth.add(query_id(e), DEFAULT_TIER, members[1..].iter().cloned());
    }
    let mut distractors = Vec::with_capacity(spec.num_distractors);
    for i in 0..spec.num_distractors {
        let f = g.frame_count();
        let rows: Vec<Vec<f64>> = (0..f).map(|_| g.unit_row()).collect();
        videos.insert(distractor_id(i), g.finish(&rows, 0.0)?);
        distractors.push(distractor_id(i));
    }
    Ok(SyntheticDataset {
        corpus: RetrievalCorpus::from_entries(videos)?,
        pairs: TrainingPairs::new(core_pairs, distractors)?,
        ground_truth,
    })
}
