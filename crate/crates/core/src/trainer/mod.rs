//! Memory-bank contrastive training.
//!
//! Each step encodes anchors, positives and `n` fresh distractors with dropout,
//! scores every anchor against its positive, the fresh negatives and the whole
//! bank, backpropagates through everything except the bank, pushes the fresh
//! negatives into the bank and takes one Adam step.

mod bank;
mod optim;
mod sampling;
mod step;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{init_encoder, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{LossKind, ScoreSet};
use crate::sequence::FrameDescriptorSequence;

pub use bank::MemoryBank;
pub use optim::{adam_update, lr_at, AdamState};
pub use sampling::{prepare_sequence, sample_epoch, sample_negatives, StepSample, TrainingPairs};
pub use step::{step_gradient, StepGradient, StepInputs};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub negatives_per_step: usize,
    pub bank_capacity: usize,
    pub pad_length: usize,
    pub base_lr: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 40,
            negatives_per_step: 1024,
            bank_capacity: 4096,
            pad_length: 64,
            base_lr: 1e-5,
            loss: LossKind::default(),
            seed: 0,
        }
    }
}

impl TrainingConfig {
    /// `epochs` may be zero (a no-op run); every other size must be positive.
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("batch_size", self.batch_size),
            ("negatives_per_step", self.negatives_per_step),
            ("bank_capacity", self.bank_capacity),
            ("pad_length", self.pad_length),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.bank_capacity < self.negatives_per_step {
            return Err(Error::InvalidConfig(format!(
                "bank_capacity {} is smaller than negatives_per_step {}",
                self.bank_capacity, self.negatives_per_step
            )));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("base_lr {} must be positive", self.base_lr)));
        }
        self.loss.validate()
    }
}

/// Frame-level descriptors by video id.
pub trait VideoSource {
    fn sequence(&self, id: &str) -> Option<&FrameDescriptorSequence>;
}

impl VideoSource for BTreeMap<String, FrameDescriptorSequence> {
    fn sequence(&self, id: &str) -> Option<&FrameDescriptorSequence> {
        self.get(id)
    }
}

impl VideoSource for crate::retrieval::RetrievalCorpus {
    fn sequence(&self, id: &str) -> Option<&FrameDescriptorSequence> {
        self.get(id)
    }
}

fn lookup<'a, S: VideoSource + ?Sized>(source: &'a S, id: &str) -> Result<&'a FrameDescriptorSequence> {
    source.sequence(id).ok_or_else(|| Error::MalformedInput(format!("no frame descriptors for video {id:?}")))
}

/// One record of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based global step.
    pub step: u64,
    /// 1-based epoch.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub bank_size: usize,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub params: EncoderParams,
    pub optimizer: AdamState,
    pub bank: MemoryBank,
    pub epochs_done: usize,
    pub global_step: u64,
}

impl TrainerState {
    pub fn new(encoder: EncoderConfig, config: &TrainingConfig) -> Result<Self> {
        config.validate()?;
        Self::from_params(init_encoder(encoder)?, config)
    }

    pub fn from_params(params: EncoderParams, config: &TrainingConfig) -> Result<Self> {
        Ok(Self {
            optimizer: AdamState::new(&params),
            params,
            bank: MemoryBank::new(config.bank_capacity)?,
            epochs_done: 0,
            global_step: 0,
        })
    }
}

/// Outcome of a single optimization step.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub loss: f64,
    pub lr: f64,
    pub bank_size: usize,
    pub scores: Vec<ScoreSet>,
}

/// Computes the loss, pushes the fresh negatives into the bank, then applies Adam.
/// Parameters are untouched if any stage fails before the update.
pub fn apply_step(
    state: &mut TrainerState,
    inputs: &StepInputs,
    loss: &LossKind,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    let dropout = (state.params.config.dropout_rate > 0.0).then_some(rng);
    let out = step_gradient(&state.params, inputs, &state.bank, loss, dropout)?;
    if !out.loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss is {}", out.loss)));
    }
    if !out.grads.is_finite() {
        return Err(Error::NonFinite(format!("gradient is not finite at loss {}", out.loss)));
    }
    state.bank.push(out.fresh_negatives)?;
    adam_update(&mut state.optimizer, &mut state.params, &out.grads, lr)?;
    state.global_step += 1;
    Ok(StepReport { loss: out.loss, lr, bank_size: state.bank.len(), scores: out.scores })
}

/// Crops or pads every sequence a sampled step needs.
pub fn gather_inputs<S: VideoSource + ?Sized>(
    sample: &StepSample,
    source: &S,
    pad_length: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepInputs> {
    let mut prep = |id: &str| prepare_sequence(lookup(source, id)?, pad_length, true, &mut *rng);
    let mut anchors = Vec::with_capacity(sample.pairs.len());
    let mut positives = Vec::with_capacity(sample.pairs.len());
    for (a, p) in &sample.pairs {
        anchors.push(prep(a)?);
        positives.push(prep(p)?);
    }
    let negatives = sample.negatives.iter().map(|id| prep(id)).collect::<Result<Vec<_>>>()?;
    Ok(StepInputs { anchors, positives, negatives })
}

/// Random stream for epoch `epoch` (0-based). Epochs draw from disjoint streams of one
/// seed, so resuming at an epoch boundary reproduces an uninterrupted run.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub fn total_steps(config: &TrainingConfig, pairs: &TrainingPairs) -> u64 {
    (config.epochs * pairs.steps_per_epoch(config.batch_size)) as u64
}

/// Runs the next epoch and returns its mean loss.
pub fn run_epoch<S: VideoSource + ?Sized>(
    state: &mut TrainerState,
    config: &TrainingConfig,
    pairs: &TrainingPairs,
    source: &S,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<f64> {
    config.validate()?;
    if state.epochs_done >= config.epochs {
        return Err(Error::OutOfRange(format!(
            "all {} epochs are already done",
            config.epochs
        )));
    }
    let total = total_steps(config, pairs);
    let mut rng = epoch_rng(config.seed, state.epochs_done);
    let plan = sample_epoch(pairs, &mut rng, config.batch_size, config.negatives_per_step)?;
    let mut sum = 0.0;
    for sample in &plan {
        let inputs = gather_inputs(sample, source, config.pad_length, &mut rng)?;
        let lr = lr_at(state.global_step, total, config.base_lr)?;
        let report = apply_step(state, &inputs, &config.loss, lr, &mut rng)?;
        sum += report.loss;
        on_step(&StepRecord {
            step: state.global_step,
            epoch: state.epochs_done + 1,
            loss: report.loss,
            lr,
            bank_size: report.bank_size,
        });
    }
    state.epochs_done += 1;
    Ok(sum / plan.len() as f64)
}

/// Trains from `state` through the last configured epoch, calling `on_epoch` with the
/// state and mean loss after each one. Returns the per-epoch mean losses.
pub fn fit<S: VideoSource + ?Sized>(
    state: &mut TrainerState,
    config: &TrainingConfig,
    pairs: &TrainingPairs,
    source: &S,
    mut on_step: impl FnMut(&StepRecord),
    mut on_epoch: impl FnMut(&TrainerState, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    config.validate()?;
    for id in pairs.video_ids() {
        lookup(source, id)?;
    }
    let mut losses = Vec::new();
    while state.epochs_done < config.epochs {
        let mean = run_epoch(state, config, pairs, source, &mut on_step)?;
        on_epoch(state, mean)?;
        losses.push(mean);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests;
