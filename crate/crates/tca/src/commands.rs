//! The subcommands as library functions. Each one validates its inputs before
//! writing anything and writes every output atomically.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tca_core::encoder::{mean_attention_response, EncoderConfig, FrameMask};
use tca_core::features::{fit_whitening, frame_descriptor, l2_normalize, pooled_descriptor, PoolingMode, WhiteningModel};
use tca_core::retrieval::{rank_and_score, EvaluationReport, RetrievalCorpus, SimilarityMeasure};
use tca_core::trainer::{run_epoch, TrainerState, TrainingConfig};
use tca_core::FrameDescriptorSequence;

use crate::config::EncoderOptions;
use crate::embed::embed_corpus;
use crate::error::{TcaError, TcaResult};
use crate::format::{
    read_checkpoint, read_corpus, read_feature_maps, read_trainer_state, read_whitening, write_checkpoint,
    write_corpus, write_trainer_state, write_whitening,
};
use crate::json::{read_log, write_ground_truth, write_json, write_log, LogRecord, Manifest, ReportFile};
use crate::synth::{generate, SyntheticSpec};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CORPUS_FILE: &str = "corpus.tcad";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.tcae";
pub const STATE_FILE: &str = "trainer_state.tcas";
pub const LOG_FILE: &str = "train_log.ndjson";

pub fn epoch_checkpoint_file(epoch: usize) -> String {
    format!("checkpoint_epoch_{epoch:03}.tcae")
}

fn video_id(path: &Path) -> TcaResult<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| TcaError::Usage(format!("cannot derive a video id from {}", path.display())))
}

fn check_inputs(inputs: &[PathBuf]) -> TcaResult<Vec<String>> {
    if inputs.is_empty() {
        return Err(TcaError::Usage("no input feature-map files given".into()));
    }
    let ids = inputs.iter().map(|p| video_id(p)).collect::<TcaResult<Vec<_>>>()?;
    let mut seen = BTreeSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(TcaError::Usage(format!("two inputs map to video id {dup:?}")));
    }
    Ok(ids)
}

/// Pools every frame of every input into descriptors, in input order.
fn pooled_frames(inputs: &[PathBuf], mode: PoolingMode) -> TcaResult<Vec<Vec<Vec<f64>>>> {
    inputs
        .par_iter()
        .map(|path| {
            let maps = read_feature_maps(path)?;
            maps.iter().map(|m| Ok(pooled_descriptor(m, mode)?)).collect::<TcaResult<Vec<_>>>()
        })
        .collect()
}

/// Fits PCA whitening on the pooled descriptors of every frame of every input.
pub fn cmd_fit_whitening(inputs: &[PathBuf], mode: PoolingMode, output_dim: usize, output: &Path) -> TcaResult<WhiteningModel> {
    check_inputs(inputs)?;
    let samples: Vec<Vec<f64>> = pooled_frames(inputs, mode)?.into_iter().flatten().collect();
    let model = fit_whitening(&samples, output_dim)?;
    write_whitening(output, &model)?;
    Ok(model)
}

/// Turns feature-map files (one per video, id = file stem) into a descriptor corpus.
/// Without a whitening model the pooled descriptors are only L2-normalized.
pub fn cmd_extract(inputs: &[PathBuf], mode: PoolingMode, whitening: Option<&Path>, output: &Path) -> TcaResult<RetrievalCorpus> {
    let ids = check_inputs(inputs)?;
    let model = whitening.map(read_whitening).transpose()?;
    let videos: Vec<FrameDescriptorSequence> = inputs
        .par_iter()
        .map(|path| {
            let maps = read_feature_maps(path)?;
            let rows = maps
                .iter()
                .map(|m| match &model {
                    Some(w) => Ok(frame_descriptor(m, mode, w)?),
                    None => Ok(l2_normalize(&pooled_descriptor(m, mode)?)?),
                })
                .collect::<TcaResult<Vec<_>>>()?;
            Ok(FrameDescriptorSequence::from_rows(&rows)?)
        })
        .collect::<TcaResult<_>>()?;
    let corpus = RetrievalCorpus::from_entries(ids.into_iter().zip(videos))?;
    write_corpus(output, &corpus)?;
    Ok(corpus)
}

/// Writes `manifest.json`, `corpus.tcad` and `ground_truth.json` into `out_dir`.
pub fn cmd_synth(spec: &SyntheticSpec, out_dir: &Path) -> TcaResult<()> {
    let data = generate(spec)?;
    fs::create_dir_all(out_dir).map_err(|e| TcaError::io(out_dir, e))?;
    write_corpus(&out_dir.join(CORPUS_FILE), &data.corpus)?;
    let manifest = Manifest {
        core_pairs: data.pairs.core_pairs().iter().map(|(a, b)| [a.clone(), b.clone()]).collect(),
        distractors: data.pairs.distractors().to_vec(),
        features: data.corpus.iter().map(|(id, _)| (id.to_string(), CORPUS_FILE.to_string())).collect(),
    };
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    write_ground_truth(&out_dir.join(GROUND_TRUTH_FILE), &data.ground_truth)
}

/// Identifies the configuration a trainer-state file belongs to; resuming under a
/// different one is refused.
pub fn run_tag(encoder: &EncoderConfig, training: &TrainingConfig) -> String {
    format!("{encoder:?} {training:?}")
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainerState,
    pub epoch_losses: Vec<f64>,
    pub log: Vec<LogRecord>,
}

/// Trains on a manifest, writing into `out_dir`: the final `checkpoint.tcae`, one
/// checkpoint per epoch, the resumable trainer state and the NDJSON step log.
///
/// With `resume`, training continues from `out_dir`'s trainer state, which must come
/// from a run with the same configuration.
pub fn cmd_train(
    manifest: &Path,
    encoder: &EncoderOptions,
    seed: u64,
    training: &TrainingConfig,
    out_dir: &Path,
    resume: bool,
) -> TcaResult<TrainOutcome> {
    if !manifest.is_file() {
        return Err(TcaError::Usage(format!("manifest {} does not exist", manifest.display())));
    }
    training.validate()?;
    let loaded = Manifest::load(manifest)?;
    let data_dim = loaded.videos.dim().ok_or_else(|| TcaError::Data("manifest lists no videos".into()))?;
    let encoder = encoder.resolve(data_dim, seed)?;
    let tag = run_tag(&encoder, training);
    fs::create_dir_all(out_dir).map_err(|e| TcaError::io(out_dir, e))?;
    let state_path = out_dir.join(STATE_FILE);
    let log_path = out_dir.join(LOG_FILE);

    let (mut state, mut log) = if resume {
        let (state, found) = read_trainer_state(&state_path)?;
        if found != tag {
            return Err(TcaError::Usage(format!(
                "{} was written by a differently configured run",
                state_path.display()
            )));
        }
        let mut log = if log_path.exists() { read_log(&log_path)? } else { Vec::new() };
        log.retain(|r| r.step <= state.global_step);
        (state, log)
    } else {
        (TrainerState::new(encoder, training)?, Vec::new())
    };
    if state.epochs_done == 0 {
        write_checkpoint(&out_dir.join(CHECKPOINT_FILE), &state.params)?;
        write_trainer_state(&state_path, &state, &tag)?;
        write_log(&log_path, &log)?;
    }

    let mut epoch_losses = Vec::new();
    while state.epochs_done < training.epochs {
        let mean = run_epoch(&mut state, training, &loaded.pairs, &loaded.videos, |r| {
            log::debug!("step {} epoch {} loss {:.6} lr {:.3e} bank {}", r.step, r.epoch, r.loss, r.lr, r.bank_size);
            log.push(r.into());
        })?;
        log::info!("epoch {} mean loss {mean:.6}", state.epochs_done);
        write_checkpoint(&out_dir.join(epoch_checkpoint_file(state.epochs_done)), &state.params)?;
        write_checkpoint(&out_dir.join(CHECKPOINT_FILE), &state.params)?;
        write_log(&log_path, &log)?;
        write_trainer_state(&state_path, &state, &tag)?;
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome { state, epoch_losses, log })
}

/// Writes the refined frame-level corpus and the one-row-per-video descriptor corpus.
pub fn cmd_embed(checkpoint: &Path, corpus: &Path, frames_out: &Path, videos_out: &Path) -> TcaResult<()> {
    let params = read_checkpoint(checkpoint)?;
    let corpus = read_corpus(corpus)?;
    let embedded = embed_corpus(&params, &corpus)?;
    write_corpus(frames_out, &embedded.frames)?;
    write_corpus(videos_out, &embedded.videos)
}

pub fn cmd_evaluate(corpus: &Path, ground_truth: &Path, measure: SimilarityMeasure, output: Option<&Path>) -> TcaResult<EvaluationReport> {
    let corpus = read_corpus(corpus)?;
    let gt = crate::json::read_ground_truth(ground_truth)?;
    let report = rank_and_score(&corpus, None, &gt, measure)?;
    if let Some(path) = output {
        write_json(path, &ReportFile::from(&report))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionFile {
    pub video: String,
    pub frames: usize,
    pub response: Vec<f64>,
}

/// Mean attention each frame of `video_id` receives under the checkpoint.
pub fn cmd_attention(checkpoint: &Path, corpus: &Path, video_id: &str, output: Option<&Path>) -> TcaResult<AttentionFile> {
    let params = read_checkpoint(checkpoint)?;
    let corpus = read_corpus(corpus)?;
    let seq = corpus
        .get(video_id)
        .ok_or_else(|| TcaError::Data(format!("video {video_id:?} is not in the corpus")))?;
    if seq.dim() != params.config.dim {
        return Err(TcaError::Data(format!(
            "video has dim {} but the encoder expects {}",
            seq.dim(),
            params.config.dim
        )));
    }
    let response = mean_attention_response(&params, seq, &FrameMask::all(seq.frames())?)?;
    let out = AttentionFile { video: video_id.to_string(), frames: seq.frames(), response };
    if let Some(path) = output {
        write_json(path, &out)?;
    }
    Ok(out)
}
