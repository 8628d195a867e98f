use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::{aggregate_video, encode_frames, FrameMask, VideoDescriptor};
use crate::gradcheck::{central_difference, relative_error};
use crate::losses::{similarity_scores, CircleParams};
use crate::matrix::Matrix;

fn encoder_config(dropout_rate: f64) -> EncoderConfig {
    EncoderConfig { dim: 8, heads: 2, ffn_dim: 8, dropout_rate, seed: 3 }
}

fn sequence(rng: &mut ChaCha8Rng, frames: usize, dim: usize) -> FrameDescriptorSequence {
    let data = (0..frames * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    FrameDescriptorSequence::new(Matrix::from_vec(frames, dim, data).unwrap()).unwrap()
}

fn padded(rng: &mut ChaCha8Rng, frames: usize, pad: usize, dim: usize) -> (FrameDescriptorSequence, FrameMask) {
    prepare_sequence(&sequence(rng, frames, dim), pad, true, rng).unwrap()
}

fn inputs(rng: &mut ChaCha8Rng, batch: usize, negatives: usize) -> StepInputs {
    let mut group = |n: usize| (0..n).map(|i| padded(rng, 2 + i % 4, 5, 8)).collect::<Vec<_>>();
    StepInputs { anchors: group(batch), positives: group(batch), negatives: group(negatives) }
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> VideoDescriptor {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    VideoDescriptor::from_raw(&v).unwrap()
}

fn training_config(n: usize, bank: usize) -> TrainingConfig {
    TrainingConfig {
        batch_size: 3,
        epochs: 2,
        negatives_per_step: n,
        bank_capacity: bank,
        pad_length: 6,
        base_lr: 1e-3,
        loss: LossKind::InfoNce { tau: 0.1 },
        seed: 11,
    }
}

/// Five events of three videos each plus a distractor pool.
fn toy_dataset(distractors: usize) -> (TrainingPairs, BTreeMap<String, FrameDescriptorSequence>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut source = BTreeMap::new();
    let mut core = Vec::new();
    for e in 0..5 {
        let base = sequence(&mut rng, 8, 8);
        for v in 0..3 {
            let rows: Vec<Vec<f64>> = base
                .rows()
                .map(|r| r.iter().map(|x| x + 0.1 * rng.random_range(-1.0..1.0)).collect())
                .collect();
            source.insert(format!("e{e}v{v}"), FrameDescriptorSequence::from_rows(&rows).unwrap());
        }
        core.push((format!("e{e}v0"), format!("e{e}v1")));
        core.push((format!("e{e}v0"), format!("e{e}v2")));
    }
    let ids: Vec<String> = (0..distractors).map(|i| format!("d{i}")).collect();
    for id in &ids {
        let f = rng.random_range(3..10);
        source.insert(id.clone(), sequence(&mut rng, f, 8));
    }
    (TrainingPairs::new(core, ids).unwrap(), source)
}

fn no_rng() -> Option<&'static mut ChaCha8Rng> {
    None
}

#[test]
fn config_invariants() {
    assert!(TrainingConfig::default().validate().is_ok());
    let base = training_config(4, 8);
    assert!(TrainingConfig { bank_capacity: 3, ..base }.validate().is_err());
    assert!(TrainingConfig { batch_size: 0, ..base }.validate().is_err());
    assert!(TrainingConfig { pad_length: 0, ..base }.validate().is_err());
    assert!(TrainingConfig { base_lr: 0.0, ..base }.validate().is_err());
    assert!(TrainingConfig { loss: LossKind::InfoNce { tau: 0.0 }, ..base }.validate().is_err());
    assert!(TrainingConfig { epochs: 0, ..base }.validate().is_ok());
}

#[test]
fn loss_matches_recomputed_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = init_encoder(encoder_config(0.0)).unwrap();
    let inputs = inputs(&mut rng, 3, 4);
    let mut bank = MemoryBank::new(6).unwrap();
    bank.push((0..5).map(|_| unit(&mut rng, 8))).unwrap();
    let loss = LossKind::Circle(CircleParams { gamma: 32.0, margin: 0.25 });
    let out = step_gradient(&params, &inputs, &bank, &loss, no_rng()).unwrap();

    let embed = |(x, m): &(FrameDescriptorSequence, FrameMask)| {
        let y = encode_frames(&params, x, m, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        aggregate_video(&y, m).unwrap().into_vec()
    };
    let mut negatives: Vec<Vec<f64>> = inputs.negatives.iter().map(embed).collect();
    negatives.extend(bank.to_vecs());
    let mut expected = 0.0;
    for (a, p) in inputs.anchors.iter().zip(&inputs.positives) {
        let set = similarity_scores(&embed(a), &embed(p), &negatives).unwrap();
        expected += loss.evaluate(&set).unwrap().value;
    }
    expected /= 3.0;
    assert!((out.loss - expected).abs() < 1e-12, "{} vs {expected}", out.loss);
    assert_eq!(out.scores.len(), 3);
    assert!(out.scores.iter().all(|s| s.negatives().len() == 9));
}

fn check_step_gradient(loss: LossKind) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = init_encoder(encoder_config(0.0)).unwrap();
    let inputs = inputs(&mut rng, 2, 3);
    let mut bank = MemoryBank::new(4).unwrap();
    bank.push((0..4).map(|_| unit(&mut rng, 8))).unwrap();
    let analytic = step_gradient(&params, &inputs, &bank, &loss, no_rng()).unwrap().grads;
    let flat: Vec<f64> = params.tensors().iter().flat_map(|t| t.iter().copied()).collect();
    let objective = |point: &[f64]| {
        let mut p = params.clone();
        let mut offset = 0;
        for t in p.tensors_mut() {
            t.copy_from_slice(&point[offset..offset + t.len()]);
            offset += t.len();
        }
        step_gradient(&p, &inputs, &bank, &loss, no_rng()).unwrap().loss
    };
    let numeric = central_difference(objective, &flat, 1e-5);
    let mut offset = 0;
    for (name, g) in crate::encoder::TENSOR_NAMES.iter().zip(analytic.tensors()) {
        let fd = &numeric[offset..offset + g.len()];
        let err = relative_error(g, fd);
        assert!(err < 1e-5, "{name}: relative error {err}");
        offset += g.len();
    }
}

#[test]
fn step_gradient_matches_finite_differences_softmax() {
    check_step_gradient(LossKind::Softmax);
}

#[test]
fn step_gradient_matches_finite_differences_infonce() {
    check_step_gradient(LossKind::InfoNce { tau: 0.2 });
}

#[test]
fn step_gradient_matches_finite_differences_circle() {
    check_step_gradient(LossKind::Circle(CircleParams { gamma: 16.0, margin: 0.25 }));
}

#[test]
fn first_step_with_empty_bank_equals_bankless_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let config = training_config(4, 4);
    let inputs = inputs(&mut rng, 3, 4);
    let mut state = TrainerState::new(encoder_config(0.0), &config).unwrap();
    let direct = step_gradient(&state.params, &inputs, &MemoryBank::new(1).unwrap(), &config.loss, no_rng())
        .unwrap()
        .loss;
    let report = apply_step(&mut state, &inputs, &config.loss, 1e-3, &mut rng).unwrap();
    assert!((report.loss - direct).abs() < 1e-12);
    assert_eq!(report.bank_size, 4);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = training_config(4, 8);
    let mut state = TrainerState::new(encoder_config(0.2), &config).unwrap();
    let before = state.params.clone();
    let report = apply_step(&mut state, &inputs(&mut rng, 2, 4), &config.loss, 0.0, &mut rng).unwrap();
    assert_eq!(state.params, before);
    assert!(report.loss.is_finite() && report.loss > 0.0);
    assert_eq!(state.bank.len(), 4);
    assert_eq!(state.global_step, 1);
}

#[test]
fn bank_fills_then_evicts_oldest() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let config = training_config(3, 7);
    let mut state = TrainerState::new(encoder_config(0.0), &config).unwrap();
    let mut pushed: Vec<Vec<f64>> = Vec::new();
    for expected in [3, 6, 7, 7] {
        let inputs = inputs(&mut rng, 2, 3);
        let fresh = step_gradient(&state.params, &inputs, &state.bank, &config.loss, no_rng())
            .unwrap()
            .fresh_negatives;
        pushed.extend(fresh.into_iter().map(VideoDescriptor::into_vec));
        let report = apply_step(&mut state, &inputs, &config.loss, 1e-3, &mut rng).unwrap();
        assert_eq!(report.bank_size, expected);
    }
    assert_eq!(state.bank.to_vecs(), pushed[pushed.len() - 7..].to_vec());
}

#[test]
fn fit_logs_every_step_with_schedule() {
    let (pairs, source) = toy_dataset(12);
    let config = training_config(4, 8);
    let mut state = TrainerState::new(encoder_config(0.1), &config).unwrap();
    let mut log = Vec::new();
    let losses = fit(&mut state, &config, &pairs, &source, |r| log.push(*r), |_, _| Ok(())).unwrap();
    let per_epoch = 10usize.div_ceil(3);
    assert_eq!(losses.len(), 2);
    assert_eq!(log.len(), 2 * per_epoch);
    assert_eq!(state.global_step, log.len() as u64);
    assert_eq!(log[0].lr, config.base_lr);
    for (i, r) in log.iter().enumerate() {
        assert_eq!(r.step, i as u64 + 1);
        assert_eq!(r.epoch, i / per_epoch + 1);
        assert_eq!(r.bank_size, (4 * (i + 1)).min(8));
        let lr = lr_at(i as u64, log.len() as u64, config.base_lr).unwrap();
        assert_eq!(r.lr, lr);
    }
}

#[test]
fn zero_epochs_leave_initialization() {
    let (pairs, source) = toy_dataset(6);
    let config = TrainingConfig { epochs: 0, ..training_config(4, 8) };
    let mut state = TrainerState::new(encoder_config(0.1), &config).unwrap();
    let losses = fit(&mut state, &config, &pairs, &source, |_| {}, |_, _| Ok(())).unwrap();
    assert!(losses.is_empty());
    assert_eq!(state.params, init_encoder(encoder_config(0.1)).unwrap());
}

#[test]
fn training_is_deterministic_and_resumable() {
    let (pairs, source) = toy_dataset(12);
    let config = TrainingConfig { epochs: 3, ..training_config(4, 8) };
    let run = || {
        let mut state = TrainerState::new(encoder_config(0.2), &config).unwrap();
        fit(&mut state, &config, &pairs, &source, |_| {}, |_, _| Ok(())).unwrap();
        state
    };
    let full = run();
    assert_eq!(full, run());

    let mut partial = TrainerState::new(encoder_config(0.2), &config).unwrap();
    run_epoch(&mut partial, &config, &pairs, &source, |_| {}).unwrap();
    let mut resumed = partial.clone();
    fit(&mut resumed, &config, &pairs, &source, |_| {}, |_, _| Ok(())).unwrap();
    assert_eq!(resumed, full);
    assert!(run_epoch(&mut resumed, &config, &pairs, &source, |_| {}).is_err());
}

#[test]
fn missing_features_are_reported() {
    let (pairs, mut source) = toy_dataset(6);
    source.remove("d3");
    let config = training_config(4, 8);
    let mut state = TrainerState::new(encoder_config(0.0), &config).unwrap();
    assert!(matches!(
        fit(&mut state, &config, &pairs, &source, |_| {}, |_, _| Ok(())),
        Err(Error::MalformedInput(_))
    ));
}

/// Mean loss over every core pair against every distractor, full sequences, no dropout.
fn held_loss(params: &EncoderParams, pairs: &TrainingPairs, source: &BTreeMap<String, FrameDescriptorSequence>, loss: &LossKind) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut full = |id: &String| prepare_sequence(&source[id], 1, false, &mut rng).unwrap();
    let inputs = StepInputs {
        anchors: pairs.core_pairs().iter().map(|(a, _)| full(a)).collect(),
        positives: pairs.core_pairs().iter().map(|(_, p)| full(p)).collect(),
        negatives: pairs.distractors().iter().map(&mut full).collect(),
    };
    step_gradient(params, &inputs, &MemoryBank::new(1).unwrap(), loss, no_rng()).unwrap().loss
}

#[test]
fn training_lowers_the_loss() {
    let (pairs, source) = toy_dataset(20);
    let config = TrainingConfig { epochs: 12, base_lr: 3e-3, ..training_config(6, 12) };
    let mut state = TrainerState::new(encoder_config(0.0), &config).unwrap();
    let before = held_loss(&state.params, &pairs, &source, &config.loss);
    fit(&mut state, &config, &pairs, &source, |_| {}, |_, _| Ok(())).unwrap();
    let after = held_loss(&state.params, &pairs, &source, &config.loss);
    assert!(after < before, "{before} -> {after}");
}
