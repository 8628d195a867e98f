//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tca::commands::{cmd_embed, cmd_evaluate, cmd_synth, cmd_train, CHECKPOINT_FILE, CORPUS_FILE, GROUND_TRUTH_FILE, MANIFEST_FILE};
use tca::config::EncoderOptions;
use tca::synth::SyntheticSpec;
use tca_core::encoder::{aggregate_video, encode_frames, encoder_backward, init_encoder, EncoderConfig, FrameMask};
use tca_core::gradcheck::{central_difference, relative_error};
use tca_core::losses::{
    anchor_gradient_analytic, infonce_loss, negative_contribution, similarity_scores, softmax_loss, CircleParams,
    LossKind, ScoreSet,
};
use tca_core::retrieval::{
    chamfer_similarity, mean_pairwise_similarity, rank_and_score, symmetric_chamfer, GroundTruth, RetrievalCorpus,
    SimilarityMeasure,
};
use tca_core::trainer::{apply_step, prepare_sequence, StepInputs, TrainerState, TrainingConfig};
use tca_core::{FrameDescriptorSequence, Matrix};

type Outcome = Result<String, String>;

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Unit-norm rows; the frame count is drawn from `frames`.
fn unit_sequence(rng: &mut ChaCha8Rng, frames: std::ops::RangeInclusive<usize>, dim: usize) -> FrameDescriptorSequence {
    let frames = rng.random_range(frames);
    let rows: Vec<Vec<f64>> = (0..frames).map(|_| unit(gaussian(rng, dim))).collect();
    FrameDescriptorSequence::from_rows(&rows).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn anchor_gradient() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let anchor = gaussian(&mut rng, 16);
        let positive = gaussian(&mut rng, 16);
        let negatives: Vec<Vec<f64>> = (0..8).map(|_| gaussian(&mut rng, 16)).collect();
        let analytic = anchor_gradient_analytic(&anchor, &positive, &negatives).map_err(|e| e.to_string())?;
        let numeric = central_difference(
            |w| softmax_loss(&similarity_scores(w, &positive, &negatives).unwrap()).value,
            &anchor,
            1e-6,
        );
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-5 && secs < 5.0, format!("max rel err {worst:.2e} (tol 1e-5), {secs:.2}s (limit 5s)"))
}

fn encoder_gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = EncoderConfig { dim: 8, heads: 2, ffn_dim: 16, dropout_rate: 0.1, seed: 3 };
    let params = init_encoder(config).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut worst_tensor = "";
    for mask in [FrameMask::all(5).unwrap(), FrameMask::prefix(3, 5).unwrap()] {
        let x = Matrix::from_vec(5, 8, gaussian(&mut rng, 40)).unwrap();
        let upstream = Matrix::from_vec(5, 8, gaussian(&mut rng, 40)).unwrap();
        let (grads, _) = encoder_backward(&params, &x, &mask, &upstream).map_err(|e| e.to_string())?;
        let objective = |p: &tca_core::encoder::EncoderParams| {
            let out = tca_core::encoder::forward::<ChaCha8Rng>(p, &x, &mask, None).unwrap();
            out.output().as_slice().iter().zip(upstream.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        for t in 0..12 {
            let point = params.tensors()[t].to_vec();
            let numeric = central_difference(
                |v| {
                    let mut p = params.clone();
                    p.tensors_mut()[t].copy_from_slice(v);
                    objective(&p)
                },
                &point,
                1e-6,
            );
            let err = relative_error(grads.tensors()[t], &numeric);
            if err > worst {
                worst = err;
                worst_tensor = tca_core::encoder::TENSOR_NAMES[t];
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-4 && secs < 30.0,
        format!("12 tensors, max rel err {worst:.2e} at {worst_tensor} (tol 1e-4), {secs:.2}s (limit 30s)"),
    )
}

fn hard_negatives() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut exact_zero = true;
    let mut wins = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=16);
        let positive = rng.random_range(-1.0..=1.0);
        let mut negatives: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let j = rng.random_range(0..n);
        let mut at = |s: f64| {
            negatives[j] = s;
            negative_contribution(&ScoreSet::new(positive, negatives.clone()).unwrap(), j).unwrap()
        };
        exact_zero &= at(-1.0) == 0.0;
        if at(0.0) > at(-0.99) {
            wins += 1;
        }
    }
    check(
        exact_zero && wins >= 990,
        format!("zero at s_n = -1: {exact_zero}; hard beats easy in {wins}/1000 (need >= 990)"),
    )
}

fn lower_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for i in 0..1000 {
        let dim = 16;
        let x = unit_sequence(&mut rng, 1..=20, dim);
        let y = if i % 2 == 0 {
            unit_sequence(&mut rng, 1..=20, dim)
        } else {
            // Correlated pair: noisy copy of x.
            let rows: Vec<Vec<f64>> = x
                .rows()
                .map(|r| unit(r.iter().map(|v| v + 0.1 * gaussian(&mut rng, 1)[0]).collect()))
                .collect();
            FrameDescriptorSequence::from_rows(&rows).unwrap()
        };
        let gap = mean_pairwise_similarity(&x, &y).unwrap() - chamfer_similarity(&x, &y).unwrap();
        worst = worst.max(gap);
        if gap > 1e-9 {
            violations += 1;
        }
    }
    check(violations == 0, format!("{violations} violations, max(cos - chamfer) {worst:.3e} (slack 1e-9)"))
}

fn brute_chamfer(x: &FrameDescriptorSequence, y: &FrameDescriptorSequence) -> f64 {
    let mut total = 0.0;
    for a in x.rows() {
        let mut best = f64::NEG_INFINITY;
        for b in y.rows() {
            best = best.max(a.iter().zip(b).map(|(p, q)| p * q).sum());
        }
        total += best;
    }
    total / x.frames() as f64
}

fn brute_map(
    corpus: &BTreeMap<String, FrameDescriptorSequence>,
    gt: &BTreeMap<String, BTreeMap<String, BTreeSet<String>>>,
    score: fn(&FrameDescriptorSequence, &FrameDescriptorSequence) -> f64,
) -> f64 {
    let mut per_tier: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (q, tiers) in gt {
        let mut ranked: Vec<(&String, f64)> =
            corpus.iter().filter(|(id, _)| *id != q).map(|(id, s)| (id, score(&corpus[q], s))).collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(b.0)));
        for (tier, rel) in tiers {
            let rel: BTreeSet<&String> = rel.iter().filter(|r| *r != q).collect();
            if rel.is_empty() {
                continue;
            }
            let (mut hits, mut sum) = (0.0, 0.0);
            for (k, (id, _)) in ranked.iter().enumerate() {
                if rel.contains(id) {
                    hits += 1.0;
                    sum += hits / (k + 1) as f64;
                }
            }
            per_tier.entry(tier).or_default().push(sum / rel.len() as f64);
        }
    }
    let means: Vec<f64> = per_tier.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    means.iter().sum::<f64>() / means.len() as f64
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut d_cham, mut d_sym, mut d_map) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(2..=20);
        let dim = rng.random_range(2..=8);
        let corpus: BTreeMap<String, FrameDescriptorSequence> = (0..n)
            .map(|i| (format!("v{i:02}"), unit_sequence(&mut rng, 1..=10, dim)))
            .collect();
        let ids: Vec<String> = corpus.keys().cloned().collect();
        for x in corpus.values() {
            for y in corpus.values() {
                d_cham = d_cham.max((chamfer_similarity(x, y).unwrap() - brute_chamfer(x, y)).abs());
                let sym = (brute_chamfer(x, y) + brute_chamfer(y, x)) / 2.0;
                d_sym = d_sym.max((symmetric_chamfer(x, y).unwrap() - sym).abs());
            }
        }
        let mut gt_map: BTreeMap<String, BTreeMap<String, BTreeSet<String>>> = BTreeMap::new();
        let mut gt = GroundTruth::new();
        let queries: Vec<&String> =
            ids.iter().filter(|_| rng.random_bool(0.5)).chain(std::iter::once(&ids[0])).collect();
        for q in queries {
            for tier in ["all", "strict"] {
                let rel: BTreeSet<String> = ids.iter().filter(|_| rng.random_bool(0.3)).cloned().collect();
                gt.add(q.clone(), tier, rel.clone());
                gt_map.entry(q.clone()).or_default().entry(tier.into()).or_default().extend(rel);
            }
        }
        let rc = RetrievalCorpus::from_entries(corpus.clone()).unwrap();
        let has_relevant = gt_map.iter().any(|(q, t)| t.values().any(|r| r.iter().any(|id| id != q)));
        if !has_relevant {
            continue;
        }
        for (measure, f) in [
            (SimilarityMeasure::Chamfer, brute_chamfer as fn(&_, &_) -> f64),
            (SimilarityMeasure::SymmetricChamfer, |x: &FrameDescriptorSequence, y: &FrameDescriptorSequence| {
                (brute_chamfer(x, y) + brute_chamfer(y, x)) / 2.0
            }),
        ] {
            let report = rank_and_score(&rc, None, &gt, measure).map_err(|e| e.to_string())?;
            d_map = d_map.max((report.map - brute_map(&corpus, &gt_map, f)).abs());
        }
    }
    check(
        d_cham <= 1e-6 && d_sym <= 1e-6 && d_map <= 1e-6,
        format!("max |diff| chamfer {d_cham:.1e}, symmetric {d_sym:.1e}, mAP {d_map:.1e} (tol 1e-6)"),
    )
}

fn reduction_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=64);
        let set = ScoreSet::new(rng.random_range(-1.0..=1.0), (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .unwrap();
        if infonce_loss(&set, 1.0).unwrap() != softmax_loss(&set) {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{mismatches}/1000 sets differ (exact equality)"))
}

fn bank_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 6;
    let encoder = EncoderConfig { dim: 16, heads: 2, ffn_dim: 16, dropout_rate: 0.0, seed: 9 };
    let mut worst = 0.0f64;
    for loss in [
        LossKind::Softmax,
        LossKind::InfoNce { tau: 0.1 },
        LossKind::Circle(CircleParams::default()),
    ] {
        let config = TrainingConfig {
            batch_size: 3,
            negatives_per_step: n,
            bank_capacity: n,
            pad_length: 8,
            base_lr: 1e-2,
            loss,
            ..TrainingConfig::default()
        };
        let mut state = TrainerState::new(encoder, &config).map_err(|e| e.to_string())?;
        let inputs = |rng: &mut ChaCha8Rng, count: usize| {
            (0..count)
                .map(|_| {
                    let seq = unit_sequence(rng, 3..=12, 16);
                    prepare_sequence(&seq, 8, true, rng).unwrap()
                })
                .collect::<Vec<_>>()
        };
        for step in 0..3 {
            let step_inputs = StepInputs {
                anchors: inputs(&mut rng, 3),
                positives: inputs(&mut rng, 3),
                negatives: inputs(&mut rng, n),
            };
            let bank = state.bank.to_vecs();
            let embed = |(x, m): &(FrameDescriptorSequence, FrameMask)| {
                let refined = encode_frames(&state.params, x, m, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                aggregate_video(&refined, m).unwrap().into_vec()
            };
            let negatives: Vec<Vec<f64>> = step_inputs.negatives.iter().map(embed).chain(bank).collect();
            let direct = step_inputs
                .anchors
                .iter()
                .zip(&step_inputs.positives)
                .map(|(a, p)| loss.evaluate(&similarity_scores(&embed(a), &embed(p), &negatives).unwrap()).unwrap().value)
                .sum::<f64>()
                / 3.0;
            let report = apply_step(&mut state, &step_inputs, &loss, config.base_lr, &mut rng).map_err(|e| e.to_string())?;
            if step > 0 && negatives.len() != 2 * n {
                return Err(format!("step {step} saw {} negatives, expected {}", negatives.len(), 2 * n));
            }
            worst = worst.max((report.loss - direct).abs());
        }
    }
    check(worst <= 1e-6, format!("max |step loss - direct loss| {worst:.2e} over 3 losses x 3 steps (tol 1e-6)"))
}

fn desk_encoder() -> EncoderOptions {
    EncoderOptions { dim: None, heads: Some(8), ffn_dim: Some(128), dropout: Some(0.1) }
}

fn desk_training(epochs: usize) -> TrainingConfig {
    TrainingConfig {
        batch_size: 8,
        epochs,
        negatives_per_step: 64,
        bank_capacity: 256,
        pad_length: 32,
        base_lr: 1e-3,
        loss: LossKind::Circle(CircleParams { gamma: 256.0, margin: 0.25 }),
        seed: 0,
    }
}

fn map_of(dir: &Path, run: &Path, tag: &str, measure: SimilarityMeasure) -> Result<f64, String> {
    let frames = dir.join(format!("{tag}_frames.tcad"));
    let videos = dir.join(format!("{tag}_videos.tcad"));
    cmd_embed(&run.join(CHECKPOINT_FILE), &dir.join(CORPUS_FILE), &frames, &videos).map_err(|e| e.to_string())?;
    let corpus = if measure == SimilarityMeasure::Cosine { videos } else { frames };
    let report = cmd_evaluate(&corpus, &dir.join(GROUND_TRUTH_FILE), measure, None).map_err(|e| e.to_string())?;
    Ok(report.map)
}

/// Trains on the default synthetic set; returns (untrained cosine, trained cosine, trained chamfer, seconds).
fn end_to_end(root: &Path) -> Result<(f64, f64, f64, f64), String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let start = Instant::now();
        let data = root.join("data");
        cmd_synth(&SyntheticSpec::default(), &data).map_err(|e| e.to_string())?;
        let manifest = data.join(MANIFEST_FILE);
        let init = root.join("init");
        cmd_train(&manifest, &desk_encoder(), 0, &desk_training(0), &init, false).map_err(|e| e.to_string())?;
        let before = map_of(&data, &init, "init", SimilarityMeasure::Cosine)?;
        let run = root.join("run_a");
        cmd_train(&manifest, &desk_encoder(), 0, &desk_training(10), &run, false).map_err(|e| e.to_string())?;
        let cosine = map_of(&data, &run, "trained", SimilarityMeasure::Cosine)?;
        let secs = start.elapsed().as_secs_f64();
        let chamfer = map_of(&data, &run, "trained", SimilarityMeasure::Chamfer)?;
        Ok((before, cosine, chamfer, secs))
    })
}

fn determinism(root: &Path) -> Outcome {
    let manifest = root.join("data").join(MANIFEST_FILE);
    let run_b = root.join("run_b");
    cmd_train(&manifest, &desk_encoder(), 0, &desk_training(10), &run_b, false).map_err(|e| e.to_string())?;
    let a = std::fs::read(root.join("run_a").join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
    let b = std::fs::read(run_b.join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
    check(a == b, format!("checkpoints of {} and {} bytes, identical: {}", a.len(), b.len(), a == b))
}

fn main() -> ExitCode {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match &outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    };
    report(1, "anchor gradient vs finite differences", anchor_gradient());
    report(2, "encoder gradients vs finite differences", encoder_gradients());
    report(3, "hard negatives dominate", hard_negatives());
    report(4, "cosine decomposition lower-bounds chamfer", lower_bound());
    report(5, "similarities and mAP match brute force", oracle_equivalence());
    report(6, "InfoNCE at tau 1 equals softmax", reduction_identity());

    let root = tempfile::tempdir().expect("temporary directory");
    match end_to_end(root.path()) {
        Ok((before, cosine, chamfer, secs)) => {
            report(
                7,
                "synthetic training improves cosine mAP",
                check(
                    cosine - before >= 0.10 && cosine >= 0.90 && secs < 600.0,
                    format!("cosine mAP {before:.4} -> {cosine:.4} (need +0.10 and >= 0.90), {secs:.1}s single-threaded (limit 600s)"),
                ),
            );
            report(
                8,
                "chamfer mAP >= cosine mAP after training",
                check(chamfer >= cosine, format!("chamfer {chamfer:.4}, cosine {cosine:.4}")),
            );
        }
        Err(e) => {
            report(7, "synthetic training improves cosine mAP", Err(e.clone()));
            report(8, "chamfer mAP >= cosine mAP after training", Err(e));
        }
    }
    report(9, "memory bank loss matches direct computation", bank_consistency());
    report(10, "identical seeds give identical checkpoints", determinism(root.path()));

    if failures == 0 {
        println!("acceptance: all 10 criteria PASS");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria FAIL");
        ExitCode::FAILURE
    }
}
