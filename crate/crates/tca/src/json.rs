//! JSON files: dataset manifest, ground truth, evaluation report, training log.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tca_core::retrieval::{EvaluationReport, GroundTruth, RetrievalCorpus, SimilarityMeasure};
use tca_core::trainer::{StepRecord, TrainingPairs};

use crate::error::{TcaError, TcaResult};
use crate::format::{read_corpus, write_atomic};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> TcaResult<T> {
    let text = fs::read_to_string(path).map_err(|e| TcaError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| TcaError::Json { path: path.into(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> TcaResult<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        w.write_all(b"\n")
    })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub core_pairs: Vec<[String; 2]>,
    pub distractors: Vec<String>,
    /// Video id → descriptor corpus file, relative to the manifest's directory.
    pub features: BTreeMap<String, String>,
}

/// Training pairs plus the frame descriptors of every usable video.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub pairs: TrainingPairs,
    pub videos: RetrievalCorpus,
    pub skipped_distractors: Vec<String>,
}

impl Manifest {
    /// Resolves every feature file. A core video without descriptors is an error; a
    /// distractor without them is dropped with a warning.
    pub fn load(path: &Path) -> TcaResult<LoadedManifest> {
        let manifest: Manifest = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut files: BTreeMap<PathBuf, Option<RetrievalCorpus>> = BTreeMap::new();
        let mut videos = RetrievalCorpus::new();
        let mut fetch = |id: &str| -> TcaResult<Option<_>> {
            let Some(rel) = manifest.features.get(id) else { return Ok(None) };
            let file = base.join(rel);
            if !files.contains_key(&file) {
                let loaded = match read_corpus(&file) {
                    Ok(c) => Some(c),
                    Err(TcaError::Io { .. }) => None,
                    Err(e) => return Err(e),
                };
                files.insert(file.clone(), loaded);
            }
            Ok(files[&file].as_ref().and_then(|c| c.get(id)).cloned())
        };
        let mut core_ids = BTreeSet::new();
        for [a, b] in &manifest.core_pairs {
            core_ids.insert(a.as_str());
            core_ids.insert(b.as_str());
        }
        for id in &core_ids {
            let seq = fetch(id)?
                .ok_or_else(|| TcaError::Data(format!("core video {id:?} has no frame descriptors")))?;
            videos.insert(*id, seq)?;
        }
        let mut distractors = Vec::new();
        let mut skipped = Vec::new();
        for id in &manifest.distractors {
            match fetch(id)? {
                Some(seq) if !videos.contains(id) => {
                    videos.insert(id.clone(), seq)?;
                    distractors.push(id.clone());
                }
                Some(_) => distractors.push(id.clone()),
                None => {
                    log::warn!("distractor {id:?} has no frame descriptors; skipping it");
                    skipped.push(id.clone());
                }
            }
        }
        let core = manifest.core_pairs.iter().map(|[a, b]| (a.clone(), b.clone())).collect();
        let pairs = TrainingPairs::new(core, distractors)?;
        Ok(LoadedManifest { pairs, videos, skipped_distractors: skipped })
    }
}

/// `{query: {tier: [ids]}}`
pub type GroundTruthFile = BTreeMap<String, BTreeMap<String, Vec<String>>>;

pub fn read_ground_truth(path: &Path) -> TcaResult<GroundTruth> {
    let file: GroundTruthFile = read_json(path)?;
    let mut gt = GroundTruth::new();
    for (query, tiers) in file {
        for (tier, ids) in tiers {
            gt.add(query.clone(), tier, ids);
        }
    }
    Ok(gt)
}

pub fn write_ground_truth(path: &Path, gt: &GroundTruth) -> TcaResult<()> {
    let file: GroundTruthFile = gt
        .queries()
        .map(|(q, tiers)| {
            let tiers = tiers.iter().map(|(t, ids)| (t.clone(), ids.iter().cloned().collect())).collect();
            (q.to_string(), tiers)
        })
        .collect();
    write_json(path, &file)
}

pub fn measure_name(m: SimilarityMeasure) -> &'static str {
    match m {
        SimilarityMeasure::Cosine => "cosine",
        SimilarityMeasure::Chamfer => "chamfer",
        SimilarityMeasure::SymmetricChamfer => "symmetric-chamfer",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub measure: String,
    pub map: f64,
    pub map_by_tier: BTreeMap<String, f64>,
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
    pub skipped: Vec<[String; 2]>,
}

impl From<&EvaluationReport> for ReportFile {
    fn from(r: &EvaluationReport) -> Self {
        Self {
            measure: measure_name(r.measure).to_string(),
            map: r.map,
            map_by_tier: r.map_by_tier.clone(),
            per_query: r.per_query.clone(),
            skipped: r.skipped.iter().map(|(q, t)| [q.clone(), t.clone()]).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub bank_size: usize,
}

impl From<&StepRecord> for LogRecord {
    fn from(r: &StepRecord) -> Self {
        Self { step: r.step, epoch: r.epoch, loss: r.loss, lr: r.lr, bank_size: r.bank_size }
    }
}

pub fn read_log(path: &Path) -> TcaResult<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| TcaError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|source| TcaError::Json { path: path.into(), source }))
        .collect()
}

pub fn write_log(path: &Path, records: &[LogRecord]) -> TcaResult<()> {
    write_atomic(path, |w| {
        for r in records {
            serde_json::to_writer(&mut *w, r).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}
