//! Video-to-video similarity and ranked retrieval evaluation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{mismatch, Error, Result};
use crate::features::l2_normalize;
use crate::matrix::{dot, Matrix};
use crate::sequence::FrameDescriptorSequence;

/// Frames per tile when filling a similarity matrix.
const TILE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityMeasure {
    /// Dot product of the L2-normalized mean descriptors.
    Cosine,
    /// Mean over `x`'s frames of the best match in `y`.
    Chamfer,
    SymmetricChamfer,
}

fn check_dims(x: &FrameDescriptorSequence, y: &FrameDescriptorSequence) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(mismatch("descriptor dim", x.dim(), y.dim()));
    }
    Ok(())
}

/// Frame-to-frame dot products `x_i · y_j`, computed tile by tile.
///
/// Every entry is a single sequential dot product, so the result is bit-identical
/// to the naive double loop.
pub fn similarity_matrix(x: &FrameDescriptorSequence, y: &FrameDescriptorSequence) -> Result<Matrix> {
    check_dims(x, y)?;
    let (n, m) = (x.frames(), y.frames());
    let mut out = Matrix::zeros(n, m);
    for i0 in (0..n).step_by(TILE) {
        for j0 in (0..m).step_by(TILE) {
            for i in i0..(i0 + TILE).min(n) {
                let xi = x.row(i);
                for j in j0..(j0 + TILE).min(m) {
                    out.set(i, j, dot(xi, y.row(j)));
                }
            }
        }
    }
    Ok(out)
}

/// `(1/n) Σ_i max_j x_i · y_j`. Rows are expected to be unit norm.
pub fn chamfer_similarity(x: &FrameDescriptorSequence, y: &FrameDescriptorSequence) -> Result<f64> {
    let sim = similarity_matrix(x, y)?;
    let total: f64 = sim
        .row_iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / x.frames() as f64)
}

pub fn symmetric_chamfer(x: &FrameDescriptorSequence, y: &FrameDescriptorSequence) -> Result<f64> {
    Ok((chamfer_similarity(x, y)? + chamfer_similarity(y, x)?) / 2.0)
}

fn mean_row(x: &FrameDescriptorSequence) -> Vec<f64> {
    let mut mean = alloc::vec![0.0; x.dim()];
    for row in x.rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= x.frames() as f64);
    mean
}

/// L2-normalized mean descriptor, the compact video-level representation.
pub fn video_level(x: &FrameDescriptorSequence) -> Result<Vec<f64>> {
    l2_normalize(&mean_row(x)).map_err(|_| Error::Degenerate("mean frame descriptor is zero".into()))
}

/// Cosine similarity of the normalized mean descriptors.
pub fn cosine_similarity_video(x: &FrameDescriptorSequence, y: &FrameDescriptorSequence) -> Result<f64> {
    check_dims(x, y)?;
    Ok(dot(&video_level(x)?, &video_level(y)?))
}

/// `(1/nm) Σ_i Σ_j x_i · y_j`, the dot product of the unnormalized means.
/// Never exceeds [`chamfer_similarity`] since a row mean is at most the row max.
pub fn mean_pairwise_similarity(x: &FrameDescriptorSequence, y: &FrameDescriptorSequence) -> Result<f64> {
    check_dims(x, y)?;
    Ok(dot(&mean_row(x), &mean_row(y)))
}

/// Video id → frame sequence (refined frames, or a single row for video-level descriptors).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalCorpus {
    entries: BTreeMap<String, FrameDescriptorSequence>,
    dim: Option<usize>,
}

impl RetrievalCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, seq: FrameDescriptorSequence) -> Result<()> {
        let id = id.into();
        if let Some(d) = self.dim {
            if d != seq.dim() {
                return Err(mismatch("corpus descriptor dim", d, seq.dim()));
            }
        }
        if self.entries.contains_key(&id) {
            return Err(Error::MalformedInput(format!("duplicate video id {id:?}")));
        }
        self.dim = Some(seq.dim());
        self.entries.insert(id, seq);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&FrameDescriptorSequence> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &FrameDescriptorSequence)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, FrameDescriptorSequence)>) -> Result<Self> {
        let mut corpus = RetrievalCorpus::new();
        for (id, seq) in entries {
            corpus.insert(id, seq)?;
        }
        Ok(corpus)
    }
}

/// Tier name used when ground truth has a single relevance level.
pub const DEFAULT_TIER: &str = "all";

/// Query id → tier name → relevant ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    queries: BTreeMap<String, BTreeMap<String, BTreeSet<String>>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, query: impl Into<String>, tier: impl Into<String>, relevant: impl IntoIterator<Item = String>) {
        self.queries
            .entry(query.into())
            .or_default()
            .entry(tier.into())
            .or_default()
            .extend(relevant);
    }

    pub fn queries(&self) -> impl Iterator<Item = (&str, &BTreeMap<String, BTreeSet<String>>)> {
        self.queries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Every query and relevant id must exist in `corpus` (queries may instead come from `queries`).
    pub fn validate(&self, corpus: &RetrievalCorpus, queries: Option<&RetrievalCorpus>) -> Result<()> {
        for (q, tiers) in &self.queries {
            if !corpus.contains(q) && !queries.is_some_and(|qs| qs.contains(q)) {
                return Err(Error::OutOfRange(format!("query {q:?} is not in the corpus")));
            }
            for ids in tiers.values() {
                if let Some(missing) = ids.iter().find(|id| !corpus.contains(id)) {
                    return Err(Error::OutOfRange(format!(
                        "relevant id {missing:?} for query {q:?} is not in the corpus"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Sum of precision at each relevant rank divided by the number of relevant items.
pub fn average_precision<S: AsRef<str>>(ranked: &[S], relevant: &BTreeSet<String>) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, id) in ranked.iter().enumerate() {
        if relevant.contains(id.as_ref()) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}

/// Precomputed per-entry state for a measure (normalized means for cosine).
pub struct PreparedCorpus<'a> {
    corpus: &'a RetrievalCorpus,
    measure: SimilarityMeasure,
    means: BTreeMap<&'a str, Vec<f64>>,
}

impl<'a> PreparedCorpus<'a> {
    pub fn new(corpus: &'a RetrievalCorpus, measure: SimilarityMeasure) -> Result<Self> {
        let means = match measure {
            SimilarityMeasure::Cosine => corpus
                .iter()
                .map(|(id, seq)| Ok((id, video_level(seq)?)))
                .collect::<Result<_>>()?,
            _ => BTreeMap::new(),
        };
        Ok(Self { corpus, measure, means })
    }

    pub fn measure(&self) -> SimilarityMeasure {
        self.measure
    }

    fn score(&self, query: &FrameDescriptorSequence, query_mean: Option<&[f64]>, id: &str, seq: &FrameDescriptorSequence) -> Result<f64> {
        match self.measure {
            SimilarityMeasure::Cosine => {
                let (Some(qm), Some(m)) = (query_mean, self.means.get(id)) else {
                    unreachable!("cosine means are prepared up front")
                };
                Ok(dot(qm, m))
            }
            SimilarityMeasure::Chamfer => chamfer_similarity(query, seq),
            SimilarityMeasure::SymmetricChamfer => symmetric_chamfer(query, seq),
        }
    }

    /// All entries except `query_id`, by descending similarity then ascending id.
    pub fn rank(&self, query_id: &str, query: &FrameDescriptorSequence) -> Result<Vec<(String, f64)>> {
        if let Some(d) = self.corpus.dim() {
            if d != query.dim() {
                return Err(mismatch("query descriptor dim", d, query.dim()));
            }
        }
        let query_mean = match self.measure {
            SimilarityMeasure::Cosine => Some(video_level(query)?),
            _ => None,
        };
        let mut scored = self
            .corpus
            .iter()
            .filter(|(id, _)| *id != query_id)
            .map(|(id, seq)| Ok((id.to_string(), self.score(query, query_mean.as_deref(), id, seq)?)))
            .collect::<Result<Vec<_>>>()?;
        // Entries arrive in ascending id order, so a stable sort keeps the tie-break.
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(scored)
    }
}

/// Outcome of evaluating one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub query: String,
    /// Tier → average precision, for tiers with at least one relevant item.
    pub average_precision: BTreeMap<String, f64>,
    /// Tiers skipped because they had no relevant items besides the query.
    pub skipped_tiers: Vec<String>,
}

/// Evaluates one query of `ground_truth` against the prepared corpus.
pub fn evaluate_query(
    prepared: &PreparedCorpus<'_>,
    query_id: &str,
    query: &FrameDescriptorSequence,
    tiers: &BTreeMap<String, BTreeSet<String>>,
) -> Result<QueryOutcome> {
    let ranked = prepared.rank(query_id, query)?;
    let ids: Vec<&str> = ranked.iter().map(|(id, _)| id.as_str()).collect();
    let mut outcome = QueryOutcome {
        query: query_id.to_string(),
        average_precision: BTreeMap::new(),
        skipped_tiers: Vec::new(),
    };
    for (tier, relevant) in tiers {
        let mut relevant = relevant.clone();
        relevant.remove(query_id);
        if relevant.is_empty() {
            outcome.skipped_tiers.push(tier.clone());
        } else {
            outcome.average_precision.insert(tier.clone(), average_precision(&ids, &relevant));
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub measure: SimilarityMeasure,
    /// Query → tier → AP.
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
    /// Tier → mean AP over the queries evaluated on that tier.
    pub map_by_tier: BTreeMap<String, f64>,
    /// Mean of the per-tier mAPs; equals the single tier's mAP when there is one.
    pub map: f64,
    /// `(query, tier)` pairs skipped for having no relevant items.
    pub skipped: Vec<(String, String)>,
}

impl EvaluationReport {
    /// Reduces per-query outcomes (in any order) into a report.
    pub fn assemble(measure: SimilarityMeasure, outcomes: impl IntoIterator<Item = QueryOutcome>) -> Self {
        let mut per_query = BTreeMap::new();
        let mut skipped = Vec::new();
        let mut tier_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut outcomes: Vec<QueryOutcome> = outcomes.into_iter().collect();
        outcomes.sort_by(|a, b| a.query.cmp(&b.query));
        for o in outcomes {
            for (tier, ap) in &o.average_precision {
                let e = tier_sums.entry(tier.clone()).or_insert((0.0, 0));
                e.0 += ap;
                e.1 += 1;
            }
            skipped.extend(o.skipped_tiers.iter().map(|t| (o.query.clone(), t.clone())));
            per_query.insert(o.query, o.average_precision);
        }
        let map_by_tier: BTreeMap<String, f64> =
            tier_sums.into_iter().map(|(t, (s, n))| (t, s / n as f64)).collect();
        let map = if map_by_tier.is_empty() {
            0.0
        } else {
            map_by_tier.values().sum::<f64>() / map_by_tier.len() as f64
        };
        Self { measure, per_query, map_by_tier, map, skipped }
    }
}

/// Ranks the corpus for every ground-truth query and scores the rankings with AP / mAP.
///
/// Queries are looked up in `queries` first, then in `corpus`; a query is never
/// part of its own ranked list.
pub fn rank_and_score(
    corpus: &RetrievalCorpus,
    queries: Option<&RetrievalCorpus>,
    ground_truth: &GroundTruth,
    measure: SimilarityMeasure,
) -> Result<EvaluationReport> {
    ground_truth.validate(corpus, queries)?;
    let prepared = PreparedCorpus::new(corpus, measure)?;
    let outcomes = ground_truth
        .queries()
        .map(|(q, tiers)| {
            let seq = queries.and_then(|qs| qs.get(q)).or_else(|| corpus.get(q)).expect("validated");
            evaluate_query(&prepared, q, seq, tiers)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport::assemble(measure, outcomes))
}
