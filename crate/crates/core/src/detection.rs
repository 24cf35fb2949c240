//! Best-match detection of trait-indicative statements (TISes).
//!
//! Every candidate sentence is compared with every active TRS. The single
//! most similar TRS is kept (ties go to the lexicographically smallest id) and
//! the pair becomes a [`TisMatch`] when its similarity reaches the threshold.
//! Best matches below the threshold are returned separately so annotation
//! worklists can include near misses.

use serde::{Deserialize, Serialize};

use crate::corpus::SentenceCandidate;
use crate::error::{Error, Result};
use crate::similarity::{cosine, Embedder, EmbeddingVector};
use crate::taxonomy::{Key, Trs, TrsSet};

pub const DEFAULT_THRESHOLD: f64 = 0.6;
pub const DEFAULT_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TisMatch {
    pub target_id: String,
    pub sentence_id: String,
    pub text: String,
    pub trs_id: String,
    pub similarity: f64,
    pub domain: String,
    pub facet: String,
    pub key: Key,
    pub pass_index: u32,
    pub backend_id: String,
    /// Similarity of the second-best TRS, kept for diagnostics only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runner_up: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRun {
    pub run_id: String,
    pub trs_set: String,
    pub backend_id: String,
    pub threshold: f64,
    pub pass_index: u32,
    pub created_at: u64,
    pub match_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionOutput {
    /// Best matches at or above the threshold.
    pub matches: Vec<TisMatch>,
    /// Best matches below the threshold.
    pub below: Vec<TisMatch>,
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(())
}

/// TRS vectors computed once and reused across candidate chunks.
pub struct Detector<'a> {
    trs: Vec<&'a Trs>,
    trs_vectors: Vec<EmbeddingVector>,
    embedder: &'a dyn Embedder,
    threshold: f64,
    pass_index: u32,
}

impl<'a> Detector<'a> {
    pub fn new(set: &'a TrsSet, embedder: &'a dyn Embedder, threshold: f64, pass_index: u32) -> Result<Self> {
        check_threshold(threshold)?;
        let mut trs: Vec<&Trs> = set.active().collect();
        if trs.is_empty() {
            return Err(Error::InvalidArgument(format!("set {} has no active statements", set.name)));
        }
        trs.sort_by(|a, b| a.id.cmp(&b.id));
        let texts: Vec<String> = trs.iter().map(|t| t.text.clone()).collect();
        let trs_vectors = embedder.embed_batch(&texts)?;
        Ok(Detector {
            trs,
            trs_vectors,
            embedder,
            threshold,
            pass_index,
        })
    }

    /// Best match for one already-embedded sentence.
    pub fn best_match(&self, candidate: &SentenceCandidate, vector: &EmbeddingVector) -> Result<TisMatch> {
        let mut best: Option<(usize, f64)> = None;
        let mut runner_up: Option<f64> = None;
        for (i, tv) in self.trs_vectors.iter().enumerate() {
            let s = cosine(vector, tv)?;
            match best {
                // strict comparison: earlier (smaller) ids win ties
                Some((_, b)) if s <= b => {
                    if runner_up.is_none_or(|r| s > r) {
                        runner_up = Some(s);
                    }
                }
                _ => {
                    runner_up = best.map(|(_, b)| b);
                    best = Some((i, s));
                }
            }
        }
        let (i, similarity) = best.expect("detector has at least one statement");
        let trs = self.trs[i];
        Ok(TisMatch {
            target_id: candidate.target_id.clone(),
            sentence_id: candidate.sentence_id.clone(),
            text: candidate.text.clone(),
            trs_id: trs.id.clone(),
            similarity,
            domain: trs.domain.clone(),
            facet: trs.facet.clone(),
            key: trs.key,
            pass_index: self.pass_index,
            backend_id: self.embedder.descriptor().backend_id.clone(),
            runner_up,
        })
    }

    pub fn run_chunk(&self, candidates: &[SentenceCandidate]) -> Result<DetectionOutput> {
        use rayon::prelude::*;
        let texts: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
        let vectors = self.embedder.embed_batch(&texts)?;
        let best: Vec<TisMatch> = candidates
            .par_iter()
            .zip(vectors.par_iter())
            .map(|(c, v)| self.best_match(c, v))
            .collect::<Result<_>>()?;
        let (matches, below) = best.into_iter().partition(|m| m.similarity >= self.threshold);
        Ok(DetectionOutput { matches, below })
    }
}

/// Matches at or above `threshold`, one per sentence at most.
pub fn detect(
    candidates: &[SentenceCandidate],
    set: &TrsSet,
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<Vec<TisMatch>> {
    Ok(detect_chunked(candidates, set, embedder, threshold, 0, DEFAULT_CHUNK, |_, _| Ok(()))?.matches)
}

/// Runs detection chunk by chunk, calling `checkpoint` after each chunk with
/// the number of candidates completed so far. A failure after some chunks
/// succeeded is reported as [`Error::PartialDetection`].
pub fn detect_chunked(
    candidates: &[SentenceCandidate],
    set: &TrsSet,
    embedder: &dyn Embedder,
    threshold: f64,
    pass_index: u32,
    chunk_size: usize,
    mut checkpoint: impl FnMut(usize, &DetectionOutput) -> Result<()>,
) -> Result<DetectionOutput> {
    let detector = Detector::new(set, embedder, threshold, pass_index)?;
    let mut out = DetectionOutput::default();
    let mut done = 0;
    for chunk in candidates.chunks(chunk_size.max(1)) {
        let part = detector.run_chunk(chunk).map_err(|e| Error::PartialDetection {
            completed: done,
            total: candidates.len(),
            source: Box::new(e),
        })?;
        done += chunk.len();
        checkpoint(done, &part)?;
        out.matches.extend(part.matches);
        out.below.extend(part.below);
    }
    Ok(out)
}

fn by_similarity_desc(a: &TisMatch, b: &TisMatch) -> std::cmp::Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.target_id.cmp(&b.target_id))
        .then_with(|| a.sentence_id.cmp(&b.sentence_id))
}

/// The `k` most similar matches of one TRS, most similar first.
pub fn top_k_for_trs(matches: &[TisMatch], set: &TrsSet, trs_id: &str, k: usize) -> Result<Vec<TisMatch>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if set.get(trs_id).is_none() {
        return Err(Error::UnknownTrs(trs_id.to_string()));
    }
    let mut hits: Vec<TisMatch> = matches.iter().filter(|m| m.trs_id == trs_id).cloned().collect();
    hits.sort_by(by_similarity_desc);
    hits.truncate(k);
    Ok(hits)
}

/// Top-`k` slices for every TRS that has matches, in TRS id order.
pub fn worklist(matches: &[TisMatch], k: usize) -> Vec<TisMatch> {
    let mut sorted: Vec<&TisMatch> = matches.iter().collect();
    sorted.sort_by(|a, b| a.trs_id.cmp(&b.trs_id).then_with(|| by_similarity_desc(a, b)));
    let mut out = Vec::new();
    let mut current: Option<&str> = None;
    let mut taken = 0;
    for m in sorted {
        if current != Some(m.trs_id.as_str()) {
            current = Some(m.trs_id.as_str());
            taken = 0;
        }
        if taken < k {
            out.push(m.clone());
            taken += 1;
        }
    }
    out
}
