//! The feedback loop: detected statements are promoted into the statement
//! set, the set is expanded and detection runs again until nothing new can
//! be promoted.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::annotation::AnnotationIndex;
use crate::detection::{DetectionOutput, DetectionRun, TisMatch};
use crate::error::{Error, Result};
use crate::taxonomy::{expand, normalize_text, Provenance, TraitTaxonomy, Trs, TrsSet};

pub const DEFAULT_PROMOTE_THRESHOLD: f64 = 0.9;
pub const DEFAULT_MAX_PASSES: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromotionMode {
    #[serde(alias = "auto")]
    AutoThreshold,
    Annotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromotionPolicy {
    pub mode: PromotionMode,
    pub promote_threshold: f64,
    pub allowed_categories: BTreeSet<u8>,
    /// Detection passes including the initial one.
    pub max_passes: u32,
}

impl PromotionPolicy {
    pub fn auto(promote_threshold: f64, max_passes: u32) -> Self {
        PromotionPolicy {
            mode: PromotionMode::AutoThreshold,
            promote_threshold,
            allowed_categories: BTreeSet::new(),
            max_passes,
        }
    }

    pub fn annotated(allowed_categories: impl IntoIterator<Item = u8>, max_passes: u32) -> Self {
        PromotionPolicy {
            mode: PromotionMode::Annotated,
            promote_threshold: DEFAULT_PROMOTE_THRESHOLD,
            allowed_categories: allowed_categories.into_iter().collect(),
            max_passes,
        }
    }

    pub fn validate(&self, detection_threshold: f64) -> Result<()> {
        if self.max_passes == 0 {
            return Err(Error::InvalidArgument("max_passes must be >= 1".into()));
        }
        match self.mode {
            PromotionMode::AutoThreshold => {
                if !(0.0..=1.0).contains(&self.promote_threshold) || self.promote_threshold < detection_threshold {
                    return Err(Error::InvalidArgument(format!(
                        "promote_threshold {} must lie in [{detection_threshold}, 1]",
                        self.promote_threshold
                    )));
                }
            }
            PromotionMode::Annotated => {
                if self.allowed_categories.is_empty() {
                    return Err(Error::InvalidArgument("no promotable categories given".into()));
                }
                // average-score and noninformative matches carry no usable key
                if let Some(c) = self.allowed_categories.iter().find(|c| !matches!(c, 1 | 2 | 3 | 4 | 6)) {
                    return Err(Error::InvalidArgument(format!("category {c} cannot be promoted")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromotionOutcome {
    pub promoted: Vec<Trs>,
    /// Above-threshold matches without any annotation (annotated mode).
    pub skipped_unannotated: usize,
    /// Category-6 annotations lacking a usable corrected facet.
    pub skipped_uncorrected: usize,
    /// Candidates whose normalized text already exists or repeats.
    pub duplicates: usize,
}

fn promoted_id(generation: u32, m: &TisMatch) -> String {
    format!("P{generation}-{}-{}", m.target_id, m.sentence_id)
}

/// Chooses the matches of one pass that become new statements.
///
/// In annotated mode the pool also includes annotated near misses from
/// `output.below`, since annotation worklists rank by similarity and can
/// reach below the detection threshold.
pub fn select_promotions(
    run: &DetectionRun,
    output: &DetectionOutput,
    set: &TrsSet,
    taxonomy: &TraitTaxonomy,
    policy: &PromotionPolicy,
    annotations: Option<&AnnotationIndex>,
) -> Result<PromotionOutcome> {
    let generation = set.max_generation() + 1;
    let mut outcome = PromotionOutcome::default();
    // (match, domain, facet, key) before deduplication
    let mut picked: Vec<(&TisMatch, String, String, crate::taxonomy::Key)> = Vec::new();
    match policy.mode {
        PromotionMode::AutoThreshold => {
            for m in output.matches.iter().filter(|m| m.similarity >= policy.promote_threshold) {
                picked.push((m, m.domain.clone(), m.facet.clone(), m.key));
            }
        }
        PromotionMode::Annotated => {
            let index = annotations.ok_or_else(|| {
                Error::InvalidArgument("annotated promotion needs an annotation store".into())
            })?;
            for m in &output.matches {
                if !index.is_annotated(&run.run_id, &m.sentence_id) {
                    outcome.skipped_unannotated += 1;
                }
            }
            for m in output.matches.iter().chain(&output.below) {
                let Some(a) = index.effective(&run.run_id, &m.sentence_id) else { continue };
                if !policy.allowed_categories.contains(&a.category) {
                    continue;
                }
                let mut facet = m.facet.clone();
                let mut key = if matches!(a.category, 2 | 4) { m.key.flipped() } else { m.key };
                if let Some(k) = a.corrected_key {
                    key = k;
                }
                if a.category == 6 {
                    match &a.corrected_facet {
                        Some(f) if taxonomy.facet_id(&m.domain, f).is_some() && *f != m.facet => {
                            facet = taxonomy
                                .facet(taxonomy.facet_id(&m.domain, f).expect("checked"))
                                .expect("valid id")
                                .1
                                .to_string();
                        }
                        _ => {
                            outcome.skipped_uncorrected += 1;
                            continue;
                        }
                    }
                }
                picked.push((m, m.domain.clone(), facet, key));
            }
        }
    }
    picked.sort_by(|a, b| {
        b.0.similarity
            .total_cmp(&a.0.similarity)
            .then_with(|| a.0.target_id.cmp(&b.0.target_id))
            .then_with(|| a.0.sentence_id.cmp(&b.0.sentence_id))
    });
    let mut seen: HashSet<String> = set.items().iter().map(|t| normalize_text(&t.text)).collect();
    for (m, domain, facet, key) in picked {
        if !seen.insert(normalize_text(&m.text)) {
            outcome.duplicates += 1;
            continue;
        }
        outcome.promoted.push(Trs {
            id: promoted_id(generation, m),
            text: m.text.clone(),
            domain,
            facet,
            key,
            provenance: Provenance::Promoted,
            source_trs: Some(m.trs_id.clone()),
            active: true,
            generation,
        });
    }
    outcome.promoted.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(outcome)
}

/// A finished detection pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PassRun {
    pub run: DetectionRun,
    pub output: DetectionOutput,
}

/// Storage and detection the loop drives. The project store implements it
/// for real runs; tests use [`MemoryHost`].
pub trait PassHost {
    /// Persists a newly expanded set.
    fn save_set(&mut self, set: &TrsSet) -> Result<()>;
    /// Runs detection with `set` and records the run.
    fn detect(&mut self, set: &TrsSet, pass_index: u32) -> Result<PassRun>;
    /// Annotations available for selecting promotions.
    fn annotations(&self) -> Result<Option<AnnotationIndex>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassReport {
    pub pass_index: u32,
    pub run_id: String,
    pub trs_set: String,
    pub matches: usize,
    /// Matched sentences not matched in any earlier pass.
    pub new_matches: usize,
    /// Statements promoted from this pass's results.
    pub promotions: usize,
    pub skipped_unannotated: usize,
    pub duplicates: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The last pass produced nothing to promote.
    Fixpoint,
    MaxPasses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub policy: PromotionPolicy,
    pub passes: Vec<PassReport>,
    /// Set names from the starting set to the final one.
    pub lineage: Vec<String>,
    pub stop_reason: StopReason,
    /// Promotions selected in the last pass but not applied because the
    /// pass budget ran out.
    pub pending_promotions: usize,
}

impl LoopReport {
    pub fn final_set(&self) -> &str {
        self.lineage.last().expect("lineage holds the starting set")
    }

    pub fn total_promotions(&self) -> usize {
        self.passes.iter().map(|p| p.promotions).sum()
    }
}

pub fn child_set_name(base: &str, pass_index: u32) -> String {
    let root = base.rsplit_once(".p").filter(|(_, n)| n.parse::<u32>().is_ok()).map_or(base, |(r, _)| r);
    format!("{root}.p{pass_index}")
}

/// Runs the loop from an initial pass (pass index 0) until a pass yields
/// no promotions or `policy.max_passes` detection passes have run.
pub fn iterate(
    host: &mut dyn PassHost,
    start_set: TrsSet,
    initial: PassRun,
    taxonomy: &TraitTaxonomy,
    policy: &PromotionPolicy,
) -> Result<LoopReport> {
    policy.validate(initial.run.threshold)?;
    let mut set = start_set;
    let mut current = initial;
    let mut lineage = vec![set.name.clone()];
    let mut matched: HashSet<(String, String)> = HashSet::new();
    let mut passes = Vec::new();
    let mut passes_run = 1;
    loop {
        let new_matches = current
            .output
            .matches
            .iter()
            .filter(|m| matched.insert((m.target_id.clone(), m.sentence_id.clone())))
            .count();
        let annotations = match policy.mode {
            PromotionMode::Annotated => host.annotations()?,
            PromotionMode::AutoThreshold => None,
        };
        let annotations = match (policy.mode, annotations) {
            (PromotionMode::Annotated, None) => Some(AnnotationIndex::default()),
            (_, a) => a,
        };
        let outcome = select_promotions(&current.run, &current.output, &set, taxonomy, policy, annotations.as_ref())?;
        let budget_left = passes_run < policy.max_passes;
        let applied = if budget_left { outcome.promoted.len() } else { 0 };
        passes.push(PassReport {
            pass_index: current.run.pass_index,
            run_id: current.run.run_id.clone(),
            trs_set: set.name.clone(),
            matches: current.output.matches.len(),
            new_matches,
            promotions: applied,
            skipped_unannotated: outcome.skipped_unannotated,
            duplicates: outcome.duplicates,
        });
        if outcome.promoted.is_empty() {
            return Ok(LoopReport {
                policy: policy.clone(),
                passes,
                lineage,
                stop_reason: StopReason::Fixpoint,
                pending_promotions: 0,
            });
        }
        if !budget_left {
            return Ok(LoopReport {
                policy: policy.clone(),
                passes,
                lineage,
                stop_reason: StopReason::MaxPasses,
                pending_promotions: outcome.promoted.len(),
            });
        }
        let pass_index = current.run.pass_index + 1;
        let child = expand(&set, outcome.promoted, child_set_name(&set.name, pass_index), taxonomy)?;
        host.save_set(&child)?;
        lineage.push(child.name.clone());
        set = child;
        current = host.detect(&set, pass_index)?;
        passes_run += 1;
    }
}

/// In-memory host over a fixed candidate list.
pub struct MemoryHost<'a> {
    pub candidates: Vec<crate::corpus::SentenceCandidate>,
    pub embedder: &'a dyn crate::similarity::Embedder,
    pub threshold: f64,
    pub sets: Vec<TrsSet>,
    pub annotations: Vec<crate::annotation::MatchAnnotation>,
    runs: u32,
}

impl<'a> MemoryHost<'a> {
    pub fn new(
        candidates: Vec<crate::corpus::SentenceCandidate>,
        embedder: &'a dyn crate::similarity::Embedder,
        threshold: f64,
    ) -> Self {
        MemoryHost {
            candidates,
            embedder,
            threshold,
            sets: Vec::new(),
            annotations: Vec::new(),
            runs: 0,
        }
    }
}

impl PassHost for MemoryHost<'_> {
    fn save_set(&mut self, set: &TrsSet) -> Result<()> {
        self.sets.push(set.clone());
        Ok(())
    }

    fn detect(&mut self, set: &TrsSet, pass_index: u32) -> Result<PassRun> {
        let output = crate::detection::detect_chunked(
            &self.candidates,
            set,
            self.embedder,
            self.threshold,
            pass_index,
            crate::detection::DEFAULT_CHUNK,
            |_, _| Ok(()),
        )?;
        self.runs += 1;
        let run = DetectionRun {
            run_id: format!("run-{:04}", self.runs),
            trs_set: set.name.clone(),
            backend_id: self.embedder.descriptor().backend_id.clone(),
            threshold: self.threshold,
            pass_index,
            created_at: 0,
            match_count: output.matches.len(),
        };
        Ok(PassRun { run, output })
    }

    fn annotations(&self) -> Result<Option<AnnotationIndex>> {
        Ok(Some(AnnotationIndex::new(&self.annotations)))
    }
}
