//! Annotation records, agreement metrics, statement-quality reports and the
//! generative-service client used to draft and judge statements.
//!
//! Human annotators and machine judges share one `annotator_id` namespace, so
//! every metric treats them alike.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::detection::TisMatch;
use crate::error::{Error, Result};
use crate::remote::GenerationService;
use crate::taxonomy::{Key, Provenance, TraitTaxonomy, Trs, TrsSet};

/// One row of the seven-category scheme for judging a statement match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CategoryInfo {
    pub category: u8,
    pub description: &'static str,
    pub example: &'static str,
    /// False only for the noninformative error.
    pub informative: bool,
}

/// Statement the scheme's examples refer to.
pub const SCHEME_EXAMPLE_TRS: &str = "I'm always prepared.";

pub const MATCH_SCHEME: [CategoryInfo; 7] = [
    CategoryInfo {
        category: 1,
        description: "Correct match",
        example: "I'm always prepared for whatever comes my way.",
        informative: true,
    },
    CategoryInfo {
        category: 2,
        description: "Same generality, opposite polarity",
        example: "I'm never prepared.",
        informative: true,
    },
    CategoryInfo {
        category: 3,
        description: "Less general, same polarity",
        example: "I am prepared.",
        informative: true,
    },
    CategoryInfo {
        category: 4,
        description: "Less general, opposite polarity",
        example: "I came unprepared.",
        informative: true,
    },
    CategoryInfo {
        category: 5,
        description: "Points to average score item",
        example: "I'm never fully prepared, but I'm not unprepared either.",
        informative: true,
    },
    CategoryInfo {
        category: 6,
        description: "Other item/facet of the same domain",
        example: "I always arrange things in order.",
        informative: true,
    },
    CategoryInfo {
        category: 7,
        description: "Other (noninformative error)",
        example: "I prepared a meal.",
        informative: false,
    },
];

pub const CORRECT_MATCH: u8 = 1;

/// An annotator's judgment of one detected (or near-miss) match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchAnnotation {
    pub annotator_id: String,
    pub run_id: String,
    pub sentence_id: String,
    pub category: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_facet: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrected_key: Option<Key>,
    pub created_at: u64,
}

impl MatchAnnotation {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidAnnotation(m));
        if self.annotator_id.trim().is_empty() {
            return bad("empty annotator_id".into());
        }
        if self.run_id.is_empty() || self.sentence_id.is_empty() {
            return bad("match reference needs run_id and sentence_id".into());
        }
        if !(1..=7).contains(&self.category) {
            return bad(format!("category {} outside 1..=7", self.category));
        }
        let corrected = self.corrected_facet.is_some() || self.corrected_key.is_some();
        if corrected && !matches!(self.category, 2 | 6) {
            return bad(format!("corrections are only allowed with categories 2 and 6, got {}", self.category));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleLabel {
    AboveAverage,
    Average,
    BelowAverage,
    CannotDecide,
}

impl BundleLabel {
    pub const ALL: [BundleLabel; 4] = [
        BundleLabel::AboveAverage,
        BundleLabel::Average,
        BundleLabel::BelowAverage,
        BundleLabel::CannotDecide,
    ];

    /// Ordinal position for agreement metrics; `None` for abstentions.
    pub fn ordinal(self) -> Option<u32> {
        match self {
            BundleLabel::BelowAverage => Some(0),
            BundleLabel::Average => Some(1),
            BundleLabel::AboveAverage => Some(2),
            BundleLabel::CannotDecide => None,
        }
    }

    pub fn phrase(self) -> &'static str {
        match self {
            BundleLabel::AboveAverage => "above average",
            BundleLabel::Average => "average",
            BundleLabel::BelowAverage => "below average",
            BundleLabel::CannotDecide => "cannot decide",
        }
    }
}

/// An annotator's grade for one target on one domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleAnnotation {
    pub annotator_id: String,
    pub target_id: String,
    pub domain: String,
    pub label: BundleLabel,
    pub created_at: u64,
}

impl BundleAnnotation {
    pub fn validate(&self) -> Result<()> {
        if self.annotator_id.trim().is_empty() || self.target_id.is_empty() || self.domain.is_empty() {
            return Err(Error::InvalidAnnotation(
                "bundle annotation needs annotator_id, target_id and domain".into(),
            ));
        }
        Ok(())
    }
}

/// Latest record per key. Later rows win ties on `created_at`, so a
/// correction appended with the same timestamp still supersedes.
fn latest_by<T: Clone, K: Ord>(records: &[T], key: impl Fn(&T) -> K, ts: impl Fn(&T) -> u64) -> BTreeMap<K, T> {
    let mut out: BTreeMap<K, T> = BTreeMap::new();
    for r in records {
        let k = key(r);
        match out.get(&k) {
            Some(prev) if ts(prev) > ts(r) => {}
            _ => {
                out.insert(k, r.clone());
            }
        }
    }
    out
}

/// Current annotations per (annotator, bundle).
pub fn latest_bundle_annotations(records: &[BundleAnnotation]) -> Vec<BundleAnnotation> {
    latest_by(
        records,
        |r| (r.annotator_id.clone(), r.target_id.clone(), r.domain.clone()),
        |r| r.created_at,
    )
    .into_values()
    .collect()
}

/// Resolves the current annotation of every match from an append-only log.
#[derive(Debug, Clone, Default)]
pub struct AnnotationIndex {
    /// (run_id, sentence_id, annotator_id) → current record.
    per_annotator: BTreeMap<(String, String, String), MatchAnnotation>,
    /// (run_id, sentence_id) → most recent record over all annotators.
    effective: HashMap<(String, String), MatchAnnotation>,
}

impl AnnotationIndex {
    pub fn new(records: &[MatchAnnotation]) -> Self {
        let per_annotator = latest_by(
            records,
            |r| (r.run_id.clone(), r.sentence_id.clone(), r.annotator_id.clone()),
            |r| r.created_at,
        );
        let effective = latest_by(records, |r| (r.run_id.clone(), r.sentence_id.clone()), |r| r.created_at)
            .into_iter()
            .collect();
        AnnotationIndex {
            per_annotator,
            effective,
        }
    }

    /// The most recent annotation of a match by any annotator.
    pub fn effective(&self, run_id: &str, sentence_id: &str) -> Option<&MatchAnnotation> {
        self.effective.get(&(run_id.to_string(), sentence_id.to_string()))
    }

    pub fn by_annotator(&self, run_id: &str, sentence_id: &str, annotator_id: &str) -> Option<&MatchAnnotation> {
        self.per_annotator
            .get(&(run_id.to_string(), sentence_id.to_string(), annotator_id.to_string()))
    }

    pub fn is_annotated(&self, run_id: &str, sentence_id: &str) -> bool {
        self.effective(run_id, sentence_id).is_some()
    }

    pub fn current(&self) -> impl Iterator<Item = &MatchAnnotation> {
        self.per_annotator.values()
    }

    /// Items × annotators category matrix over the current annotations.
    pub fn category_matrix(&self) -> LabelMatrix {
        LabelMatrix::from_triples(
            self.per_annotator
                .values()
                .map(|a| (format!("{}/{}", a.run_id, a.sentence_id), a.annotator_id.clone(), u32::from(a.category))),
        )
    }
}

/// Items × annotators table with missing cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMatrix {
    pub items: Vec<String>,
    pub annotators: Vec<String>,
    pub cells: Vec<Vec<Option<u32>>>,
}

impl LabelMatrix {
    /// Builds a matrix from (item, annotator, value) triples; items and
    /// annotators are sorted and later triples overwrite earlier ones.
    pub fn from_triples(triples: impl IntoIterator<Item = (String, String, u32)>) -> Self {
        let triples: Vec<_> = triples.into_iter().collect();
        let items: Vec<String> = triples.iter().map(|t| t.0.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let annotators: Vec<String> =
            triples.iter().map(|t| t.1.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        let mut cells = vec![vec![None; annotators.len()]; items.len()];
        for (item, annotator, v) in triples {
            let i = items.binary_search(&item).expect("collected above");
            let a = annotators.binary_search(&annotator).expect("collected above");
            cells[i][a] = Some(v);
        }
        LabelMatrix {
            items,
            annotators,
            cells,
        }
    }
}

/// Difference function for Krippendorff's alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMetric {
    #[default]
    Ordinal,
    Nominal,
}

/// Krippendorff's alpha over an items × annotators matrix.
///
/// Uses the coincidence matrix of pairable values (units with at least two
/// values). Returns `None` when no unit is pairable and `1.0` when there is
/// no observed disagreement.
pub fn agreement_alpha(cells: &[Vec<Option<u32>>], metric: AlphaMetric) -> Option<f64> {
    let units: Vec<Vec<u32>> = cells
        .iter()
        .map(|row| row.iter().flatten().copied().collect::<Vec<_>>())
        .filter(|vals: &Vec<u32>| vals.len() >= 2)
        .collect();
    if units.is_empty() {
        return None;
    }
    let values: Vec<u32> = units.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let v = values.len();
    let idx = |x: u32| values.binary_search(&x).expect("observed value");
    let mut coincidence = vec![vec![0.0f64; v]; v];
    for unit in &units {
        let w = 1.0 / (unit.len() as f64 - 1.0);
        let mut counts = vec![0.0f64; v];
        for &x in unit {
            counts[idx(x)] += 1.0;
        }
        for c in 0..v {
            for k in 0..v {
                let pairs = if c == k {
                    counts[c] * (counts[c] - 1.0)
                } else {
                    counts[c] * counts[k]
                };
                coincidence[c][k] += pairs * w;
            }
        }
    }
    let marginals: Vec<f64> = coincidence.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = marginals.iter().sum();
    let delta = |c: usize, k: usize| -> f64 {
        match metric {
            AlphaMetric::Nominal => f64::from(u8::from(c != k)),
            AlphaMetric::Ordinal => {
                let (lo, hi) = (c.min(k), c.max(k));
                let between: f64 = marginals[lo..=hi].iter().sum();
                let d = between - (marginals[c] + marginals[k]) / 2.0;
                d * d
            }
        }
    };
    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..v {
        for k in 0..v {
            let d = delta(c, k);
            observed += coincidence[c][k] * d;
            expected += marginals[c] * marginals[k] * d;
        }
    }
    if observed == 0.0 {
        return Some(1.0);
    }
    // expected > 0 whenever observed > 0
    Some(1.0 - (n - 1.0) * observed / expected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAgreement {
    pub a: String,
    pub b: String,
    pub agree: usize,
    pub total: usize,
    pub agreement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseReport {
    /// Pairs with at least one co-annotated item.
    pub pairs: Vec<PairAgreement>,
    /// Pairs without co-annotated items.
    pub excluded: Vec<(String, String)>,
    pub mean: Option<f64>,
}

impl PairwiseReport {
    /// Mean agreement of one annotator with every other annotator.
    pub fn annotator_mean(&self, annotator: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .pairs
            .iter()
            .filter(|p| p.a == annotator || p.b == annotator)
            .map(|p| p.agreement)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["annotator_a", "annotator_b", "agree", "total", "agreement"])?;
        for p in &self.pairs {
            w.write_record([
                p.a.clone(),
                p.b.clone(),
                p.agree.to_string(),
                p.total.to_string(),
                p.agreement.to_string(),
            ])?;
        }
        crate::utilization::finish_csv(w)
    }
}

/// Agreement of two annotator columns over co-annotated items, or `None`
/// when they share no item.
pub fn agreement_between(cells: &[Vec<Option<u32>>], a: usize, b: usize) -> Option<(usize, usize)> {
    let mut agree = 0;
    let mut total = 0;
    for row in cells {
        if let (Some(x), Some(y)) = (row[a], row[b]) {
            total += 1;
            agree += usize::from(x == y);
        }
    }
    (total > 0).then_some((agree, total))
}

pub fn pairwise_agreement(matrix: &LabelMatrix) -> PairwiseReport {
    let mut pairs = Vec::new();
    let mut excluded = Vec::new();
    let n = matrix.annotators.len();
    for a in 0..n {
        for b in a + 1..n {
            let (na, nb) = (matrix.annotators[a].clone(), matrix.annotators[b].clone());
            match agreement_between(&matrix.cells, a, b) {
                Some((agree, total)) => pairs.push(PairAgreement {
                    a: na,
                    b: nb,
                    agree,
                    total,
                    agreement: agree as f64 / total as f64,
                }),
                None => excluded.push((na, nb)),
            }
        }
    }
    let mean = (!pairs.is_empty()).then(|| pairs.iter().map(|p| p.agreement).sum::<f64>() / pairs.len() as f64);
    PairwiseReport { pairs, excluded, mean }
}

/// The label held by more than half of the values, if any.
pub fn strict_majority(values: &[u32]) -> Option<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for v in values {
        *counts.entry(*v).or_default() += 1;
    }
    counts.into_iter().find(|(_, c)| 2 * c > values.len()).map(|(v, _)| v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MajorityAccuracy {
    pub correct: usize,
    /// Items where the judge answered and the others held a strict majority.
    pub total: usize,
    /// Items skipped because the other annotators were split.
    pub splits: usize,
    pub accuracy: Option<f64>,
}

/// Accuracy of one annotator against the strict majority of the others.
pub fn majority_accuracy(matrix: &LabelMatrix, judge: &str) -> Result<MajorityAccuracy> {
    let j = matrix
        .annotators
        .iter()
        .position(|a| a == judge)
        .ok_or_else(|| Error::NotFound(format!("annotator {judge}")))?;
    let (mut correct, mut total, mut splits) = (0, 0, 0);
    for row in &matrix.cells {
        let Some(answer) = row[j] else { continue };
        let others: Vec<u32> = row.iter().enumerate().filter(|(i, _)| *i != j).filter_map(|(_, v)| *v).collect();
        if others.is_empty() {
            continue;
        }
        match strict_majority(&others) {
            Some(m) => {
                total += 1;
                correct += usize::from(m == answer);
            }
            None => splits += 1,
        }
    }
    Ok(MajorityAccuracy {
        correct,
        total,
        splits,
        accuracy: (total > 0).then(|| correct as f64 / total as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrsQuality {
    pub trs_id: String,
    pub domain: String,
    pub annotated: usize,
    pub correct: usize,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrsQualityReport {
    pub k: usize,
    pub distribution_k: usize,
    /// Sorted by TRS id.
    pub per_trs: Vec<TrsQuality>,
    /// TRSes with no annotated match in their top `k`.
    pub excluded: Vec<String>,
    /// `histogram[b]` counts TRSes whose proportion lies in `[b/10, (b+1)/10)`,
    /// with 1.0 in the last bucket.
    pub histogram: [usize; 11],
    /// domain → proportion of each category 1..=7 over the top
    /// `distribution_k` annotated matches of the domain's statements.
    pub category_distribution: BTreeMap<String, [f64; 7]>,
}

impl TrsQualityReport {
    /// Number of statements whose correct proportion is at least `threshold`.
    pub fn count_at_least(&self, threshold: f64) -> usize {
        self.per_trs.iter().filter(|q| q.proportion >= threshold).count()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["trs_id", "domain", "annotated", "correct", "proportion"])?;
        for q in &self.per_trs {
            w.write_record([
                q.trs_id.clone(),
                q.domain.clone(),
                q.annotated.to_string(),
                q.correct.to_string(),
                q.proportion.to_string(),
            ])?;
        }
        crate::utilization::finish_csv(w)
    }
}

/// Per-statement share of correct matches among its `k` most similar
/// annotated candidates, plus per-domain category distributions.
///
/// `matches` should hold every best match of the run, near misses
/// included, so annotated worklist items below the threshold count too.
/// Unannotated candidates are ignored.
pub fn trs_quality(
    matches: &[TisMatch],
    set: &TrsSet,
    run_id: &str,
    annotations: &AnnotationIndex,
    k: usize,
    distribution_k: usize,
) -> Result<TrsQualityReport> {
    if k == 0 || distribution_k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let mut by_trs: BTreeMap<&str, Vec<(&TisMatch, u8)>> = BTreeMap::new();
    for m in matches {
        if let Some(a) = annotations.effective(run_id, &m.sentence_id) {
            by_trs.entry(m.trs_id.as_str()).or_default().push((m, a.category));
        }
    }
    let mut per_trs = Vec::new();
    let mut excluded = Vec::new();
    let mut histogram = [0usize; 11];
    let mut dist_counts: BTreeMap<String, [usize; 7]> = BTreeMap::new();
    let mut trs_ids: Vec<&str> = set.items().iter().map(|t| t.id.as_str()).collect();
    trs_ids.sort_unstable();
    for id in trs_ids {
        let trs = set.get(id).expect("id from set");
        let Some(hits) = by_trs.get_mut(id) else {
            excluded.push(id.to_string());
            continue;
        };
        hits.sort_by(|a, b| {
            b.0.similarity
                .total_cmp(&a.0.similarity)
                .then_with(|| a.0.target_id.cmp(&b.0.target_id))
                .then_with(|| a.0.sentence_id.cmp(&b.0.sentence_id))
        });
        let top = &hits[..hits.len().min(k)];
        let correct = top.iter().filter(|(_, c)| *c == CORRECT_MATCH).count();
        let proportion = correct as f64 / top.len() as f64;
        histogram[((proportion * 10.0 + 1e-9).floor() as usize).min(10)] += 1;
        per_trs.push(TrsQuality {
            trs_id: id.to_string(),
            domain: trs.domain.clone(),
            annotated: top.len(),
            correct,
            proportion,
        });
        let counts = dist_counts.entry(trs.domain.clone()).or_default();
        for (_, c) in &hits[..hits.len().min(distribution_k)] {
            counts[usize::from(*c) - 1] += 1;
        }
    }
    let category_distribution = dist_counts
        .into_iter()
        .map(|(d, counts)| {
            let total: usize = counts.iter().sum();
            (d, counts.map(|c| c as f64 / total as f64))
        })
        .collect();
    Ok(TrsQualityReport {
        k,
        distribution_k,
        per_trs,
        excluded,
        histogram,
        category_distribution,
    })
}

/// The four answers a judge may give about a statement and a facet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrsJudgeLabel {
    NoSignal,
    AnotherFacet,
    LessPronounced,
    MorePronounced,
}

impl TrsJudgeLabel {
    pub const ALL: [TrsJudgeLabel; 4] = [
        TrsJudgeLabel::AnotherFacet,
        TrsJudgeLabel::LessPronounced,
        TrsJudgeLabel::MorePronounced,
        TrsJudgeLabel::NoSignal,
    ];

    /// Position on the ordinal scale used for alpha.
    pub fn ordinal(self) -> u32 {
        match self {
            TrsJudgeLabel::NoSignal => 0,
            TrsJudgeLabel::AnotherFacet => 1,
            TrsJudgeLabel::LessPronounced => 2,
            TrsJudgeLabel::MorePronounced => 3,
        }
    }

    /// The answer text offered in the judging prompt.
    pub fn answer(self) -> &'static str {
        match self {
            TrsJudgeLabel::AnotherFacet => "another facet of the same domain",
            TrsJudgeLabel::LessPronounced => "yes, in the direction of less pronounced facet",
            TrsJudgeLabel::MorePronounced => "yes, in the direction of more pronounced facet",
            TrsJudgeLabel::NoSignal => "no, it's not a signal for the domain.",
        }
    }
}

fn key_word(key: Key) -> &'static str {
    match key {
        Key::Positive => "high",
        Key::Negative => "low",
    }
}

pub fn generation_prompt(n: usize, key: Key, domain: &str, facet: &str) -> String {
    format!(
        "list {n} simple statements that could be personality questionnaire items measuring {} {domain}'s facet {facet} but written as if someone wrote them on Reddit. Make them as diverse as possible.",
        key_word(key)
    )
}

pub fn trs_judge_prompt(facet: &str, domain: &str, statement: &str) -> String {
    let answers: Vec<String> = TrsJudgeLabel::ALL.iter().map(|l| format!("'{}'", l.answer())).collect();
    format!(
        "You are a psychologist, and you should answer the question about the statement using possible answers. question: Does the following statement indicate the facet of {facet} of the {domain} domain? statement: {statement} possible answers: [{}]",
        answers.join(", ")
    )
}

/// Statements of a bundle as shown to judges.
pub fn join_statements(statements: &[String]) -> String {
    statements.join(", ")
}

pub fn bundle_judge_prompt(trait_name: &str, statements: &[String]) -> String {
    format!(
        "You are a psychologist tasked with judging the personality trait of {trait_name} based on a set of statements. Respond with one of these grades: above average, average, below average, cannot decide. Statements: {}.",
        join_statements(statements)
    )
}

/// Strips a list marker (`1.`, `2)`, `-`, `*`, `•`) and returns the rest, or
/// `None` when the line has no marker.
fn strip_list_marker(line: &str) -> Option<&str> {
    let t = line.trim_start();
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = t.strip_prefix(bullet) {
            return Some(rest);
        }
    }
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = &t[digits..];
    rest.strip_prefix(". ")
        .or_else(|| rest.strip_prefix(") "))
        .or_else(|| rest.strip_prefix(": "))
}

fn strip_quotes(s: &str) -> &str {
    let s = s.trim();
    for (open, close) in [('"', '"'), ('“', '”'), ('\'', '\'')] {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            if !inner.is_empty() {
                return inner.trim();
            }
        }
    }
    s
}

/// Extracts statements from a generation reply.
///
/// When any line carries a list marker only marked lines are kept, which
/// drops preambles and closing remarks. Otherwise every non-empty line is a
/// statement, provided there are at least two. A single unmarked line is
/// treated as unparseable.
pub fn parse_generated_statements(text: &str) -> Vec<String> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let marked: Vec<&str> = lines.iter().filter_map(|l| strip_list_marker(l)).collect();
    let picked: Vec<&str> = if !marked.is_empty() {
        marked
    } else if lines.len() >= 2 {
        lines
    } else {
        Vec::new()
    };
    picked
        .into_iter()
        .map(strip_quotes)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutcome {
    pub requested: usize,
    pub candidates: Vec<Trs>,
    /// The service reply, kept verbatim.
    pub raw: Option<String>,
}

/// Asks the generative service for `n` statements for one facet and key.
///
/// Candidates come back inactive with generated provenance; they join
/// detection only after a judge accepts them. `n = 0` makes no call.
pub fn generate_trs_candidates(
    service: &GenerationService,
    taxonomy: &TraitTaxonomy,
    domain: &str,
    facet: &str,
    key: Key,
    n: usize,
) -> Result<GenerationOutcome> {
    let fid = taxonomy
        .facet_id(domain, facet)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown facet {domain}/{facet}")))?;
    let (di, facet_name) = taxonomy.facet(fid).expect("valid id");
    let d = &taxonomy.domains()[di];
    if n == 0 {
        return Ok(GenerationOutcome {
            requested: 0,
            candidates: Vec::new(),
            raw: None,
        });
    }
    let raw = service.generate(&generation_prompt(n, key, &d.name, facet_name))?;
    let statements = parse_generated_statements(&raw);
    if statements.len() != n {
        log::warn!(
            "generation for {}/{facet_name} {key}: requested {n}, parsed {}",
            d.name,
            statements.len()
        );
    }
    let local = fid.0 - taxonomy.domain_facets(di).start + 1;
    let sign = if key == Key::Positive { "p" } else { "n" };
    let candidates = statements
        .into_iter()
        .enumerate()
        .map(|(i, text)| Trs {
            id: format!("G-{}{local}{sign}-{:03}", d.code, i + 1),
            text,
            domain: d.name.clone(),
            facet: facet_name.to_string(),
            key,
            provenance: Provenance::Generated,
            source_trs: None,
            active: false,
            generation: 0,
        })
        .collect();
    Ok(GenerationOutcome {
        requested: n,
        candidates,
        raw: Some(raw),
    })
}

/// Lowercases, unifies apostrophes, drops brackets, quotes and trailing
/// punctuation, removes a leading "answer:"-style prefix and collapses
/// whitespace.
pub fn normalize_reply(reply: &str) -> String {
    let lowered = reply.to_lowercase().replace(['’', '‘'], "'").replace(['_', '-'], " ");
    let mut s: String = lowered
        .chars()
        .filter(|c| !matches!(c, '"' | '“' | '”' | '[' | ']' | '(' | ')' | '*' | '`'))
        .collect();
    s = s.split_whitespace().collect::<Vec<_>>().join(" ");
    for prefix in ["answer:", "grade:", "label:", "response:", "final answer:"] {
        if let Some(rest) = s.strip_prefix(prefix) {
            s = rest.trim().to_string();
        }
    }
    s.trim_matches(|c: char| c == '\'' || c == '.' || c == '!' || c == ',' || c.is_whitespace())
        .to_string()
}

/// Maps a bundle-judging reply onto a label, or `None` when the reply names
/// no label or more than one.
pub fn parse_bundle_reply(reply: &str) -> Option<BundleLabel> {
    let s = normalize_reply(reply);
    let cannot = ["cannot decide", "can't decide", "cant decide", "unable to decide", "undecided"]
        .iter()
        .any(|p| s.contains(p));
    let above = s.contains("above average");
    let below = s.contains("below average");
    let plain = s
        .replace("above average", "")
        .replace("below average", "")
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| w == "average");
    let found: Vec<BundleLabel> = [
        (above, BundleLabel::AboveAverage),
        (below, BundleLabel::BelowAverage),
        (plain, BundleLabel::Average),
        (cannot, BundleLabel::CannotDecide),
    ]
    .into_iter()
    .filter_map(|(hit, l)| hit.then_some(l))
    .collect();
    match found.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

/// Maps a statement-judging reply onto one of the four answers.
pub fn parse_trs_reply(reply: &str) -> Option<TrsJudgeLabel> {
    let s = normalize_reply(reply);
    if let Some(l) = TrsJudgeLabel::ALL.into_iter().find(|l| normalize_reply(l.answer()) == s) {
        return Some(l);
    }
    let found: Vec<TrsJudgeLabel> = [
        (s.contains("another facet"), TrsJudgeLabel::AnotherFacet),
        (s.contains("less pronounced"), TrsJudgeLabel::LessPronounced),
        (s.contains("more pronounced"), TrsJudgeLabel::MorePronounced),
        (s.contains("not a signal"), TrsJudgeLabel::NoSignal),
    ]
    .into_iter()
    .filter_map(|(hit, l)| hit.then_some(l))
    .collect();
    match found.as_slice() {
        [one] => Some(*one),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgment<L> {
    pub raw: String,
    /// `None` when the reply could not be mapped onto the label set.
    pub label: Option<L>,
}

pub fn judge_trs(service: &GenerationService, trs: &Trs, facet: &str, domain: &str) -> Result<Judgment<TrsJudgeLabel>> {
    let raw = service.generate(&trs_judge_prompt(facet, domain, &trs.text))?;
    let label = parse_trs_reply(&raw);
    if label.is_none() {
        log::warn!("unmapped judge reply for {}: {raw:?}", trs.id);
    }
    Ok(Judgment { raw, label })
}

pub fn judge_bundle(service: &GenerationService, trait_name: &str, statements: &[String]) -> Result<Judgment<BundleLabel>> {
    let raw = service.generate(&bundle_judge_prompt(trait_name, statements))?;
    let label = parse_bundle_reply(&raw);
    if label.is_none() {
        log::warn!("unmapped bundle reply: {raw:?}");
    }
    Ok(Judgment { raw, label })
}
