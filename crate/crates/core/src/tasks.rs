//! Annotation work queues and time-limited task leases.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::annotation::{latest_bundle_annotations, AnnotationIndex, BundleAnnotation};
use crate::detection::{worklist, TisMatch};
use crate::taxonomy::{Key, TraitTaxonomy, TrsSet};
use crate::utilization::assessment_bundle;

/// One match for an annotator to categorize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchTask {
    pub task_id: String,
    pub run_id: String,
    pub sentence_id: String,
    pub target_id: String,
    pub sentence: String,
    pub similarity: f64,
    pub trs_id: String,
    pub trs_text: String,
    pub domain: String,
    pub facet: String,
    pub key: Key,
}

/// One target's statements on one domain for an annotator to grade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleTask {
    pub task_id: String,
    pub target_id: String,
    pub domain: String,
    pub statements: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPage<T> {
    pub tasks: Vec<T>,
    /// Tasks still open for this annotator, including the returned ones.
    pub remaining: usize,
}

pub fn match_task_id(run_id: &str, sentence_id: &str) -> String {
    format!("{run_id}/{sentence_id}")
}

pub fn bundle_task_id(target_id: &str, domain: &str) -> String {
    format!("{target_id}/{domain}")
}

/// Leases keep two annotators from receiving the same task at once.
#[derive(Debug, Clone, Default)]
pub struct LeaseTable {
    leases: HashMap<String, (String, u64)>,
}

impl LeaseTable {
    /// Whether `annotator` may receive the task at time `now`.
    pub fn available(&self, task_id: &str, annotator: &str, now: u64) -> bool {
        match self.leases.get(task_id) {
            Some((holder, expires)) => holder == annotator || *expires <= now,
            None => true,
        }
    }

    pub fn lease(&mut self, task_id: &str, annotator: &str, now: u64, ttl: u64) {
        self.leases
            .insert(task_id.to_string(), (annotator.to_string(), now.saturating_add(ttl)));
    }

    pub fn release(&mut self, task_id: &str) {
        self.leases.remove(task_id);
    }

    pub fn purge_expired(&mut self, now: u64) {
        self.leases.retain(|_, (_, expires)| *expires > now);
    }
}

/// Inputs shared by both queues.
pub struct QueueParams<'a> {
    pub annotator: &'a str,
    pub per_item: usize,
    pub limit: usize,
    pub now: u64,
    pub leases: Option<&'a LeaseTable>,
}

fn page<T>(open: Vec<T>, limit: usize) -> TaskPage<T> {
    let remaining = open.len();
    TaskPage {
        tasks: open.into_iter().take(limit).collect(),
        remaining,
    }
}

/// The next match tasks for an annotator: the `top_k` most similar best
/// matches of every statement (near misses included), skipping items the
/// annotator already judged, items with enough annotators and items leased
/// to someone else.
pub fn match_tasks(
    run_id: &str,
    best_matches: &[TisMatch],
    set: &TrsSet,
    index: &AnnotationIndex,
    top_k: usize,
    params: &QueueParams,
) -> TaskPage<MatchTask> {
    let mut annotators: HashMap<&str, usize> = HashMap::new();
    for a in index.current().filter(|a| a.run_id == run_id) {
        *annotators.entry(a.sentence_id.as_str()).or_default() += 1;
    }
    let open = worklist(best_matches, top_k)
        .into_iter()
        .filter(|m| index.by_annotator(run_id, &m.sentence_id, params.annotator).is_none())
        .filter(|m| annotators.get(m.sentence_id.as_str()).copied().unwrap_or(0) < params.per_item)
        .filter(|m| {
            params
                .leases
                .is_none_or(|l| l.available(&match_task_id(run_id, &m.sentence_id), params.annotator, params.now))
        })
        .map(|m| MatchTask {
            task_id: match_task_id(run_id, &m.sentence_id),
            run_id: run_id.to_string(),
            trs_text: set.get(&m.trs_id).map(|t| t.text.clone()).unwrap_or_default(),
            sentence_id: m.sentence_id,
            target_id: m.target_id,
            sentence: m.text,
            similarity: m.similarity,
            trs_id: m.trs_id,
            domain: m.domain,
            facet: m.facet,
            key: m.key,
        })
        .collect();
    page(open, params.limit)
}

/// Every non-empty (target, domain) bundle, targets sorted, domains in
/// taxonomy order.
pub fn all_bundles(matches: &[TisMatch], taxonomy: &TraitTaxonomy, k_per_facet: usize) -> Vec<BundleTask> {
    let mut targets: Vec<&str> = matches.iter().map(|m| m.target_id.as_str()).collect();
    targets.sort_unstable();
    targets.dedup();
    let mut out = Vec::new();
    for t in targets {
        for d in taxonomy.domains() {
            let statements = assessment_bundle(t, &d.name, matches, taxonomy, k_per_facet).expect("k >= 1, known domain");
            if !statements.is_empty() {
                out.push(BundleTask {
                    task_id: bundle_task_id(t, &d.name),
                    target_id: t.to_string(),
                    domain: d.name.clone(),
                    statements,
                });
            }
        }
    }
    out
}

pub fn bundle_tasks(
    matches: &[TisMatch],
    taxonomy: &TraitTaxonomy,
    k_per_facet: usize,
    annotations: &[BundleAnnotation],
    params: &QueueParams,
) -> TaskPage<BundleTask> {
    let current = latest_bundle_annotations(annotations);
    let mut labeled: BTreeMap<(String, String), Vec<&str>> = BTreeMap::new();
    for a in &current {
        labeled
            .entry((a.target_id.clone(), a.domain.clone()))
            .or_default()
            .push(a.annotator_id.as_str());
    }
    let open = all_bundles(matches, taxonomy, k_per_facet)
        .into_iter()
        .filter(|b| {
            let who = labeled.get(&(b.target_id.clone(), b.domain.clone()));
            let n = who.map_or(0, Vec::len);
            let mine = who.is_some_and(|w| w.contains(&params.annotator));
            !mine && n < params.per_item
        })
        .filter(|b| params.leases.is_none_or(|l| l.available(&b.task_id, params.annotator, params.now)))
        .collect();
    page(open, params.limit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::{BundleLabel, MatchAnnotation};

    fn tis(sentence: &str, trs: &str, sim: f64) -> TisMatch {
        TisMatch {
            target_id: "t".into(),
            sentence_id: sentence.into(),
            text: format!("I {sentence}"),
            trs_id: trs.into(),
            similarity: sim,
            domain: "Extraversion".into(),
            facet: "Gregariousness".into(),
            key: Key::Positive,
            pass_index: 0,
            backend_id: "lex".into(),
            runner_up: None,
        }
    }

    fn params<'a>(annotator: &'a str, leases: Option<&'a LeaseTable>) -> QueueParams<'a> {
        QueueParams {
            annotator,
            per_item: 2,
            limit: 10,
            now: 100,
            leases,
        }
    }

    #[test]
    fn match_queue_semantics() {
        let set = TrsSet::ipip_neo();
        let trs = &set.items()[30].id;
        let ms: Vec<_> = (0..5).map(|i| tis(&format!("c:{i}"), trs, 0.9 - i as f64 * 0.1)).collect();
        let ann = |who: &str, s: &str| MatchAnnotation {
            annotator_id: who.into(),
            run_id: "r".into(),
            sentence_id: s.into(),
            category: 1,
            corrected_facet: None,
            corrected_key: None,
            created_at: 0,
        };
        let idx = AnnotationIndex::new(&[ann("a1", "c:0"), ann("a2", "c:1"), ann("a3", "c:1")]);
        let p = match_tasks("r", &ms, &set, &idx, 3, &params("a1", None));
        let ids: Vec<_> = p.tasks.iter().map(|t| t.sentence_id.as_str()).collect();
        // c:0 already done by a1, c:1 has two annotators, top-3 cuts c:3 and c:4
        assert_eq!(ids, ["c:2"]);
        assert_eq!(p.remaining, 1);
        assert!(!p.tasks[0].trs_text.is_empty());

        let mut leases = LeaseTable::default();
        leases.lease("r/c:2", "a2", 100, 60);
        assert!(match_tasks("r", &ms, &set, &idx, 3, &params("a1", Some(&leases))).tasks.is_empty());
        assert!(leases.available("r/c:2", "a1", 160));
        leases.purge_expired(160);
        assert!(leases.available("r/c:2", "a1", 100));
    }

    #[test]
    fn bundle_queue_semantics() {
        let tax = TraitTaxonomy::big_five();
        let ms = vec![tis("c:0", "x", 0.7), tis("c:1", "x", 0.8)];
        let all = all_bundles(&ms, &tax, 3);
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].statements, ["I c:1", "I c:0"]);
        let label = BundleAnnotation {
            annotator_id: "a1".into(),
            target_id: "t".into(),
            domain: "Extraversion".into(),
            label: BundleLabel::Average,
            created_at: 0,
        };
        assert!(bundle_tasks(&ms, &tax, 3, std::slice::from_ref(&label), &params("a1", None)).tasks.is_empty());
        assert_eq!(bundle_tasks(&ms, &tax, 3, &[label], &params("a2", None)).remaining, 1);
    }
}
