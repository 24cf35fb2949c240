//! Property tests for the pipeline invariants.

mod oracle;

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use proptest::prelude::*;
use proptest::sample::select;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use simpa_core::annotation::{agreement_alpha, agreement_between, pairwise_agreement, AlphaMetric, AnnotationIndex, LabelMatrix};
use simpa_core::corpus::{availability_report, extract_candidates, segment, Comment, FilterConfig, PronounMatcher, SentenceCandidate};
use simpa_core::detection::{detect_chunked, DetectionOutput, TisMatch, DEFAULT_CHUNK};
use simpa_core::error::Result as CoreResult;
use simpa_core::feedback::{iterate, MemoryHost, PassHost, PassRun, PromotionPolicy};
use simpa_core::pca::Pca;
use simpa_core::similarity::LexicalBackend;
use simpa_core::taxonomy::{expand, self_referentialize, Key, Provenance, TraitTaxonomy, Trs, TrsSet};
use simpa_core::utilization::{percentiles, score, ScoreSheet};

fn tax() -> TraitTaxonomy {
    TraitTaxonomy::big_five()
}

/// `(target, facet index, positive)` triples turned into matches.
fn matches_from(triples: &[(u8, u8, bool)]) -> Vec<TisMatch> {
    let tax = tax();
    triples.iter()
        .enumerate()
        .map(|(i, &(t, f, pos))| {
            let (di, facet) = tax.facet(simpa_core::taxonomy::FacetId(usize::from(f))).unwrap();
            TisMatch {
                target_id: format!("t{t}"),
                sentence_id: format!("s{i}:0"),
                text: String::new(),
                trs_id: format!("X{f}"),
                similarity: 0.75,
                domain: tax.domains()[di].name.clone(),
                facet: facet.to_string(),
                key: if pos { Key::Positive } else { Key::Negative },
                pass_index: 0,
                backend_id: "lexical".into(),
                runner_up: None,
            }
        })
        .collect()
}

fn match_triples() -> impl Strategy<Value = Vec<(u8, u8, bool)>> {
    proptest::collection::vec((0u8..5, 0u8..30, any::<bool>()), 0..200)
}

/// Rewrites one domain's counts through a strictly increasing map of the
/// proportion while keeping every eligibility decision unchanged.
fn monotone_rewrite(sheets: &[ScoreSheet], domain: &str, min_tis: u64) -> Vec<ScoreSheet> {
    let mut props: Vec<(u64, u64)> = sheets
        .iter()
        .filter_map(|s| s.domain(domain))
        .filter(|d| d.tis_total > 0)
        .map(|d| (d.positive, d.tis_total))
        .collect();
    props.sort_by(|a, b| (u128::from(a.0) * u128::from(b.1)).cmp(&(u128::from(b.0) * u128::from(a.1))));
    props.dedup_by(|a, b| u128::from(a.0) * u128::from(b.1) == u128::from(b.0) * u128::from(a.1));
    let levels = props.len() as u64;
    sheets
        .iter()
        .map(|s| {
            let mut s = s.clone();
            let eligible = s.domains.iter().any(|d| d.tis_total > min_tis);
            if let Some(d) = s.domains.iter_mut().find(|d| d.domain == domain) {
                if eligible && d.tis_total > 0 {
                    let r = props
                        .iter()
                        .position(|&(p, t)| u128::from(p) * u128::from(d.tis_total) == u128::from(d.positive) * u128::from(t))
                        .unwrap() as u64;
                    // p' = (r + 1) / (levels + 1), scaled to keep the total above min_tis
                    let m = 1000;
                    d.positive = (r + 1) * m;
                    d.negative = (levels - r) * m;
                    d.tis_total = d.positive + d.negative;
                }
            }
            s
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn scores_equal_recount(triples in match_triples()) {
        let tax = tax();
        let matches = matches_from(&triples);
        let sheets = score(&matches, &tax).unwrap();
        let rc = oracle::recount(&matches, &tax);
        prop_assert_eq!(sheets.len(), rc.facets.len());
        for s in &sheets {
            for f in &s.facets {
                let (p, n) = rc.facets[&s.target_id][&f.facet];
                prop_assert_eq!((f.positive, f.negative), (p, n));
            }
            for d in &s.domains {
                let (p, n) = rc.domains[&s.target_id][&d.domain];
                prop_assert_eq!((d.positive, d.negative, d.tis_total), (p, n, p + n));
            }
            // every match contributes exactly one unit
            let total: u64 = s.domains.iter().map(|d| d.tis_total).sum();
            prop_assert_eq!(total as usize, matches.iter().filter(|m| m.target_id == s.target_id).count());
        }
    }

    #[test]
    fn shuffling_matches_changes_nothing(triples in match_triples(), seed in any::<u64>(), min_tis in 0u64..5) {
        let tax = tax();
        let matches = matches_from(&triples);
        let mut shuffled = matches.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = score(&matches, &tax).unwrap();
        let b = score(&shuffled, &tax).unwrap();
        prop_assert_eq!(&a, &b);
        for d in ["N", "E", "O", "A", "C"] {
            prop_assert_eq!(percentiles(&a, &tax, d, min_tis).unwrap(), percentiles(&b, &tax, d, min_tis).unwrap());
        }
    }

    #[test]
    fn percentiles_depend_only_on_order(triples in match_triples(), min_tis in 0u64..5, d in select(vec!["N", "E", "O", "A", "C"])) {
        let tax = tax();
        let sheets = score(&matches_from(&triples), &tax).unwrap();
        let name = &tax.domains()[tax.domain_index(d).unwrap()].name;
        let before = percentiles(&sheets, &tax, d, min_tis).unwrap();
        let after = percentiles(&monotone_rewrite(&sheets, name, min_tis), &tax, d, min_tis).unwrap();
        let strip = |t: &simpa_core::utilization::PercentileTable| -> Vec<(String, f64, f64)> {
            t.rows.iter().map(|r| (r.target_id.clone(), r.rank, r.percent)).collect()
        };
        prop_assert_eq!(strip(&before), strip(&after));
        prop_assert_eq!(&before.abstained, &after.abstained);
        prop_assert_eq!(&before.ineligible, &after.ineligible);
    }

    #[test]
    fn abstention_is_sound(triples in match_triples(), min_tis in 0u64..5) {
        let tax = tax();
        let sheets = score(&matches_from(&triples), &tax).unwrap();
        for dom in tax.domains() {
            let table = percentiles(&sheets, &tax, &dom.code, min_tis).unwrap();
            for s in &sheets {
                let zero = s.domain(&dom.name).is_none_or(|d| d.tis_total == 0);
                if zero {
                    prop_assert!(table.percent(&s.target_id).is_none());
                }
                let placed = usize::from(table.percent(&s.target_id).is_some())
                    + usize::from(table.abstained.contains(&s.target_id))
                    + usize::from(table.ineligible.contains(&s.target_id));
                prop_assert_eq!(placed, 1);
            }
            for r in &table.rows {
                prop_assert!(r.percent > 0.0 && r.percent <= 100.0);
            }
        }
    }

    #[test]
    fn pca_reconstruction_error_never_grows(seed in any::<u64>(), rows in 3usize..12, cols in 2usize..9) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = DMatrix::from_fn(rows, cols, |_, _| f64::from(rng.random_range(0u32..6)));
        let k_max = rows.min(cols);
        let full = Pca::fit(&data, k_max);
        let gram = &full.components * full.components.transpose();
        let ortho = (gram - DMatrix::<f64>::identity(full.n_components(), full.n_components())).abs().max();
        prop_assert!(ortho <= 1e-8, "orthonormality {}", ortho);
        let mut last = f64::INFINITY;
        for k in 1..=k_max {
            let pca = Pca::fit(&data, k);
            let err = (pca.inverse_transform(&pca.transform(&data)) - &data).norm_squared();
            prop_assert!(err <= last + 1e-9, "k={} error {} after {}", k, err, last);
            last = err;
        }
    }

    #[test]
    fn alpha_is_bounded(cells in proptest::collection::vec(proptest::collection::vec(proptest::option::weighted(0.85, 0u32..4), 3), 1..12)) {
        for metric in [AlphaMetric::Ordinal, AlphaMetric::Nominal] {
            if let Some(a) = agreement_alpha(&cells, metric) {
                prop_assert!((-1.0 - 1e-12..=1.0).contains(&a), "alpha {}", a);
                let disagreement = cells.iter().any(|r| {
                    let v: BTreeSet<u32> = r.iter().flatten().copied().collect();
                    v.len() > 1
                });
                prop_assert_eq!(a == 1.0, !disagreement);
            }
        }
    }

    #[test]
    fn pairwise_agreement_is_symmetric(cells in proptest::collection::vec(proptest::collection::vec(proptest::option::of(0u32..3), 4), 1..10)) {
        for a in 0..4 {
            if let Some((agree, total)) = agreement_between(&cells, a, a) {
                prop_assert_eq!(agree, total);
            }
            for b in 0..4 {
                prop_assert_eq!(agreement_between(&cells, a, b), agreement_between(&cells, b, a));
            }
        }
        let matrix = LabelMatrix {
            items: (0..cells.len()).map(|i| format!("i{i}")).collect(),
            annotators: (0..4).map(|a| format!("a{a}")).collect(),
            cells,
        };
        for p in pairwise_agreement(&matrix).pairs {
            prop_assert!((0.0..=1.0).contains(&p.agreement));
        }
    }
}

fn inventory() -> TrsSet {
    TrsSet::ipip_neo()
}

fn inventory_texts() -> Vec<String> {
    inventory().items().iter().map(|t| t.text.clone()).collect()
}

/// Sentences built from inventory words plus a few unrelated ones.
fn sentence() -> impl Strategy<Value = String> {
    let words: Vec<String> = inventory_texts()
        .iter()
        .flat_map(|t| t.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .chain(["weather", "bicycle", "coffee"].map(String::from))
        .collect();
    prop_oneof![
        select(inventory_texts()),
        (select(inventory_texts()), select(words.clone())).prop_map(|(t, w)| format!("{t} {w}")),
        proptest::collection::vec(select(words), 2..8).prop_map(|w| format!("I {}", w.join(" "))),
    ]
}

fn idempotence_corpus() -> Vec<String> {
    let mut texts = inventory_texts();
    for raw in ["Worry about things", "Am the life of the party", "Believe in the importance of art", "I'm always prepared", ""] {
        texts.push(raw.to_string());
    }
    texts
}

fn candidates(texts: &[String]) -> Vec<SentenceCandidate> {
    texts
        .iter()
        .enumerate()
        .map(|(i, text)| SentenceCandidate {
            target_id: format!("t{}", i % 3),
            sentence_id: format!("c{i}:0"),
            text: text.clone(),
            token_count: text.split_whitespace().count(),
        })
        .collect()
}

fn detect(cands: &[SentenceCandidate], set: &TrsSet, backend: &LexicalBackend, threshold: f64) -> DetectionOutput {
    detect_chunked(cands, set, backend, threshold, 0, DEFAULT_CHUNK, |_, _| Ok(())).unwrap()
}

fn pairs(out: &DetectionOutput) -> BTreeSet<(String, String)> {
    out.matches.iter().map(|m| (m.sentence_id.clone(), m.trs_id.clone())).collect()
}

/// Host wrapper that keeps every pass output.
struct Recording<'a> {
    inner: MemoryHost<'a>,
    outputs: Vec<DetectionOutput>,
}

impl PassHost for Recording<'_> {
    fn save_set(&mut self, set: &TrsSet) -> CoreResult<()> {
        self.inner.save_set(set)
    }

    fn detect(&mut self, set: &TrsSet, pass_index: u32) -> CoreResult<PassRun> {
        let run = self.inner.detect(set, pass_index)?;
        self.outputs.push(run.output.clone());
        Ok(run)
    }

    fn annotations(&self) -> CoreResult<Option<AnnotationIndex>> {
        self.inner.annotations()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn detection_thresholds_nest(texts in proptest::collection::vec(sentence(), 1..25), t1 in 0.3f64..0.9, dt in 0.0f64..0.1) {
        let set = inventory();
        let backend = LexicalBackend::new("lexical");
        let cands = candidates(&texts);
        let low = detect(&cands, &set, &backend, t1);
        let high = detect(&cands, &set, &backend, t1 + dt);
        prop_assert!(pairs(&high).is_subset(&pairs(&low)));
        let ids: BTreeSet<&str> = low.matches.iter().map(|m| m.sentence_id.as_str()).collect();
        prop_assert_eq!(ids.len(), low.matches.len());
        prop_assert_eq!(&detect(&cands, &set, &backend, t1), &low);
    }

    #[test]
    fn feedback_loop_invariants(texts in proptest::collection::vec(sentence(), 1..20), max_passes in 1u32..5) {
        let tax = tax();
        let set = inventory();
        let backend = LexicalBackend::new("lexical");
        let mut host = Recording { inner: MemoryHost::new(candidates(&texts), &backend, 0.6), outputs: Vec::new() };
        let first = host.detect(&set, 0).unwrap();
        let report = iterate(&mut host, set.clone(), first, &tax, &PromotionPolicy::auto(0.9, max_passes)).unwrap();
        prop_assert!(report.passes.len() <= max_passes as usize);
        prop_assert_eq!(report.passes.len(), host.outputs.len());

        // monotone recall
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for out in &host.outputs {
            let now: BTreeSet<String> = out.matches.iter().map(|m| m.sentence_id.clone()).collect();
            prop_assert!(seen.is_subset(&now));
            seen = now;
        }

        // self-match: each promoted statement matches its sentence at 1.0 next pass
        for (pass, child) in host.inner.sets.iter().enumerate() {
            let next = &host.outputs[pass + 1];
            for t in child.items().iter().filter(|t| t.generation as usize == pass + 1) {
                let hit = next.matches.iter().find(|m| m.text == t.text).expect("originating sentence matched");
                prop_assert!((hit.similarity - 1.0).abs() <= 1e-12);
            }
        }

        // lineage: parents are kept verbatim and every chain resolves
        let mut parent = &set;
        for child in &host.inner.sets {
            prop_assert_eq!(child.parent.as_deref(), Some(parent.name.as_str()));
            prop_assert_eq!(&child.items()[..parent.len()], parent.items());
            for t in child.items().iter().filter(|t| t.provenance == Provenance::Promoted) {
                let chain = child.source_chain(&t.id).unwrap();
                prop_assert!(chain.last().unwrap().provenance != Provenance::Promoted);
            }
            parent = child;
        }
    }

    #[test]
    fn expansion_only_grows(n in 0usize..5, facet in 0usize..30) {
        let tax = tax();
        let base = inventory();
        let (di, facet) = tax.facet(simpa_core::taxonomy::FacetId(facet)).unwrap();
        let new: Vec<Trs> = (0..n)
            .map(|i| Trs {
                id: format!("G-{i}"),
                text: format!("I generated statement {i}"),
                domain: tax.domains()[di].name.clone(),
                facet: facet.to_string(),
                key: Key::Positive,
                provenance: Provenance::Generated,
                source_trs: None,
                active: true,
                generation: 0,
            })
            .collect();
        let child = expand(&base, new, "child", &tax).unwrap();
        prop_assert_eq!(child.len(), base.len() + n);
        prop_assert_eq!(&child.items()[..base.len()], base.items());
        prop_assert!(child.items()[base.len()..].iter().all(|t| t.generation == 1));
    }

    #[test]
    fn unknown_facets_are_rejected(facet in "[A-Z][a-z]{2,12}", domain in select(vec!["Neuroticism", "Extraversion", "Openness", "Agreeableness", "Conscientiousness"])) {
        let tax = tax();
        let item = Trs {
            id: "Z-1".into(),
            text: "I test things".into(),
            domain: domain.to_string(),
            facet: facet.clone(),
            key: Key::Negative,
            provenance: Provenance::Expert,
            source_trs: None,
            active: true,
            generation: 0,
        };
        let known = tax.facet_id(domain, &facet).is_some();
        prop_assert_eq!(TrsSet::new("x", None, vec![item], &tax).is_ok(), known);
    }

    #[test]
    fn self_referentialize_is_idempotent(text in select(idempotence_corpus())) {
        let once = self_referentialize(&text);
        prop_assert_eq!(self_referentialize(&once), once);
    }

    #[test]
    fn availability_counts_add_up(bodies in proptest::collection::vec("[A-Za-z' ]{1,30}[.!?]( [A-Za-z' ]{1,30}[.!?]){0,3}", 1..8)) {
        let comments: Vec<Comment> = bodies
            .iter()
            .enumerate()
            .map(|(i, b)| Comment {
                target_id: format!("t{}", i % 3),
                comment_id: format!("c{i}"),
                body: format!("I {b}"),
                subreddit: None,
                created_at: None,
            })
            .collect();
        let stats = availability_report(&comments, &PronounMatcher::default());
        let total: usize = comments.iter().map(|c| segment(&c.body).len()).sum();
        prop_assert_eq!(stats.sentences, total);
        prop_assert_eq!(stats.per_target.values().map(|t| t.sentences).sum::<usize>(), total);
        prop_assert_eq!(stats.per_target.values().map(|t| t.pronoun_sentences).sum::<usize>(), stats.pronoun_sentences);
        let config = FilterConfig { min_tokens: 1, matcher: PronounMatcher::default() };
        let cands = extract_candidates(&comments, &config).unwrap();
        prop_assert_eq!(cands.len(), stats.pronoun_sentences);
        prop_assert!(cands.iter().all(|c| config.matcher.matches(&c.text)));
    }
}

#[test]
fn jacobi_oracle_solves_its_eigen_equation() {
    let a = vec![vec![4.0, 1.0, 0.5], vec![1.0, 3.0, 0.2], vec![0.5, 0.2, 1.0]];
    let (values, vectors) = oracle::jacobi_eigen(&a);
    for (lambda, v) in values.iter().zip(&vectors) {
        for (row, expect) in a.iter().zip(v) {
            let av: f64 = row.iter().zip(v).map(|(x, y)| x * y).sum();
            assert!((av - lambda * expect).abs() < 1e-12);
        }
    }
    assert!(values.windows(2).all(|w| w[0] >= w[1]));
}
