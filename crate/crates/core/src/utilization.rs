//! Aggregation of detected statements into facet, domain and percentile
//! scores, and the dense feature export for supervised models.
//!
//! Every detected statement carries relevance 1. For each target:
//!
//! * facet score = positively keyed count − negatively keyed count;
//! * domain score = sum of the domain's facet scores;
//! * keyed proportion `p` = positive / (positive + negative) over the domain,
//!   undefined when the domain has no detections.
//!
//! Percentiles rank eligible targets by `p` (ascending, mid-rank ties) and
//! report `100 × rank / N`.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::detection::TisMatch;
use crate::error::{Error, Result};
use crate::pca::Pca;
use crate::taxonomy::{FacetId, Key, TraitTaxonomy};

/// Components kept per feature block.
pub const COMPONENTS_PER_BLOCK: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacetScore {
    pub domain: String,
    pub facet: String,
    pub positive: u64,
    pub negative: u64,
    pub score: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain: String,
    pub positive: u64,
    pub negative: u64,
    pub tis_total: u64,
    pub score: i64,
    pub keyed_proportion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSheet {
    pub target_id: String,
    /// In taxonomy order.
    pub facets: Vec<FacetScore>,
    /// In taxonomy order.
    pub domains: Vec<DomainScore>,
}

impl ScoreSheet {
    pub fn domain(&self, name: &str) -> Option<&DomainScore> {
        self.domains.iter().find(|d| d.domain == name)
    }

    pub fn facet(&self, name: &str) -> Option<&FacetScore> {
        self.facets.iter().find(|f| f.facet == name)
    }

    /// True when the domain has no detections and must not be scored.
    pub fn abstains(&self, domain: &str) -> bool {
        self.domain(domain).is_none_or(|d| d.tis_total == 0)
    }
}

/// Aggregates matches into one sheet per target, sorted by target id.
pub fn score(matches: &[TisMatch], taxonomy: &TraitTaxonomy) -> Result<Vec<ScoreSheet>> {
    let mut counts: BTreeMap<&str, Vec<(u64, u64)>> = BTreeMap::new();
    for m in matches {
        let facet = taxonomy.facet_id(&m.domain, &m.facet).ok_or_else(|| {
            Error::InvalidArgument(format!("match {} has unknown facet {}/{}", m.sentence_id, m.domain, m.facet))
        })?;
        let row = counts
            .entry(m.target_id.as_str())
            .or_insert_with(|| vec![(0, 0); taxonomy.facet_count()]);
        match m.key {
            Key::Positive => row[facet.0].0 += 1,
            Key::Negative => row[facet.0].1 += 1,
        }
    }
    Ok(counts
        .into_iter()
        .map(|(target, row)| sheet_from_counts(target, &row, taxonomy))
        .collect())
}

fn sheet_from_counts(target_id: &str, counts: &[(u64, u64)], taxonomy: &TraitTaxonomy) -> ScoreSheet {
    let mut facets = Vec::with_capacity(counts.len());
    for (i, &(pos, neg)) in counts.iter().enumerate() {
        let (di, name) = taxonomy.facet(FacetId(i)).expect("facet id in range");
        facets.push(FacetScore {
            domain: taxonomy.domains()[di].name.clone(),
            facet: name.to_string(),
            positive: pos,
            negative: neg,
            score: pos as i64 - neg as i64,
        });
    }
    let domains = taxonomy
        .domains()
        .iter()
        .enumerate()
        .map(|(di, d)| {
            let range = taxonomy.domain_facets(di);
            let positive: u64 = facets[range.clone()].iter().map(|f| f.positive).sum();
            let negative: u64 = facets[range.clone()].iter().map(|f| f.negative).sum();
            let tis_total = positive + negative;
            DomainScore {
                domain: d.name.clone(),
                positive,
                negative,
                tis_total,
                score: facets[range].iter().map(|f| f.score).sum(),
                keyed_proportion: (tis_total > 0).then(|| positive as f64 / tis_total as f64),
            }
        })
        .collect();
    ScoreSheet {
        target_id: target_id.to_string(),
        facets,
        domains,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub target_id: String,
    pub proportion: f64,
    pub rank: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileTable {
    pub domain: String,
    pub min_tis: u64,
    /// Number of ranked targets.
    pub n: usize,
    /// Ranked targets, sorted by target id.
    pub rows: Vec<PercentileRow>,
    /// Eligible targets without detections in this domain.
    pub abstained: Vec<String>,
    /// Targets with no domain above `min_tis` detections.
    pub ineligible: Vec<String>,
}

impl PercentileTable {
    pub fn percent(&self, target_id: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.target_id == target_id).map(|r| r.percent)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["target_id", "domain", "proportion", "rank", "percent"])?;
        for r in &self.rows {
            w.write_record([
                r.target_id.clone(),
                self.domain.clone(),
                r.proportion.to_string(),
                r.rank.to_string(),
                r.percent.to_string(),
            ])?;
        }
        for t in &self.abstained {
            w.write_record([t.as_str(), &self.domain, "", "", ""])?;
        }
        finish_csv(w)
    }
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Ranks targets on one domain.
///
/// A target is eligible when at least one of its domains has more than
/// `min_tis` detections; eligible targets without detections in `domain`
/// abstain. Ranks are 1-based over the `N` ranked targets in ascending order
/// of `p`, with tied targets sharing the mean of their positions.
pub fn percentiles(
    sheets: &[ScoreSheet],
    taxonomy: &TraitTaxonomy,
    domain: &str,
    min_tis: u64,
) -> Result<PercentileTable> {
    let di = taxonomy
        .domain_index(domain)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown domain {domain:?}")))?;
    let domain_name = taxonomy.domains()[di].name.clone();
    let mut ranked: Vec<(&str, u64, u64)> = Vec::new();
    let mut abstained = Vec::new();
    let mut ineligible = Vec::new();
    for sheet in sheets {
        if !sheet.domains.iter().any(|d| d.tis_total > min_tis) {
            ineligible.push(sheet.target_id.clone());
            continue;
        }
        match sheet.domain(&domain_name) {
            Some(d) if d.tis_total > 0 => ranked.push((&sheet.target_id, d.positive, d.tis_total)),
            _ => abstained.push(sheet.target_id.clone()),
        }
    }
    // exact rational comparison so equal proportions always tie
    let cmp = |a: &(&str, u64, u64), b: &(&str, u64, u64)| -> Ordering {
        (u128::from(a.1) * u128::from(b.2)).cmp(&(u128::from(b.1) * u128::from(a.2)))
    };
    ranked.sort_by(|a, b| cmp(a, b).then_with(|| a.0.cmp(b.0)));
    let n = ranked.len();
    let mut rows = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && cmp(&ranked[j + 1], &ranked[i]) == Ordering::Equal {
            j += 1;
        }
        // positions i+1 ..= j+1 share their mean
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &(target, pos, total) in &ranked[i..=j] {
            rows.push(PercentileRow {
                target_id: target.to_string(),
                proportion: pos as f64 / total as f64,
                rank,
                percent: 100.0 * rank / n as f64,
            });
        }
        i = j + 1;
    }
    rows.sort_by(|a, b| a.target_id.cmp(&b.target_id));
    abstained.sort();
    ineligible.sort();
    Ok(PercentileTable {
        domain: domain_name,
        min_tis,
        n,
        rows,
        abstained,
        ineligible,
    })
}

/// Dense per-target features: projections onto the leading principal
/// components of the keyed-count matrix and of its L1 row-normalized twin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub target_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Non-degenerate components in the raw block (the rest are zero-filled).
    pub raw_components: usize,
    /// Non-degenerate components in the normalized block.
    pub normalized_components: usize,
}

impl FeatureMatrix {
    pub fn n_columns(&self) -> usize {
        2 * COMPONENTS_PER_BLOCK
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["target_id".to_string()];
        header.extend((1..=self.n_columns()).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for (t, row) in self.target_ids.iter().zip(&self.rows) {
            let mut rec = vec![t.clone()];
            rec.extend(row.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }
}

/// Column labels of [`keyed_count_matrix`]: `(facet, ±)` for every facet in
/// taxonomy order, then `(domain, ±)` for every domain.
pub fn keyed_count_columns(taxonomy: &TraitTaxonomy) -> Vec<String> {
    let mut cols = Vec::new();
    for i in 0..taxonomy.facet_count() {
        let (_, f) = taxonomy.facet(FacetId(i)).expect("in range");
        cols.push(format!("{f}+"));
        cols.push(format!("{f}-"));
    }
    for d in taxonomy.domains() {
        cols.push(format!("{}+", d.name));
        cols.push(format!("{}-", d.name));
    }
    cols
}

pub fn keyed_count_matrix(sheets: &[ScoreSheet]) -> DMatrix<f64> {
    let cols = sheets.first().map_or(0, |s| 2 * (s.facets.len() + s.domains.len()));
    DMatrix::from_fn(sheets.len(), cols, |r, c| {
        let s = &sheets[r];
        let nf = 2 * s.facets.len();
        let v = if c < nf {
            let f = &s.facets[c / 2];
            if c % 2 == 0 {
                f.positive
            } else {
                f.negative
            }
        } else {
            let d = &s.domains[(c - nf) / 2];
            if (c - nf) % 2 == 0 {
                d.positive
            } else {
                d.negative
            }
        };
        v as f64
    })
}

/// Divides each row by its L1 norm; all-zero rows stay zero.
pub fn l1_normalize_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut row in out.row_iter_mut() {
        let s: f64 = row.iter().map(|x| x.abs()).sum();
        if s > 0.0 {
            row /= s;
        }
    }
    out
}

fn project_block(data: &DMatrix<f64>, out: &mut [Vec<f64>], offset: usize) -> usize {
    let pca = Pca::fit(data, COMPONENTS_PER_BLOCK);
    let scores = pca.transform(data);
    for (r, row) in out.iter_mut().enumerate() {
        for c in 0..pca.n_components() {
            row[offset + c] = scores[(r, c)];
        }
    }
    pca.n_components()
}

/// Builds the 20-column feature block. Blocks with fewer than ten
/// non-degenerate components are zero-filled.
pub fn export_features(sheets: &[ScoreSheet]) -> Result<FeatureMatrix> {
    if sheets.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "feature export needs at least 2 targets, got {}",
            sheets.len()
        )));
    }
    let raw = keyed_count_matrix(sheets);
    let normalized = l1_normalize_rows(&raw);
    let mut rows = vec![vec![0.0; 2 * COMPONENTS_PER_BLOCK]; sheets.len()];
    let raw_components = project_block(&raw, &mut rows, 0);
    let normalized_components = project_block(&normalized, &mut rows, COMPONENTS_PER_BLOCK);
    if raw_components < COMPONENTS_PER_BLOCK || normalized_components < COMPONENTS_PER_BLOCK {
        log::warn!(
            "feature export: {raw_components} raw and {normalized_components} normalized components, remaining columns zero-filled"
        );
    }
    Ok(FeatureMatrix {
        target_ids: sheets.iter().map(|s| s.target_id.clone()).collect(),
        rows,
        raw_components,
        normalized_components,
    })
}

/// Up to `k_per_facet` statements per facet of `domain` for one target, most
/// similar first within each facet, facets in taxonomy order.
pub fn assessment_bundle(
    target_id: &str,
    domain: &str,
    matches: &[TisMatch],
    taxonomy: &TraitTaxonomy,
    k_per_facet: usize,
) -> Result<Vec<String>> {
    if k_per_facet == 0 {
        return Err(Error::InvalidArgument("k_per_facet must be >= 1".into()));
    }
    let di = taxonomy
        .domain_index(domain)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown domain {domain:?}")))?;
    let mut out = Vec::new();
    for fid in taxonomy.domain_facets(di) {
        let mut hits: Vec<&TisMatch> = matches
            .iter()
            .filter(|m| m.target_id == target_id && taxonomy.facet_id(&m.domain, &m.facet) == Some(FacetId(fid)))
            .collect();
        hits.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.sentence_id.cmp(&b.sentence_id)));
        out.extend(hits.into_iter().take(k_per_facet).map(|m| m.text.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(target: &str, facet: &str, key: Key) -> TisMatch {
        let tax = TraitTaxonomy::big_five();
        let domain = tax
            .domains()
            .iter()
            .find(|d| d.facets.iter().any(|f| f == facet))
            .unwrap()
            .name
            .clone();
        TisMatch {
            target_id: target.into(),
            sentence_id: format!("{target}-{facet}-{key}"),
            text: format!("I {facet}"),
            trs_id: "x".into(),
            similarity: 0.7,
            domain,
            facet: facet.into(),
            key,
            pass_index: 0,
            backend_id: "lex".into(),
            runner_up: None,
        }
    }

    fn sheet_with(target: &str, domain_counts: &[(&str, u64, u64)]) -> ScoreSheet {
        let tax = TraitTaxonomy::big_five();
        let mut counts = vec![(0, 0); tax.facet_count()];
        for (d, p, n) in domain_counts {
            let di = tax.domain_index(d).unwrap();
            counts[tax.domain_facets(di).start] = (*p, *n);
        }
        sheet_from_counts(target, &counts, &tax)
    }

    #[test]
    fn single_positive_match() {
        let tax = TraitTaxonomy::big_five();
        let s = score(&[m("t", "Gregariousness", Key::Positive)], &tax).unwrap();
        assert_eq!(s[0].facet("Gregariousness").unwrap().score, 1);
        let e = s[0].domain("Extraversion").unwrap();
        assert_eq!((e.score, e.keyed_proportion), (1, Some(1.0)));
        assert!(s[0].abstains("Openness"));
        assert_eq!(s[0].domain("Openness").unwrap().keyed_proportion, None);
    }

    #[test]
    fn mixed_keys() {
        let tax = TraitTaxonomy::big_five();
        let ms: Vec<_> = [Key::Positive, Key::Positive, Key::Positive, Key::Negative]
            .into_iter()
            .enumerate()
            .map(|(i, k)| {
                let mut x = m("t", "Trust", k);
                x.sentence_id = i.to_string();
                x
            })
            .collect();
        let s = score(&ms, &tax).unwrap();
        assert_eq!(s[0].facet("Trust").unwrap().score, 2);
        assert_eq!(s[0].domain("Agreeableness").unwrap().keyed_proportion, Some(0.75));
    }

    #[test]
    fn percentile_examples() {
        let tax = TraitTaxonomy::big_five();
        let sheets = vec![
            sheet_with("a", &[("E", 1, 4)]),
            sheet_with("b", &[("E", 1, 1)]),
            sheet_with("c", &[("E", 9, 1)]),
        ];
        let t = percentiles(&sheets, &tax, "E", 0).unwrap();
        assert_eq!(t.n, 3);
        let p: Vec<f64> = t.rows.iter().map(|r| r.percent).collect();
        assert!((p[0] - 100.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(p[2], 100.0);

        let equal: Vec<_> = ["a", "b", "c", "d"].iter().map(|t| sheet_with(t, &[("E", 1, 1)])).collect();
        let t = percentiles(&equal, &tax, "E", 0).unwrap();
        assert!(t.rows.iter().all(|r| r.percent == 62.5));
    }

    #[test]
    fn eligibility_is_strict() {
        let tax = TraitTaxonomy::big_five();
        let sheets = vec![
            sheet_with("ten", &[("E", 5, 5)]),
            sheet_with("eleven", &[("E", 6, 5)]),
            sheet_with("other", &[("O", 11, 0)]),
        ];
        let t = percentiles(&sheets, &tax, "E", 10).unwrap();
        assert_eq!(t.ineligible, ["ten"]);
        assert_eq!(t.abstained, ["other"]);
        assert_eq!(t.n, 1);
        assert!(percentiles(&[], &tax, "E", 10).unwrap().rows.is_empty());
        assert!(percentiles(&sheets, &tax, "Q", 10).is_err());
    }

    #[test]
    fn features_need_two_targets() {
        assert!(export_features(&[sheet_with("a", &[("E", 1, 1)])]).is_err());
    }

    #[test]
    fn identical_rows_give_zero_features() {
        let sheets: Vec<_> = (0..5).map(|i| sheet_with(&i.to_string(), &[("E", 3, 1), ("N", 2, 2)])).collect();
        let f = export_features(&sheets).unwrap();
        assert_eq!(f.rows[0].len(), 20);
        assert!(f.rows.iter().flatten().all(|x| *x == 0.0));
        assert_eq!((f.raw_components, f.normalized_components), (0, 0));
        let csv = f.to_csv().unwrap();
        assert!(csv.starts_with("target_id,f1,f2,"));
        assert!(csv.lines().next().unwrap().ends_with(",f20"));
    }

    #[test]
    fn keyed_columns_layout() {
        let tax = TraitTaxonomy::big_five();
        let cols = keyed_count_columns(&tax);
        assert_eq!(cols.len(), 70);
        let s = score(&[m("t", "Anxiety", Key::Negative)], &tax).unwrap();
        let mat = keyed_count_matrix(&s);
        assert_eq!(mat.ncols(), 70);
        assert_eq!(mat[(0, 1)], 1.0);
        assert_eq!(mat[(0, 61)], 1.0, "{}", cols[61]);
    }

    #[test]
    fn bundles() {
        let tax = TraitTaxonomy::big_five();
        let mut ms = Vec::new();
        for (i, sim) in [0.9, 0.7, 0.8, 0.65].iter().enumerate() {
            let mut x = m("t", "Gregariousness", Key::Positive);
            x.sentence_id = i.to_string();
            x.text = format!("s{i}");
            x.similarity = *sim;
            ms.push(x);
        }
        let mut f = m("t", "Friendliness", Key::Negative);
        f.text = "friendly".into();
        ms.push(f);
        ms.push(m("other", "Assertiveness", Key::Positive));
        let b = assessment_bundle("t", "E", &ms, &tax, 3).unwrap();
        assert_eq!(b, ["friendly", "s0", "s2", "s1"]);
        assert!(assessment_bundle("t", "O", &ms, &tax, 3).unwrap().is_empty());
        assert!(assessment_bundle("t", "E", &ms, &tax, 0).is_err());
    }
}
