//! Agreement and quality reports shared by the CLI and the HTTP service.

use serde::{Deserialize, Serialize};
use simpa_core::annotation::{
    agreement_alpha, latest_bundle_annotations, pairwise_agreement, parse_bundle_reply, parse_trs_reply, trs_quality,
    AlphaMetric, LabelMatrix, PairwiseReport, TrsQualityReport,
};
use simpa_core::project::Project;
use simpa_core::{Error, Result};

/// Which annotations a metric runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Match categories from the project store.
    Match,
    /// Bundle grades from the project store.
    Bundle,
}

impl Source {
    /// Match categories are unordered; bundle grades are ordered.
    pub fn default_metric(self) -> AlphaMetric {
        match self {
            Source::Match => AlphaMetric::Nominal,
            Source::Bundle => AlphaMetric::Ordinal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaReport {
    pub metric: AlphaMetric,
    pub items: usize,
    pub annotators: usize,
    /// `None` when no item has two or more annotations.
    pub alpha: Option<f64>,
}

/// Bundle grades as an ordinal matrix; "cannot decide" counts as missing.
pub fn bundle_matrix(project: &Project) -> Result<LabelMatrix> {
    let current = latest_bundle_annotations(&project.bundle_annotations()?);
    Ok(LabelMatrix::from_triples(current.into_iter().filter_map(|a| {
        a.label
            .ordinal()
            .map(|v| (format!("{}/{}", a.target_id, a.domain), a.annotator_id, v))
    })))
}

pub fn project_matrix(project: &Project, source: Source) -> Result<LabelMatrix> {
    match source {
        Source::Match => Ok(project.annotation_index()?.category_matrix()),
        Source::Bundle => bundle_matrix(project),
    }
}

fn parse_cell(cell: &str) -> Option<u32> {
    let c = cell.trim();
    if c.is_empty() {
        return None;
    }
    if let Ok(v) = c.parse::<u32>() {
        return Some(v);
    }
    if let Some(l) = parse_trs_reply(c) {
        return Some(l.ordinal());
    }
    parse_bundle_reply(c).and_then(|l| l.ordinal())
}

/// Reads an items × annotators CSV: header `item,<annotator>...`, one row
/// per item. Cells hold integers, judge answers or bundle grades; empty
/// cells are missing.
pub fn parse_matrix_csv(text: &str) -> Result<LabelMatrix> {
    let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::InvalidArgument("matrix needs an item column and at least one annotator".into()));
    }
    let annotators: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut items = Vec::new();
    let mut cells = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        items.push(rec.get(0).unwrap_or_default().to_string());
        let mut row = Vec::with_capacity(annotators.len());
        for raw in rec.iter().skip(1) {
            let v = parse_cell(raw);
            if v.is_none() && !raw.trim().is_empty() {
                return Err(Error::Parse {
                    path: "matrix".into(),
                    line: i + 2,
                    message: format!("unrecognized label {raw:?}"),
                });
            }
            row.push(v);
        }
        cells.push(row);
    }
    Ok(LabelMatrix {
        items,
        annotators,
        cells,
    })
}

pub fn alpha_report(matrix: &LabelMatrix, metric: AlphaMetric) -> AlphaReport {
    AlphaReport {
        metric,
        items: matrix.items.len(),
        annotators: matrix.annotators.len(),
        alpha: agreement_alpha(&matrix.cells, metric),
    }
}

pub fn pairwise_report(matrix: &LabelMatrix) -> PairwiseReport {
    pairwise_agreement(matrix)
}

pub fn quality_report(project: &Project, run_id: &str, k: usize, distribution_k: usize) -> Result<TrsQualityReport> {
    let run = project.run(run_id)?;
    let set = project.load_set(&run.trs_set)?;
    let best = project.run_best_matches(run_id)?;
    trs_quality(&best, &set, run_id, &project.annotation_index()?, k, distribution_k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_csv() {
        let m = parse_matrix_csv("item,a,b\nx,1,another facet of the same domain\ny,,Above average\n").unwrap();
        assert_eq!(m.annotators, ["a", "b"]);
        assert_eq!(m.cells, vec![vec![Some(1), Some(1)], vec![None, Some(2)]]);
        assert!(parse_matrix_csv("item,a\nx,banana\n").is_err());
        assert!(parse_matrix_csv("item\nx\n").is_err());
    }
}
