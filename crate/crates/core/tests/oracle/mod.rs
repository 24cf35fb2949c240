//! Independent reference implementations used to check the library. Each
//! one takes the slow, obvious route: full recounts, pair enumeration and
//! Jacobi rotations.

#![allow(dead_code)]

use std::collections::BTreeMap;

use simpa_core::detection::TisMatch;
use simpa_core::taxonomy::{Key, TraitTaxonomy};

/// Per target: `facet name → (positive, negative)` and
/// `domain name → (positive, negative)`, by scanning every match once per
/// cell.
pub struct Recount {
    pub facets: BTreeMap<String, BTreeMap<String, (u64, u64)>>,
    pub domains: BTreeMap<String, BTreeMap<String, (u64, u64)>>,
}

pub fn recount(matches: &[TisMatch], tax: &TraitTaxonomy) -> Recount {
    let mut targets: Vec<&str> = matches.iter().map(|m| m.target_id.as_str()).collect();
    targets.sort_unstable();
    targets.dedup();
    let mut facets = BTreeMap::new();
    let mut domains = BTreeMap::new();
    for t in targets {
        let mut f = BTreeMap::new();
        let mut d = BTreeMap::new();
        for dom in tax.domains() {
            let mut dp = 0;
            let mut dn = 0;
            for facet in &dom.facets {
                let count = |key: Key| {
                    matches
                        .iter()
                        .filter(|m| m.target_id == t && m.domain == dom.name && m.facet == *facet && m.key == key)
                        .count() as u64
                };
                let (p, n) = (count(Key::Positive), count(Key::Negative));
                dp += p;
                dn += n;
                f.insert(facet.clone(), (p, n));
            }
            d.insert(dom.name.clone(), (dp, dn));
        }
        facets.insert(t.to_string(), f);
        domains.insert(t.to_string(), d);
    }
    Recount { facets, domains }
}

/// Percent per ranked target: rank = #smaller + (#equal + 1) / 2 over the
/// eligible targets with a defined proportion.
pub fn percent_oracle(rc: &Recount, domain: &str, min_tis: u64) -> (BTreeMap<String, f64>, Vec<String>) {
    let eligible: Vec<&String> = rc
        .domains
        .iter()
        .filter(|(_, ds)| ds.values().any(|(p, n)| p + n > min_tis))
        .map(|(t, _)| t)
        .collect();
    let mut props = Vec::new();
    let mut abstained = Vec::new();
    for t in eligible {
        let (p, n) = rc.domains[t][domain];
        if p + n == 0 {
            abstained.push(t.clone());
        } else {
            props.push((t.clone(), p as f64 / (p + n) as f64));
        }
    }
    let n = props.len() as f64;
    let mut out = BTreeMap::new();
    for (t, x) in &props {
        let smaller = props.iter().filter(|(_, y)| y < x).count() as f64;
        let equal = props.iter().filter(|(_, y)| y == x).count() as f64;
        let rank = smaller + (equal + 1.0) / 2.0;
        out.insert(t.clone(), 100.0 * rank / n);
    }
    (out, abstained)
}

/// Ordinal distance between labels `c` and `k` from the marginal counts.
fn ordinal_delta(n_g: &BTreeMap<u32, f64>, c: u32, k: u32) -> f64 {
    if c == k {
        return 0.0;
    }
    let (lo, hi) = (c.min(k), c.max(k));
    let between: f64 = n_g.range(lo..=hi).map(|(_, v)| v).sum();
    let d = between - (n_g[&c] + n_g[&k]) / 2.0;
    d * d
}

/// Krippendorff's alpha by enumerating ordered value pairs within and
/// across units. `cells[item][annotator]`.
pub fn alpha_by_pairs(cells: &[Vec<Option<u32>>], ordinal: bool) -> Option<f64> {
    let units: Vec<Vec<u32>> = cells
        .iter()
        .map(|r| r.iter().flatten().copied().collect::<Vec<_>>())
        .filter(|u: &Vec<u32>| u.len() >= 2)
        .collect();
    if units.is_empty() {
        return None;
    }
    let mut n_g: BTreeMap<u32, f64> = BTreeMap::new();
    for u in &units {
        for &v in u {
            *n_g.entry(v).or_default() += 1.0;
        }
    }
    let delta = |a: u32, b: u32| {
        if ordinal {
            ordinal_delta(&n_g, a, b)
        } else {
            f64::from(u8::from(a != b))
        }
    };
    let n: f64 = units.iter().map(|u| u.len() as f64).sum();
    let mut d_o = 0.0;
    for u in &units {
        let m = u.len() as f64;
        let mut s = 0.0;
        for i in 0..u.len() {
            for j in 0..u.len() {
                if i != j {
                    s += delta(u[i], u[j]);
                }
            }
        }
        d_o += s / (m - 1.0);
    }
    d_o /= n;
    let all: Vec<u32> = units.iter().flatten().copied().collect();
    let mut d_e = 0.0;
    for i in 0..all.len() {
        for j in 0..all.len() {
            if i != j {
                d_e += delta(all[i], all[j]);
            }
        }
    }
    d_e /= n * (n - 1.0);
    if d_o == 0.0 {
        return Some(1.0);
    }
    Some(1.0 - d_o / d_e)
}

/// Share of co-annotated items on which annotators `a` and `b` agree.
pub fn pair_agreement(cells: &[Vec<Option<u32>>], a: usize, b: usize) -> Option<f64> {
    let both: Vec<(u32, u32)> = cells.iter().filter_map(|r| Some((r[a]?, r[b]?))).collect();
    if both.is_empty() {
        return None;
    }
    Some(both.iter().filter(|(x, y)| x == y).count() as f64 / both.len() as f64)
}

/// Eigenpairs of a symmetric matrix (row-major `n × n`) by cyclic Jacobi
/// rotations, sorted by decreasing eigenvalue. Eigenvectors are returned as
/// rows.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Projections of `data` (rows are samples) onto the leading `k`
/// eigenvectors of its sample covariance.
pub fn pca_projections(data: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = data.len();
    let d = data[0].len();
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered: Vec<Vec<f64>> = data.iter().map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| centered.iter().map(|r| r[i] * r[j]).sum::<f64>() / (n as f64 - 1.0))
                .collect()
        })
        .collect();
    let (values, vectors) = jacobi_eigen(&cov);
    let proj = centered
        .iter()
        .map(|r| (0..k).map(|c| r.iter().zip(&vectors[c]).map(|(x, w)| x * w).sum()).collect())
        .collect();
    (values[..k].to_vec(), proj)
}
