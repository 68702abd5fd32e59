//! Retrieval metrics and feature-space diagnostics.
//!
//! Distances are Euclidean. Ranking ties are broken by gallery index.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::euclidean;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::DomainId;

pub const DEFAULT_RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub map: f64,
    pub ranks: Vec<usize>,
    /// Rank-k accuracy for each entry of `ranks`.
    pub cmc: Vec<f64>,
    pub average_precision: Vec<f64>,
}

impl RetrievalResult {
    pub fn rank(&self, k: usize) -> Option<f64> {
        self.ranks.iter().position(|&r| r == k).map(|i| self.cmc[i])
    }
}

/// Gallery indices sorted by distance to `query`, ties by index.
pub fn rank_gallery(query: &[f64], gallery: &Tensor) -> Vec<usize> {
    let d: Vec<f64> = (0..gallery.rows()).map(|j| euclidean(query, gallery.row(j))).collect();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order
}

pub fn evaluate_retrieval(
    query_feats: &Tensor,
    query_ids: &[usize],
    gallery_feats: &Tensor,
    gallery_ids: &[usize],
    ranks: &[usize],
) -> Result<RetrievalResult> {
    if query_feats.rank() != 2 || gallery_feats.rank() != 2 || query_feats.cols() != gallery_feats.cols() {
        return Err(Error::dim("evaluate_retrieval features", query_feats.shape(), gallery_feats.shape()));
    }
    if query_ids.len() != query_feats.rows() || gallery_ids.len() != gallery_feats.rows() {
        return Err(Error::dim("evaluate_retrieval ids", &[query_ids.len(), gallery_ids.len()], &[query_feats.rows(), gallery_feats.rows()]));
    }
    if query_ids.is_empty() {
        return Err(Error::Evaluation("no queries".into()));
    }
    if let Some(&k) = ranks.iter().find(|&&k| k == 0) {
        return Err(Error::Evaluation(format!("rank {k} is not a valid cutoff")));
    }
    let mut aps = Vec::with_capacity(query_ids.len());
    let mut hits = vec![0usize; ranks.len()];
    for (qi, &qid) in query_ids.iter().enumerate() {
        let order = rank_gallery(query_feats.row(qi), gallery_feats);
        let relevant = gallery_ids.iter().filter(|&&g| g == qid).count();
        if relevant == 0 {
            return Err(Error::Evaluation(format!("query identity {qid} has no match in the gallery")));
        }
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (pos, &g) in order.iter().enumerate() {
            if gallery_ids[g] == qid {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
                first_hit.get_or_insert(pos);
                if found == relevant {
                    break;
                }
            }
        }
        aps.push(precision_sum / relevant as f64);
        let first = first_hit.expect("relevant > 0");
        for (h, &k) in hits.iter_mut().zip(ranks) {
            if first < k {
                *h += 1;
            }
        }
    }
    let nq = query_ids.len() as f64;
    Ok(RetrievalResult {
        map: aps.iter().sum::<f64>() / nq,
        ranks: ranks.to_vec(),
        cmc: hits.iter().map(|&h| h as f64 / nq).collect(),
        average_precision: aps,
    })
}

fn group_rows(features: &Tensor, labels: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
    if features.rank() != 2 || labels.len() != features.rows() {
        return Err(Error::dim("feature grouping", features.shape(), &[labels.len()]));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    Ok(groups)
}

fn mean_row(features: &Tensor, idx: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; features.cols()];
    for &i in idx {
        for (a, b) in m.iter_mut().zip(features.row(i)) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|a| *a /= idx.len() as f64);
    m
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDistances {
    pub domains: Vec<DomainId>,
    pub means: Vec<Vec<f64>>,
    /// Symmetric, zero diagonal, in `domains` order.
    pub matrix: Vec<Vec<f64>>,
}

impl DomainDistances {
    /// Upper-triangle entries `(a, b, distance)`.
    pub fn pairs(&self) -> Vec<(DomainId, DomainId, f64)> {
        let mut out = Vec::new();
        for i in 0..self.domains.len() {
            for j in i + 1..self.domains.len() {
                out.push((self.domains[i], self.domains[j], self.matrix[i][j]));
            }
        }
        out
    }
}

/// Distances between per-domain mean features, over the domains present.
pub fn domain_distance_matrix(features: &Tensor, domain_ids: &[DomainId]) -> Result<DomainDistances> {
    let mut domains: Vec<DomainId> = domain_ids.to_vec();
    domains.sort_unstable();
    domains.dedup();
    domain_distance_matrix_over(features, domain_ids, &domains)
}

/// As [`domain_distance_matrix`], for an explicit domain list; a listed
/// domain without samples is an error.
pub fn domain_distance_matrix_over(features: &Tensor, domain_ids: &[DomainId], domains: &[DomainId]) -> Result<DomainDistances> {
    let groups = group_rows(features, domain_ids)?;
    let mut means = Vec::with_capacity(domains.len());
    for d in domains {
        let idx = groups.get(d).ok_or_else(|| Error::Evaluation(format!("domain {d} has no samples")))?;
        means.push(mean_row(features, idx));
    }
    let k = domains.len();
    let mut matrix = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let d = euclidean(&means[i], &means[j]);
            matrix[i][j] = d;
            matrix[j][i] = d;
        }
    }
    Ok(DomainDistances {
        domains: domains.to_vec(),
        means,
        matrix,
    })
}

/// Mean pairwise distance between identity mean features.
pub fn interclass_distance(features: &Tensor, identity_labels: &[usize]) -> Result<f64> {
    let groups = group_rows(features, identity_labels)?;
    if groups.len() < 2 {
        return Err(Error::Evaluation(format!("inter-class distance needs at least 2 identities, got {}", groups.len())));
    }
    let means: Vec<Vec<f64>> = groups.values().map(|idx| mean_row(features, idx)).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            total += euclidean(&means[i], &means[j]);
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Mean over identities of the summed squared deviation from the identity
/// mean (no division by the identity's sample count).
pub fn intraclass_variance(features: &Tensor, identity_labels: &[usize]) -> Result<f64> {
    intraclass(features, identity_labels, false)
}

/// Variant of [`intraclass_variance`] that divides each identity's sum by its
/// sample count.
pub fn intraclass_variance_per_sample(features: &Tensor, identity_labels: &[usize]) -> Result<f64> {
    intraclass(features, identity_labels, true)
}

fn intraclass(features: &Tensor, identity_labels: &[usize], per_sample: bool) -> Result<f64> {
    let groups = group_rows(features, identity_labels)?;
    if groups.is_empty() {
        return Err(Error::Evaluation("intra-class variance of an empty set".into()));
    }
    let mut total = 0.0;
    for idx in groups.values() {
        let mu = mean_row(features, idx);
        let mut s: f64 = idx
            .iter()
            .map(|&i| features.row(i).iter().zip(&mu).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
            .sum();
        if per_sample {
            s /= idx.len() as f64;
        }
        total += s;
    }
    Ok(total / groups.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainGapReport {
    pub distances: DomainDistances,
    pub interclass: BTreeMap<DomainId, f64>,
    pub intraclass: BTreeMap<DomainId, f64>,
    pub interclass_combined: f64,
    pub intraclass_combined: f64,
}

pub fn domain_gap_report(features: &Tensor, domain_ids: &[DomainId], identity_labels: &[usize]) -> Result<DomainGapReport> {
    let distances = domain_distance_matrix(features, domain_ids)?;
    let by_domain = group_rows(features, domain_ids)?;
    let mut interclass = BTreeMap::new();
    let mut intraclass = BTreeMap::new();
    for (&d, idx) in &by_domain {
        let sub = features.gather_rows(idx)?;
        let labels: Vec<usize> = idx.iter().map(|&i| identity_labels[i]).collect();
        if labels.iter().collect::<std::collections::BTreeSet<_>>().len() >= 2 {
            interclass.insert(d, interclass_distance(&sub, &labels)?);
        }
        intraclass.insert(d, intraclass_variance(&sub, &labels)?);
    }
    Ok(DomainGapReport {
        distances,
        interclass,
        intraclass,
        interclass_combined: interclass_distance(features, identity_labels)?,
        intraclass_combined: intraclass_variance(features, identity_labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&r.iter().map(|x| x.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn perfect_ranking() {
        let f = rows(&[&[0.0, 0.0], &[5.0, 0.0], &[0.0, 5.0]]);
        let r = evaluate_retrieval(&f, &[0, 1, 2], &f, &[0, 1, 2], &DEFAULT_RANKS).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.cmc, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn single_match_at_second_rank() {
        let q = rows(&[&[0.0]]);
        let g = rows(&[&[1.0], &[2.0], &[3.0]]);
        let r = evaluate_retrieval(&q, &[7], &g, &[1, 7, 2], &[1, 5]).unwrap();
        assert_eq!(r.average_precision, vec![0.5]);
        assert_eq!(r.rank(1), Some(0.0));
        assert_eq!(r.rank(5), Some(1.0));
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let q = rows(&[&[0.0]]);
        let g = rows(&[&[1.0], &[-1.0]]);
        let r = evaluate_retrieval(&q, &[3], &g, &[4, 3], &[1]).unwrap();
        assert_eq!(r.average_precision, vec![0.5]);
    }

    #[test]
    fn missing_identity_is_named() {
        let q = rows(&[&[0.0]]);
        let msg = evaluate_retrieval(&q, &[42], &q, &[1], &[1]).unwrap_err().to_string();
        assert!(msg.contains("42"), "{msg}");
    }

    #[test]
    fn domain_distances() {
        let f = rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let d = domain_distance_matrix(&f, &[0, 0, 1]).unwrap();
        assert!((d.matrix[0][1] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(d.matrix[0][0], 0.0);
        let same = domain_distance_matrix(&rows(&[&[1.0], &[1.0], &[1.0]]), &[0, 1, 2]).unwrap();
        assert!(same.matrix.iter().flatten().all(|&v| v == 0.0));
        assert!(domain_distance_matrix_over(&f, &[0, 0, 1], &[0, 1, 2]).is_err());
    }

    #[test]
    fn interclass_examples() {
        let f = rows(&[&[0.0, 0.0], &[3.0, 0.0]]);
        assert_eq!(interclass_distance(&f, &[0, 1]).unwrap(), 3.0);
        let s = 2.0;
        let h = s * 3f64.sqrt() / 2.0;
        let tri = rows(&[&[0.0, 0.0], &[s, 0.0], &[s / 2.0, h]]);
        assert!((interclass_distance(&tri, &[0, 1, 2]).unwrap() - s).abs() < 1e-12);
        assert!(interclass_distance(&f, &[0, 0]).is_err());
    }

    #[test]
    fn intraclass_examples() {
        let f = rows(&[&[1.0, 1.0], &[1.0, 1.0], &[4.0, 2.0]]);
        assert_eq!(intraclass_variance(&f, &[0, 0, 1]).unwrap(), 0.0);
        let pair = rows(&[&[0.0, 0.0], &[2.0, 0.0]]);
        assert_eq!(intraclass_variance(&pair, &[5, 5]).unwrap(), 2.0);
        assert_eq!(intraclass_variance_per_sample(&pair, &[5, 5]).unwrap(), 1.0);
    }
}
