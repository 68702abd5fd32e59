//! Slow, loop-based reimplementations used as test oracles.
//!
//! Nothing here shares code with the production paths beyond plain data
//! access, so agreement between the two is meaningful.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

use std::collections::BTreeMap;

use crate::clustering::NOISE;
use crate::numerics::Tensor;
use crate::DomainId;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        s += d * d;
    }
    s.sqrt()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// DBSCAN from the density-reachability definition: core points within
/// `eps` of each other are merged with union-find, clusters are numbered by
/// their smallest core index, and a border point takes the smallest cluster
/// number among its core neighbors.
pub fn dbscan(points: &Tensor, eps: f64, min_pts: usize) -> Vec<i64> {
    let n = points.rows();
    let mut core = vec![false; n];
    for i in 0..n {
        let mut count = 0;
        for j in 0..n {
            if dist(points.row(i), points.row(j)) <= eps {
                count += 1;
            }
        }
        core[i] = count >= min_pts;
    }
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && dist(points.row(i), points.row(j)) <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut number: BTreeMap<usize, i64> = BTreeMap::new();
    let mut labels = vec![NOISE; n];
    for i in 0..n {
        if core[i] {
            let root = find(&mut parent, i);
            let next = number.len() as i64;
            labels[i] = *number.entry(root).or_insert(next);
        }
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        for j in 0..n {
            if core[j] && dist(points.row(i), points.row(j)) <= eps && (labels[i] == NOISE || labels[j] < labels[i]) {
                labels[i] = labels[j];
            }
        }
    }
    labels
}

/// True when two labelings induce the same clusters and the same noise set.
pub fn same_partition(a: &[i64], b: &[i64]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut fwd: BTreeMap<i64, i64> = BTreeMap::new();
    let mut back: BTreeMap<i64, i64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if (x == NOISE) != (y == NOISE) {
            return false;
        }
        if x == NOISE {
            continue;
        }
        if *fwd.entry(x).or_insert(y) != y || *back.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

/// mAP and CMC by explicit rank counting: the rank of gallery item `g` is
/// one plus the number of items strictly closer, or equally close with a
/// smaller index.
pub fn retrieval(query: &Tensor, query_ids: &[usize], gallery: &Tensor, gallery_ids: &[usize], ranks: &[usize]) -> (f64, Vec<f64>) {
    let m = gallery.rows();
    let mut ap_total = 0.0;
    let mut hits = vec![0usize; ranks.len()];
    for q in 0..query.rows() {
        let d: Vec<f64> = (0..m).map(|g| dist(query.row(q), gallery.row(g))).collect();
        let rank_of = |g: usize| 1 + (0..m).filter(|&h| d[h] < d[g] || (d[h] == d[g] && h < g)).count();
        let relevant: Vec<usize> = (0..m).filter(|&g| gallery_ids[g] == query_ids[q]).collect();
        let mut ap = 0.0;
        for &g in &relevant {
            let r = rank_of(g);
            let better = relevant.iter().filter(|&&h| rank_of(h) <= r).count();
            ap += better as f64 / r as f64;
        }
        ap_total += ap / relevant.len() as f64;
        let best = relevant.iter().map(|&g| rank_of(g)).min().unwrap_or(usize::MAX);
        for (h, &k) in hits.iter_mut().zip(ranks) {
            if best <= k {
                *h += 1;
            }
        }
    }
    let nq = query.rows() as f64;
    (ap_total / nq, hits.iter().map(|&h| h as f64 / nq).collect())
}

fn class_means(features: &Tensor, labels: &[usize]) -> Vec<Vec<f64>> {
    let classes: Vec<usize> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    classes
        .iter()
        .map(|&k| {
            let mut sum = vec![0.0; features.cols()];
            let mut count = 0.0;
            for i in 0..features.rows() {
                if labels[i] == k {
                    for c in 0..sum.len() {
                        sum[c] += features.row(i)[c];
                    }
                    count += 1.0;
                }
            }
            sum.iter().map(|s| s / count).collect()
        })
        .collect()
}

/// Average distance over all unordered pairs of identity means.
pub fn interclass(features: &Tensor, labels: &[usize]) -> f64 {
    let means = class_means(features, labels);
    let mut total = 0.0;
    let mut pairs = 0.0;
    for i in 0..means.len() {
        for j in 0..means.len() {
            if i < j {
                total += dist(&means[i], &means[j]);
                pairs += 1.0;
            }
        }
    }
    total / pairs
}

/// Average over identities of the summed squared distance to the identity
/// mean.
pub fn intraclass(features: &Tensor, labels: &[usize]) -> f64 {
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let means = class_means(features, labels);
    let mut total = 0.0;
    for (ci, &k) in classes.iter().enumerate() {
        for i in 0..features.rows() {
            if labels[i] == k {
                let d = dist(features.row(i), &means[ci]);
                total += d * d;
            }
        }
    }
    total / classes.len() as f64
}

/// Per-domain normalization parameters for [`rdsbn_train`].
pub struct BranchParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    /// `M × 2` rows of `(r_μ, r_σ)`; `None` disables rectification.
    pub rectifier: Option<Vec<[f64; 2]>>,
}

/// Train-mode domain-specific normalization of `x: N × C × L` with batch
/// statistics, one scalar at a time.
pub fn rdsbn_train(x: &Tensor, domain_ids: &[DomainId], branches: &BTreeMap<DomainId, BranchParams>, eps: f64) -> Tensor {
    let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let at = |i: usize, ch: usize, t: usize| x.data()[(i * c + ch) * l + t];
    let mut out = Tensor::zeros(&[n, c, l]);
    for (&d, p) in branches {
        let members: Vec<usize> = (0..n).filter(|&i| domain_ids[i] == d).collect();
        if members.is_empty() {
            continue;
        }
        let count = (members.len() * l) as f64;
        for ch in 0..c {
            let mut mean = 0.0;
            for &i in &members {
                for t in 0..l {
                    mean += at(i, ch, t);
                }
            }
            mean /= count;
            let mut var = 0.0;
            for &i in &members {
                for t in 0..l {
                    var += (at(i, ch, t) - mean).powi(2);
                }
            }
            var /= count;
            for &i in &members {
                let weight = match &p.rectifier {
                    None => 1.0,
                    Some(rows) => {
                        let mu_i = (0..l).map(|t| at(i, ch, t)).sum::<f64>() / l as f64;
                        let var_i = (0..l).map(|t| (at(i, ch, t) - mu_i).powi(2)).sum::<f64>() / l as f64;
                        let sigma_i = (var_i + eps).sqrt();
                        let z: f64 = rows.iter().map(|r| r[0] * mu_i + r[1] * sigma_i).sum();
                        1.0 / (1.0 + (-z).exp())
                    }
                };
                for t in 0..l {
                    let xhat = (at(i, ch, t) - mean) / (var + eps).sqrt();
                    out.data_mut()[(i * c + ch) * l + t] = (p.gamma[ch] * xhat + p.beta[ch]) * weight;
                }
            }
        }
    }
    out
}

/// Agent as the score-weighted mean of `rows`, scores `x·w + b`.
pub fn agent(rows: &[Vec<f64>], w: &[f64], b: f64) -> Vec<f64> {
    let scores: Vec<f64> = rows.iter().map(|r| r.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() + b).collect();
    let total: f64 = scores.iter().sum();
    let mut a = vec![0.0; w.len()];
    for (r, s) in rows.iter().zip(&scores) {
        for k in 0..a.len() {
            a[k] += s / total * r[k];
        }
    }
    a
}

fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

/// Dense two-layer fusion over instances and agents.
///
/// `agents` holds one vector per domain in ascending domain order, covering
/// every domain that appears in `domain_ids` and possibly more. When
/// `agent_degrees` is given, it replaces the second-layer agent degrees.
pub fn mdif(
    h0: &Tensor,
    domain_ids: &[DomainId],
    domains: &[DomainId],
    agents: &[Vec<f64>],
    w1: &Tensor,
    w2: &Tensor,
    slope: f64,
    agent_degrees: Option<&[f64]>,
) -> Tensor {
    let c = h0.cols();
    // nodes: instances grouped by domain, then agents
    let mut order = Vec::new();
    for &d in domains {
        for (i, &di) in domain_ids.iter().enumerate() {
            if di == d {
                order.push(i);
            }
        }
    }
    let inst = order.len();
    let n = inst + domains.len();
    let mut h: Vec<Vec<f64>> = order.iter().map(|&i| h0.row(i).to_vec()).collect();
    h.extend(agents.iter().cloned());
    let node_domain: Vec<DomainId> = order.iter().map(|&i| domain_ids[i]).collect();

    let layer = |h: &[Vec<f64>], w: &Tensor, second: bool| -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = 1.0;
        }
        for p in 0..domains.len() {
            for q in 0..domains.len() {
                a[inst + p][inst + q] = 1.0;
            }
        }
        if second {
            for i in 0..inst {
                let p = domains.iter().position(|&d| d == node_domain[i]).unwrap();
                a[i][inst + p] = 1.0;
                a[inst + p][i] = 1.0;
            }
        }
        let mut deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        if let (true, Some(ad)) = (second, agent_degrees) {
            deg[inst..].copy_from_slice(ad);
        }
        let mut out = vec![vec![0.0; c]; n];
        for i in 0..n {
            let mut mixed = vec![0.0; c];
            for j in 0..n {
                if a[i][j] != 0.0 {
                    let coef = a[i][j] / (deg[i] * deg[j]).sqrt();
                    for k in 0..c {
                        mixed[k] += coef * h[j][k];
                    }
                }
            }
            for k in 0..c {
                let mut z = 0.0;
                for m in 0..c {
                    z += mixed[m] * w.data()[m * c + k];
                }
                out[i][k] = leaky(z, slope);
            }
        }
        out
    };
    let h1 = layer(&h, w1, false);
    let h2 = layer(&h1, w2, true);
    let mut out = h0.clone();
    for (pos, &i) in order.iter().enumerate() {
        for k in 0..c {
            out.data_mut()[i * c + k] = h0.row(i)[k] + h2[pos][k];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_comparison() {
        assert!(same_partition(&[0, 0, 1, -1], &[3, 3, 0, -1]));
        assert!(!same_partition(&[0, 0, 1, -1], &[0, 1, 1, -1]));
        assert!(!same_partition(&[0, -1], &[0, 1]));
    }

    #[test]
    fn two_blobs_and_an_outlier() {
        let p = Tensor::from_rows(&[vec![0.0], vec![0.1], vec![0.2], vec![5.0], vec![5.1], vec![5.2], vec![9.0]]).unwrap();
        assert_eq!(dbscan(&p, 0.15, 2), vec![0, 0, 0, 1, 1, 1, -1]);
    }

    #[test]
    fn perfect_retrieval() {
        let q = Tensor::from_rows(&[vec![0.0], vec![10.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![0.1], vec![9.9], vec![0.2]]).unwrap();
        let (map, cmc) = retrieval(&q, &[0, 1], &g, &[0, 1, 0], &[1]);
        assert_eq!(map, 1.0);
        assert_eq!(cmc, vec![1.0]);
    }
}
