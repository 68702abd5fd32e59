//! DBSCAN pseudo-labels for the unlabeled target domain.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const NOISE: i64 = -1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelAssignment {
    /// Cluster id per sample, [`NOISE`] for unclustered samples.
    pub labels: Vec<i64>,
    pub num_clusters: usize,
    pub epoch: usize,
}

impl PseudoLabelAssignment {
    pub fn is_all_noise(&self) -> bool {
        self.num_clusters == 0
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    /// Per sample: true when the sample must be excluded from the ID loss.
    pub fn noise_mask(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l == NOISE).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_record(["sample_id", "label"]).map_err(|e| Error::format(path, e.to_string()))?;
        for (i, l) in self.labels.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()]).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    /// Neighborhood radius on L2-normalized features (inclusive).
    pub eps: f64,
    /// Neighbors (self included) needed for a core point.
    pub min_pts: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { eps: 0.5, min_pts: 4 }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("cluster eps must be positive, got {}", self.eps)));
        }
        if self.min_pts == 0 {
            return Err(Error::Config("cluster min_pts must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Classic DBSCAN with an inclusive radius.
///
/// Points are scanned in index order, so clusters are numbered by their
/// lowest-index core point and a border point joins the lowest-numbered
/// cluster that reaches it.
pub fn dbscan(points: &Tensor, eps: f64, min_pts: usize) -> Result<PseudoLabelAssignment> {
    ClusterConfig { eps, min_pts }.validate()?;
    if points.rank() != 2 {
        return Err(Error::dim("dbscan points (N×C)", points.shape(), &[2]));
    }
    let n = points.rows();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| euclidean(points.row(i), points.row(j)) <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![NOISE; n];
    let mut num_clusters = 0usize;
    let mut queue = Vec::new();
    for start in 0..n {
        if !core[start] || labels[start] != NOISE {
            continue;
        }
        let id = num_clusters as i64;
        num_clusters += 1;
        labels[start] = id;
        queue.clear();
        queue.push(start);
        while let Some(p) = queue.pop() {
            for &q in &neighbors[p] {
                if labels[q] != NOISE {
                    continue;
                }
                labels[q] = id;
                if core[q] {
                    queue.push(q);
                }
            }
        }
    }
    Ok(PseudoLabelAssignment {
        labels,
        num_clusters,
        epoch: 0,
    })
}

/// Row-normalizes the features and clusters them.
pub fn generate_pseudo_labels(features: &Tensor, config: &ClusterConfig, epoch: usize) -> Result<PseudoLabelAssignment> {
    let normalized = features.l2_normalize_rows();
    let mut a = dbscan(&normalized, config.eps, config.min_pts)?;
    a.epoch = epoch;
    if a.is_all_noise() {
        log::warn!("epoch {epoch}: clustering produced no clusters; target samples carry no pseudo-labels");
    }
    Ok(a)
}
