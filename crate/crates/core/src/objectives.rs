//! Identity classification, batch-hard triplet, and stage losses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::DomainId;

pub const DEFAULT_MARGIN: f64 = 0.3;

/// Squared distances below this are clamped before the square root.
const MIN_SQUARED_DISTANCE: f64 = 1e-12;

/// Disjoint global class ranges, one per domain, laid out in ascending
/// domain order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    counts: BTreeMap<DomainId, usize>,
}

impl LabelSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_count(&mut self, domain: DomainId, count: usize) {
        self.counts.insert(domain, count);
    }

    pub fn count(&self, domain: DomainId) -> Result<usize> {
        self.counts.get(&domain).copied().ok_or(Error::UnknownDomain(domain))
    }

    pub fn offset(&self, domain: DomainId) -> Result<usize> {
        if !self.counts.contains_key(&domain) {
            return Err(Error::UnknownDomain(domain));
        }
        Ok(self.counts.range(..domain).map(|(_, &c)| c).sum())
    }

    pub fn range(&self, domain: DomainId) -> Result<std::ops::Range<usize>> {
        let start = self.offset(domain)?;
        Ok(start..start + self.count(domain)?)
    }

    pub fn global(&self, domain: DomainId, local: usize) -> Result<usize> {
        let count = self.count(domain)?;
        if local >= count {
            return Err(Error::Config(format!("label {local} out of range for domain {domain} with {count} classes")));
        }
        Ok(self.offset(domain)? + local)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn domains(&self) -> Vec<DomainId> {
        self.counts.keys().copied().collect()
    }
}

/// Mean cross-entropy over the samples whose `ignore` flag is false.
pub fn id_loss(tape: &mut Tape, logits: Var, labels: &[usize], ignore: &[bool]) -> Result<Var> {
    let s = tape.value(logits).shape().to_vec();
    if s.len() != 2 || labels.len() != s[0] || ignore.len() != s[0] {
        return Err(Error::dim("id_loss", &s, &[labels.len(), ignore.len()]));
    }
    let k = s[1];
    let mut picks = Vec::new();
    for (i, (&label, &skip)) in labels.iter().zip(ignore).enumerate() {
        if skip {
            continue;
        }
        if label >= k {
            return Err(Error::Config(format!("label {label} of sample {i} exceeds {k} classes")));
        }
        picks.push(i * k + label);
    }
    if picks.is_empty() {
        return Err(Error::UndefinedLoss);
    }
    let logp = tape.log_softmax(logits)?;
    let picked = tape.take(logp, &picks)?;
    let mean = tape.mean_all(picked)?;
    Ok(tape.neg(mean))
}

/// Pairwise squared Euclidean distances of the rows of `features`.
pub fn pairwise_sq_distances(tape: &mut Tape, features: Var) -> Result<Var> {
    let s = tape.value(features).shape().to_vec();
    if s.len() != 2 {
        return Err(Error::dim("pairwise distances (N×C)", &s, &[2]));
    }
    let (n, c) = (s[0], s[1]);
    let a = tape.reshape(features, &[n, 1, c])?;
    let b = tape.reshape(features, &[1, n, c])?;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    tape.sum(sq, &[2])
}

/// For each anchor, flat indices into the `N × N` distance matrix of its
/// farthest same-label sample and nearest other-label sample. Ties go to the
/// lower index.
pub fn hardest_pairs(sq_dist: &Tensor, labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = labels.len();
    if sq_dist.shape() != [n, n] {
        return Err(Error::dim("hardest_pairs", sq_dist.shape(), &[n, n]));
    }
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for i in 0..n {
        let row = sq_dist.row(i);
        let mut hp: Option<usize> = None;
        let mut hn: Option<usize> = None;
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if hp.is_none_or(|p| row[j] > row[p]) {
                    hp = Some(j);
                }
            } else if hn.is_none_or(|q| row[j] < row[q]) {
                hn = Some(j);
            }
        }
        let hp = hp.ok_or_else(|| Error::SamplerContract(format!("anchor {i} (label {}) has no positive", labels[i])))?;
        let hn = hn.ok_or_else(|| Error::SamplerContract(format!("anchor {i} (label {}) has no negative", labels[i])))?;
        pos.push(i * n + hp);
        neg.push(i * n + hn);
    }
    Ok((pos, neg))
}

/// Batch-hard triplet loss with Euclidean distances.
pub fn triplet_loss(tape: &mut Tape, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let sq = pairwise_sq_distances(tape, features)?;
    let (pos, neg) = hardest_pairs(tape.value(sq), labels)?;
    let dp = tape.take(sq, &pos)?;
    let dn = tape.take(sq, &neg)?;
    let dp = tape.clamp_min(dp, MIN_SQUARED_DISTANCE);
    let dn = tape.clamp_min(dn, MIN_SQUARED_DISTANCE);
    let dp = tape.sqrt(dp)?;
    let dn = tape.sqrt(dn)?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, margin);
    let hinge = tape.leaky_relu(gap, 0.0);
    tape.mean_all(hinge)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Adapt,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub id: Option<Var>,
    pub id_mdif: Option<Var>,
    pub triplet: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub id_loss: f64,
    pub id_mdif_loss: Option<f64>,
    pub triplet_loss: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct StageLoss {
    pub total: Var,
    pub bundle: LossBundle,
}

/// Unweighted stage sums: `ID + tri` in pre-training, `ID + ID-MDIF + tri`
/// in adaptation.
pub fn stage_loss(tape: &mut Tape, stage: Stage, parts: LossParts) -> Result<StageLoss> {
    let id = parts.id.ok_or_else(|| Error::Composition("identity loss missing".into()))?;
    let tri = parts.triplet.ok_or_else(|| Error::Composition("triplet loss missing".into()))?;
    let total = match (stage, parts.id_mdif) {
        (Stage::Pretrain, Some(_)) => return Err(Error::Composition("pre-training has no fused-feature loss".into())),
        (Stage::Adapt, None) => return Err(Error::Composition("adaptation requires the fused-feature identity loss".into())),
        (Stage::Pretrain, None) => tape.add(id, tri)?,
        (Stage::Adapt, Some(m)) => {
            let s = tape.add(id, m)?;
            tape.add(s, tri)?
        }
    };
    let val = |t: &Tape, v: Var| t.value(v).item();
    Ok(StageLoss {
        total,
        bundle: LossBundle {
            id_loss: val(tape, id),
            id_mdif_loss: parts.id_mdif.map(|m| val(tape, m)),
            triplet_loss: val(tape, tri),
            total: val(tape, total),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(t: &mut Tape, v: f64) -> Var {
        t.constant(Tensor::scalar(v))
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[3, 5]));
        let loss = id_loss(&mut t, l, &[0, 4, 2], &[false; 3]).unwrap();
        assert!((t.value(loss).item() - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn saturated_logit() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::from_rows(&[vec![0.0, 1000.0, 0.0]]).unwrap());
        let loss = id_loss(&mut t, l, &[1], &[false]).unwrap();
        assert!(t.value(loss).item() < 1e-6);
    }

    #[test]
    fn softmax_oracle_value() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap());
        let loss = id_loss(&mut t, l, &[2], &[false]).unwrap();
        let oracle = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((t.value(loss).item() - oracle).abs() < 1e-14);
        assert!((t.value(loss).item() - 0.40760596).abs() < 1e-8);
    }

    #[test]
    fn masked_samples_are_ignored() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![9.0, 0.0, 0.0]]).unwrap());
        let a = id_loss(&mut t, l, &[2, 99], &[false, true]).unwrap();
        assert!((t.value(a).item() - 0.40760596).abs() < 1e-8);
        assert!(matches!(id_loss(&mut t, l, &[0, 0], &[true, true]), Err(Error::UndefinedLoss)));
    }

    #[test]
    fn identical_features_give_margin() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::ones(&[4, 3]));
        let loss = triplet_loss(&mut t, f, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((t.value(loss).item() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn separated_classes_give_zero() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 0.0], vec![10.0, 0.0]]).unwrap());
        let loss = triplet_loss(&mut t, f, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(t.value(loss).item(), 0.0);
    }

    #[test]
    fn missing_positive_is_contract_error() {
        let mut t = Tape::new();
        let f = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(triplet_loss(&mut t, f, &[0, 0, 1], 0.3), Err(Error::SamplerContract(_))));
        assert!(matches!(triplet_loss(&mut t, f, &[0, 0, 0], 0.3), Err(Error::SamplerContract(_))));
    }

    #[test]
    fn stage_sums() {
        let mut t = Tape::new();
        let (id, m, tri) = (scalar(&mut t, 0.7), scalar(&mut t, 0.5), scalar(&mut t, 0.2));
        let p = stage_loss(&mut t, Stage::Pretrain, LossParts { id: Some(id), id_mdif: None, triplet: Some(tri) }).unwrap();
        assert!((p.bundle.total - 0.9).abs() < 1e-15);
        let a = stage_loss(&mut t, Stage::Adapt, LossParts { id: Some(id), id_mdif: Some(m), triplet: Some(tri) }).unwrap();
        assert!((a.bundle.total - 1.4).abs() < 1e-15);
        assert_eq!(a.bundle.total, a.bundle.id_loss + a.bundle.id_mdif_loss.unwrap() + a.bundle.triplet_loss);

        assert!(matches!(
            stage_loss(&mut t, Stage::Pretrain, LossParts { id: Some(id), id_mdif: Some(m), triplet: Some(tri) }),
            Err(Error::Composition(_))
        ));
        assert!(matches!(
            stage_loss(&mut t, Stage::Adapt, LossParts { id: Some(id), id_mdif: None, triplet: Some(tri) }),
            Err(Error::Composition(_))
        ));
        assert!(matches!(stage_loss(&mut t, Stage::Pretrain, LossParts { id: None, id_mdif: None, triplet: Some(tri) }), Err(Error::Composition(_))));
    }

    #[test]
    fn label_space_ranges_are_disjoint() {
        let mut ls = LabelSpace::new();
        ls.set_count(0, 10);
        ls.set_count(1, 7);
        ls.set_count(2, 4);
        assert_eq!(ls.range(0).unwrap(), 0..10);
        assert_eq!(ls.range(1).unwrap(), 10..17);
        assert_eq!(ls.range(2).unwrap(), 17..21);
        assert_eq!(ls.global(1, 3).unwrap(), 13);
        assert!(ls.global(1, 7).is_err());
        ls.set_count(2, 9);
        assert_eq!(ls.range(2).unwrap(), 17..26);
        assert_eq!(ls.total(), 26);
    }
}
