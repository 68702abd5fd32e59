use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::DomainId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Target,
}

/// One domain's samples.
///
/// `labels` are what training sees: local identity indices for sources,
/// pseudo-labels (or −1) for the target. `identities` hold the generator's
/// global ground truth and are used only for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub domain: DomainId,
    pub role: Role,
    /// `S × C_in × L`.
    pub inputs: Tensor,
    pub labels: Vec<i64>,
    pub identities: Vec<usize>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.inputs.shape();
        if s.len() != 3 || s[0] != self.labels.len() || self.identities.len() != self.labels.len() {
            return Err(Error::dim("DomainDataset", s, &[self.labels.len(), self.identities.len()]));
        }
        if self.role == Role::Source && self.labels.iter().any(|&l| l < 0) {
            return Err(Error::Config(format!("source domain {} has unlabeled samples", self.domain)));
        }
        Ok(())
    }

    /// Samples grouped by label, noise excluded, in ascending label order.
    pub fn identity_groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= 0 {
                groups.entry(l as usize).or_default().push(i);
            }
        }
        groups.into_iter().collect()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.iter().filter(|&&l| l >= 0).map(|&l| l as usize + 1).max().unwrap_or(0)
    }

    /// Rows `idx` as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> Result<DomainDataset> {
        let s = self.inputs.shape();
        let flat = self.inputs.reshape(&[s[0], s[1] * s[2]])?;
        Ok(DomainDataset {
            domain: self.domain,
            role: self.role,
            inputs: flat.gather_rows(idx)?.reshape(&[idx.len(), s[1], s[2]])?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            identities: idx.iter().map(|&i| self.identities[i]).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub identities_per_domain: usize,
    pub samples_per_identity: usize,
}

impl Default for BatchPlan {
    fn default() -> Self {
        BatchPlan {
            identities_per_domain: 8,
            samples_per_identity: 4,
        }
    }
}

impl BatchPlan {
    pub fn per_domain(&self) -> usize {
        self.identities_per_domain * self.samples_per_identity
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities_per_domain == 0 || self.samples_per_identity == 0 {
            return Err(Error::Config("batch plan needs at least one identity and one sample per identity".into()));
        }
        Ok(())
    }
}

/// A sampled mini-batch, domains in the order they were passed.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    /// `N × C_in × L`.
    pub inputs: Tensor,
    pub domain_ids: Vec<DomainId>,
    /// Domain-local labels.
    pub labels: Vec<usize>,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws `P` identities per domain and `R` samples per identity.
///
/// Identities are drawn without replacement; samples are drawn without
/// replacement when an identity has at least `R`, otherwise with
/// replacement. `plans` may override the identity count per domain.
pub fn sample_batch(datasets: &[&DomainDataset], plan: &BatchPlan, rng_seed: u64) -> Result<DomainBatch> {
    let plans: Vec<BatchPlan> = vec![*plan; datasets.len()];
    sample_batch_with(datasets, &plans, rng_seed)
}

pub fn sample_batch_with(datasets: &[&DomainDataset], plans: &[BatchPlan], rng_seed: u64) -> Result<DomainBatch> {
    if datasets.is_empty() {
        return Err(Error::Config("sample_batch needs at least one domain".into()));
    }
    if plans.len() != datasets.len() {
        return Err(Error::dim("sample_batch plans", &[datasets.len()], &[plans.len()]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut rows = Vec::new();
    let mut domain_ids = Vec::new();
    let mut labels = Vec::new();
    let first = datasets[0].inputs.shape().to_vec();
    for (di, (ds, plan)) in datasets.iter().zip(plans).enumerate() {
        plan.validate()?;
        let s = ds.inputs.shape();
        if s.len() != 3 || s[1..] != first[1..] {
            return Err(Error::dim("sample_batch inputs", &first, s));
        }
        let groups = ds.identity_groups();
        let (p, r) = (plan.identities_per_domain, plan.samples_per_identity);
        if groups.len() < p {
            return Err(Error::Sampling {
                domain: ds.domain,
                reason: format!("{} labeled identities available, {p} required", groups.len()),
            });
        }
        let chosen: Vec<&(usize, Vec<usize>)> = groups.choose_multiple(&mut rng, p).collect();
        for (label, members) in chosen {
            let picks: Vec<usize> = if members.len() >= r {
                members.choose_multiple(&mut rng, r).copied().collect()
            } else {
                (0..r).map(|_| members[rng.gen_range(0..members.len())]).collect()
            };
            for i in picks {
                rows.push((di, i));
                domain_ids.push(ds.domain);
                labels.push(*label);
            }
        }
    }
    let (c, l) = (first[1], first[2]);
    let mut data = Vec::with_capacity(rows.len() * c * l);
    for &(di, i) in &rows {
        data.extend_from_slice(&datasets[di].inputs.data()[i * c * l..(i + 1) * c * l]);
    }
    Ok(DomainBatch {
        inputs: Tensor::new(vec![rows.len(), c, l], data)?,
        domain_ids,
        labels,
    })
}
