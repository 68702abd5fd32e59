//! Multi-domain synthetic identities.
//!
//! Each identity is a `C_in` prototype, repeated along `L` with independent
//! per-position noise. A domain applies its own style
//! to every sample: a channel-mixing matrix near the identity, a per-channel
//! gain, and a per-channel shift. Identity sets of different domains are
//! disjoint.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{io, Tensor};
use crate::pipeline::{derive_seed, DomainDataset, Role};
use crate::DomainId;

const STYLE_STREAM: u64 = 10;
const TRAIN_STREAM: u64 = 11;
const TEST_STREAM: u64 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Labeled source domains; the target is one more domain after them.
    pub sources: usize,
    pub identities: usize,
    pub samples_per_identity: usize,
    /// Held-out target identities used for query/gallery evaluation.
    pub test_identities: usize,
    pub test_samples_per_identity: usize,
    pub queries_per_identity: usize,
    pub in_channels: usize,
    pub length: usize,
    pub noise: f64,
    /// Spread of the log channel gains.
    pub style_scale: f64,
    /// Spread of the channel shifts.
    pub style_shift: f64,
    /// Spread of the channel-mixing perturbation.
    pub style_mix: f64,
    /// Per-sample log-gain jitter, in units of `noise`.
    pub instance_style: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            sources: 2,
            identities: 10,
            samples_per_identity: 8,
            test_identities: 30,
            test_samples_per_identity: 6,
            queries_per_identity: 2,
            in_channels: 8,
            length: 8,
            noise: 0.5,
            style_scale: 0.5,
            style_shift: 1.0,
            style_mix: 0.3,
            instance_style: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_domains(&self) -> usize {
        self.sources + 1
    }

    pub fn target(&self) -> DomainId {
        self.sources
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("sources", self.sources),
            ("identities", self.identities),
            ("samples_per_identity", self.samples_per_identity),
            ("in_channels", self.in_channels),
            ("length", self.length),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synthetic {name} must be positive")));
        }
        if self.test_identities > 0 && (self.queries_per_identity == 0 || self.queries_per_identity >= self.test_samples_per_identity) {
            return Err(Error::Config(format!(
                "need 1 ≤ queries_per_identity < test_samples_per_identity, got {} and {}",
                self.queries_per_identity, self.test_samples_per_identity
            )));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("style_scale", self.style_scale),
            ("style_shift", self.style_shift),
            ("style_mix", self.style_mix),
            ("instance_style", self.instance_style),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("synthetic {name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// A domain's style transform.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStyle {
    /// `C_in × C_in`.
    pub mix: Tensor,
    pub gain: Vec<f64>,
    pub shift: Vec<f64>,
}

impl DomainStyle {
    fn draw(spec: &SyntheticSpec, domain: DomainId) -> Result<Self> {
        let c = spec.in_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, STYLE_STREAM, domain as u64, 0));
        let mut mix = Tensor::eye(c);
        let s = spec.style_mix / (c as f64).sqrt();
        for v in mix.data_mut() {
            *v += s * gauss(&mut rng);
        }
        let gain = (0..c).map(|_| (spec.style_scale * gauss(&mut rng)).exp()).collect();
        let shift = (0..c).map(|_| spec.style_shift * gauss(&mut rng)).collect();
        Ok(DomainStyle { mix, gain, shift })
    }

    /// `gain ⊙ (mix · z) + shift`, for one `C_in × L` sample.
    fn apply(&self, z: &Tensor) -> Result<Tensor> {
        let mut y = self.mix.matmul(z)?;
        let l = z.cols();
        for (c, row) in y.data_mut().chunks_mut(l).enumerate() {
            row.iter_mut().for_each(|v| *v = self.gain[c] * *v + self.shift[c]);
        }
        Ok(y)
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_domain(spec: &SyntheticSpec, style: &DomainStyle, domain: DomainId, first_identity: usize, identities: usize, per: usize, stream: u64) -> Result<(Tensor, Vec<usize>)> {
    let (c, l) = (spec.in_channels, spec.length);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream, domain as u64, 0));
    let mut data = Vec::with_capacity(identities * per * c * l);
    let mut ids = Vec::with_capacity(identities * per);
    for k in 0..identities {
        let proto: Vec<f64> = (0..c).map(|_| gauss(&mut rng)).collect();
        for _ in 0..per {
            let z: Vec<f64> = (0..c * l).map(|i| proto[i / l] + spec.noise * gauss(&mut rng)).collect();
            let jitter = (spec.noise * spec.instance_style * gauss(&mut rng)).exp();
            let y = style.apply(&Tensor::new(vec![c, l], z)?)?;
            data.extend(y.data().iter().map(|v| v * jitter));
            ids.push(first_identity + k);
        }
    }
    Ok((Tensor::new(vec![identities * per, c, l], data)?, ids))
}

/// Training sets for every domain, sources first and the unlabeled target
/// last.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<DomainDataset>> {
    Ok(generate_benchmark(spec)?.domains())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBenchmark {
    pub sources: Vec<DomainDataset>,
    /// Unlabeled target training samples (ground truth kept in `identities`).
    pub target: DomainDataset,
    /// Held-out target identities, labeled for evaluation.
    pub target_test: DomainDataset,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
    pub styles: Vec<DomainStyle>,
}

impl SyntheticBenchmark {
    pub fn domains(&self) -> Vec<DomainDataset> {
        let mut all = self.sources.clone();
        all.push(self.target.clone());
        all
    }

    pub fn source_ids(&self) -> Vec<DomainId> {
        self.sources.iter().map(|s| s.domain).collect()
    }

    /// Writes every split as a tensor file plus a CSV of labels, and returns
    /// the written paths.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut splits: Vec<(String, &DomainDataset, bool)> = self.sources.iter().map(|s| (format!("domain{}", s.domain), s, false)).collect();
        splits.push((format!("domain{}", self.target.domain), &self.target, false));
        splits.push(("target_test".to_string(), &self.target_test, true));
        for (name, ds, test) in splits {
            let tensor = dir.join(format!("{name}.dmx"));
            io::save(&ds.inputs, &tensor)?;
            let table = dir.join(format!("{name}.csv"));
            let mut w = csv::Writer::from_path(&table).map_err(|e| Error::format(&table, e.to_string()))?;
            let split = |i: usize| -> &str {
                match (test, self.query.contains(&i)) {
                    (false, _) => "train",
                    (true, true) => "query",
                    (true, false) => "gallery",
                }
            };
            w.write_record(["sample", "domain", "label", "identity", "split"]).map_err(|e| Error::format(&table, e.to_string()))?;
            for i in 0..ds.len() {
                w.write_record([i.to_string(), ds.domain.to_string(), ds.labels[i].to_string(), ds.identities[i].to_string(), split(i).to_string()])
                    .map_err(|e| Error::format(&table, e.to_string()))?;
            }
            w.flush().map_err(|e| Error::io(&table, e))?;
            written.push(tensor);
            written.push(table);
        }
        Ok(written)
    }
}

pub fn generate_benchmark(spec: &SyntheticSpec) -> Result<SyntheticBenchmark> {
    spec.validate()?;
    let styles: Vec<DomainStyle> = (0..spec.num_domains()).map(|d| DomainStyle::draw(spec, d)).collect::<Result<_>>()?;
    let mut sources = Vec::new();
    for (d, style) in styles.iter().enumerate().take(spec.sources) {
        let (inputs, identities) = draw_domain(spec, style, d, d * spec.identities, spec.identities, spec.samples_per_identity, TRAIN_STREAM)?;
        sources.push(DomainDataset {
            domain: d,
            role: Role::Source,
            inputs,
            labels: identities.iter().map(|&g| (g - d * spec.identities) as i64).collect(),
            identities,
        });
    }
    let t = spec.target();
    let (inputs, identities) = draw_domain(spec, &styles[t], t, t * spec.identities, spec.identities, spec.samples_per_identity, TRAIN_STREAM)?;
    let target = DomainDataset {
        domain: t,
        role: Role::Target,
        inputs,
        labels: vec![-1; identities.len()],
        identities,
    };
    let first_test = spec.num_domains() * spec.identities;
    let (inputs, identities) = draw_domain(spec, &styles[t], t, first_test, spec.test_identities, spec.test_samples_per_identity, TEST_STREAM)?;
    let per = spec.test_samples_per_identity.max(1);
    let (query, gallery): (Vec<usize>, Vec<usize>) = (0..identities.len()).partition(|i| i % per < spec.queries_per_identity);
    let target_test = DomainDataset {
        domain: t,
        role: Role::Target,
        inputs,
        labels: identities.iter().map(|&g| (g - first_test) as i64).collect(),
        identities,
    };
    Ok(SyntheticBenchmark {
        sources,
        target,
        target_test,
        query,
        gallery,
        styles,
    })
}
