use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_fusion::{mdif_forward, AgentRegistry, MdifParams, MdifVars, WeightHeadVars};
use crate::normalization::{rdsbn_forward, read_json, write_json, RdsbnState, RdsbnVars};
use crate::numerics::{io, Tape, Tensor, Var};
use crate::objectives::LabelSpace;
use crate::{DomainId, Mode};

/// Branch every domain maps to under [`NormKind::Bn`].
pub const SHARED_BRANCH: DomainId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// One shared branch for all domains.
    Bn,
    /// One branch per domain.
    Dsbn,
    /// One branch per domain, rectified during adaptation.
    Rdsbn,
}

impl NormKind {
    pub fn name(self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::Dsbn => "dsbn",
            NormKind::Rdsbn => "rdsbn",
        }
    }
}

/// Pointwise channel map followed by normalization and LeakyReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// `C_in × C_out`.
    pub weight: Tensor,
    pub norm: RdsbnState,
}

/// Per-domain weight blocks of a classifier over the disjoint label space.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Classifier {
    /// `n_d × C` per domain.
    pub blocks: BTreeMap<DomainId, Tensor>,
}

impl Classifier {
    pub fn label_space(&self) -> LabelSpace {
        let mut s = LabelSpace::new();
        for (&d, w) in &self.blocks {
            s.set_count(d, w.rows());
        }
        s
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BTreeMap<DomainId, Var> {
        self.blocks
            .iter()
            .map(|(&d, w)| (d, if trainable { tape.param(w.clone()) } else { tape.constant(w.clone()) }))
            .collect()
    }

    fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (d, w) in &self.blocks {
            io::save(w, &dir.join(format!("d{d}.dmx")))?;
        }
        write_json(&dir.join("manifest.json"), &self.blocks.keys().collect::<Vec<_>>())
    }

    fn load(dir: &Path) -> Result<Self> {
        let domains: Vec<DomainId> = read_json(&dir.join("manifest.json"))?;
        let mut blocks = BTreeMap::new();
        for d in domains {
            blocks.insert(d, io::load(&dir.join(format!("d{d}.dmx")))?);
        }
        Ok(Classifier { blocks })
    }
}

/// Fusion graph weights, agent registry, and the fused-feature classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdif {
    pub params: MdifParams,
    pub registry: AgentRegistry,
    pub classifier: Classifier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReidModel {
    pub kind: NormKind,
    pub slope: f64,
    pub blocks: Vec<Block>,
    pub classifier: Classifier,
    pub mdif: Option<Mdif>,
}

#[derive(Debug, Clone)]
pub struct MdifBinding {
    pub params: MdifVars,
    pub head: WeightHeadVars,
    pub classifier: BTreeMap<DomainId, Var>,
}

#[derive(Debug, Clone)]
pub struct ModelVars {
    pub weights: Vec<Var>,
    pub norms: Vec<RdsbnVars>,
    pub classifier: BTreeMap<DomainId, Var>,
    pub mdif: Option<MdifBinding>,
}

impl ModelVars {
    /// All handles in the order of [`ReidModel::params_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, n) in self.weights.iter().zip(&self.norms) {
            out.push(*w);
            out.extend(n.vars());
        }
        out.extend(self.classifier.values());
        if let Some(m) = &self.mdif {
            out.extend([m.params.w1, m.params.w2, m.head.weight, m.head.bias]);
            out.extend(m.classifier.values());
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    /// Backbone features, `N × C`.
    pub features: Var,
    /// Features after fusion, when the model carries MDIF and it was requested.
    pub fused: Option<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub slope: f64,
}

impl ReidModel {
    /// Random pointwise weights (He-normal), fresh normalization branches for
    /// `domains`, and a classifier block of `classes[d]` rows per domain.
    pub fn new(spec: &BackboneSpec, kind: NormKind, domains: &[DomainId], classes: &BTreeMap<DomainId, usize>, classifier_std: f64, seed: u64) -> Result<Self> {
        if spec.widths.is_empty() || spec.in_channels == 0 || spec.widths.contains(&0) {
            return Err(Error::Config(format!("invalid backbone widths {:?} from {} inputs", spec.widths, spec.in_channels)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branches: Vec<DomainId> = match kind {
            NormKind::Bn => vec![SHARED_BRANCH],
            _ => domains.to_vec(),
        };
        let mut blocks = Vec::new();
        let mut fan_in = spec.in_channels;
        for &w in &spec.widths {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
            let weight = Tensor::new(vec![fan_in, w], (0..fan_in * w).map(|_| normal.sample(&mut rng)).collect())?;
            blocks.push(Block {
                weight,
                norm: RdsbnState::with_domains(w, &branches, false)?,
            });
            fan_in = w;
        }
        let normal = Normal::new(0.0, classifier_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut classifier = Classifier::default();
        for (&d, &n) in classes {
            classifier
                .blocks
                .insert(d, Tensor::new(vec![n, fan_in], (0..n * fan_in).map(|_| normal.sample(&mut rng)).collect())?);
        }
        Ok(ReidModel {
            kind,
            slope: spec.slope,
            blocks,
            classifier,
            mdif: None,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.weight.cols())
    }

    pub fn in_channels(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.weight.rows())
    }

    /// Normalization branch used for each domain tag.
    pub fn norm_ids(&self, domain_ids: &[DomainId]) -> Vec<DomainId> {
        match self.kind {
            NormKind::Bn => vec![SHARED_BRANCH; domain_ids.len()],
            _ => domain_ids.to_vec(),
        }
    }

    pub fn set_rectify(&mut self, on: bool) {
        for b in &mut self.blocks {
            b.norm.set_rectify(on);
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let leaf = |tape: &mut Tape, t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let mut weights = Vec::new();
        let mut norms = Vec::new();
        for b in &self.blocks {
            weights.push(leaf(tape, &b.weight));
            norms.push(b.norm.bind(tape, trainable));
        }
        let classifier = self.classifier.bind(tape, trainable);
        let mdif = self.mdif.as_ref().map(|m| MdifBinding {
            params: m.params.bind(tape, trainable),
            head: m.registry.head.bind(tape, trainable),
            classifier: m.classifier.bind(tape, trainable),
        });
        ModelVars {
            weights,
            norms,
            classifier,
            mdif,
        }
    }

    /// Trainable tensors in the order of [`ModelVars::vars`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.extend(b.norm.params_mut());
        }
        out.extend(self.classifier.blocks.values_mut());
        if let Some(m) = &mut self.mdif {
            out.push(&mut m.params.w1);
            out.push(&mut m.params.w2);
            out.push(&mut m.registry.head.weight);
            out.push(&mut m.registry.head.bias);
            out.extend(m.classifier.blocks.values_mut());
        }
        out
    }

    /// Stable names for [`ReidModel::params_mut`], same order.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(format!("block{i}/weight"));
            for d in b.norm.domains() {
                out.push(format!("block{i}/d{d}/gamma"));
                out.push(format!("block{i}/d{d}/beta"));
                if b.norm.rectify() {
                    out.push(format!("block{i}/d{d}/rectifier"));
                }
            }
        }
        out.extend(self.classifier.blocks.keys().map(|d| format!("classifier/d{d}")));
        if let Some(m) = &self.mdif {
            out.extend(["mdif/w1", "mdif/w2", "mdif/head_weight", "mdif/head_bias"].map(String::from));
            out.extend(m.classifier.blocks.keys().map(|d| format!("mdif_classifier/d{d}")));
        }
        out
    }

    /// `N × C_in × L` inputs to pooled `N × C` features.
    pub fn backbone(&mut self, tape: &mut Tape, vars: &ModelVars, x: Var, domain_ids: &[DomainId], mode: Mode) -> Result<Var> {
        let s = tape.value(x).shape().to_vec();
        if s.len() != 3 || s[1] != self.in_channels() {
            return Err(Error::dim("backbone input (N×C_in×L)", &s, &[self.in_channels()]));
        }
        let (n, l) = (s[0], s[2]);
        let norm_ids = self.norm_ids(domain_ids);
        let mut h = x;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let (cin, cout) = (block.weight.rows(), block.weight.cols());
            let t = tape.permute(h, &[0, 2, 1])?;
            let flat = tape.reshape(t, &[n * l, cin])?;
            let mapped = tape.matmul(flat, vars.weights[i])?;
            let t = tape.reshape(mapped, &[n, l, cout])?;
            let t = tape.permute(t, &[0, 2, 1])?;
            let normed = rdsbn_forward(tape, t, &norm_ids, &mut block.norm, &vars.norms[i], mode)?;
            h = tape.leaky_relu(normed, self.slope);
        }
        tape.mean(h, &[2])
    }

    pub fn forward(&mut self, tape: &mut Tape, vars: &ModelVars, x: Var, domain_ids: &[DomainId], mode: Mode, fuse: bool) -> Result<ForwardOut> {
        let features = self.backbone(tape, vars, x, domain_ids, mode)?;
        let fused = match (&mut self.mdif, &vars.mdif, fuse) {
            (Some(m), Some(mv), true) => Some(mdif_forward(tape, features, domain_ids, &m.params, &mv.params, &mut m.registry, &mv.head, mode)?),
            _ => None,
        };
        Ok(ForwardOut { features, fused })
    }

    /// Logits over the concatenated label space of `blocks`.
    pub fn logits(tape: &mut Tape, blocks: &BTreeMap<DomainId, Var>, features: Var) -> Result<Var> {
        let parts: Vec<Var> = blocks.values().copied().collect();
        if parts.is_empty() {
            return Err(Error::State("classifier has no classes".into()));
        }
        let w = tape.concat_rows(&parts)?;
        let wt = tape.transpose(w)?;
        tape.matmul(features, wt)
    }

    /// Eval-mode features for `inputs`, every sample tagged `domain`.
    /// Returns fused features when `fuse` is set and the model has MDIF.
    pub fn extract(&mut self, inputs: &Tensor, domain: DomainId, fuse: bool) -> Result<Tensor> {
        let ids = vec![domain; inputs.shape().first().copied().unwrap_or(0)];
        self.extract_tagged(inputs, &ids, fuse)
    }

    pub fn extract_tagged(&mut self, inputs: &Tensor, domain_ids: &[DomainId], fuse: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let out = self.forward(&mut tape, &vars, x, domain_ids, Mode::Eval, fuse)?;
        Ok(tape.value(out.fused.unwrap_or(out.features)).clone())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, b) in self.blocks.iter().enumerate() {
            io::save(&b.weight, &dir.join(format!("block{i}_weight.dmx")))?;
            b.norm.save(&dir.join(format!("block{i}_norm")))?;
        }
        self.classifier.save(&dir.join("classifier"))?;
        if let Some(m) = &self.mdif {
            m.params.save(&dir.join("mdif"))?;
            m.registry.save(&dir.join("mdif_registry"))?;
            m.classifier.save(&dir.join("mdif_classifier"))?;
        }
        let manifest = ModelManifest {
            kind: self.kind,
            slope: self.slope,
            blocks: self.blocks.len(),
            mdif: self.mdif.is_some(),
        };
        write_json(&dir.join("model.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: ModelManifest = read_json(&dir.join("model.json"))?;
        let mut blocks = Vec::with_capacity(m.blocks);
        for i in 0..m.blocks {
            blocks.push(Block {
                weight: io::load(&dir.join(format!("block{i}_weight.dmx")))?,
                norm: RdsbnState::load(&dir.join(format!("block{i}_norm")))?,
            });
        }
        let mdif = if m.mdif {
            Some(Mdif {
                params: MdifParams::load(&dir.join("mdif"))?,
                registry: AgentRegistry::load(&dir.join("mdif_registry"))?,
                classifier: Classifier::load(&dir.join("mdif_classifier"))?,
            })
        } else {
            None
        };
        Ok(ReidModel {
            kind: m.kind,
            slope: m.slope,
            blocks,
            classifier: Classifier::load(&dir.join("classifier"))?,
            mdif,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    kind: NormKind,
    slope: f64,
    blocks: usize,
    mdif: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normalization::DEFAULT_MOMENTUM;
    use rand::Rng;

    fn tiny(kind: NormKind) -> ReidModel {
        let spec = BackboneSpec {
            in_channels: 3,
            widths: vec![4, 5],
            slope: 0.01,
        };
        let classes = BTreeMap::from([(0, 2), (1, 3)]);
        ReidModel::new(&spec, kind, &[0, 1], &classes, 0.1, 9).unwrap()
    }

    fn input(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n, 3, 4], (0..n * 12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shapes_and_label_space() {
        let mut m = tiny(NormKind::Dsbn);
        let mut t = Tape::new();
        let v = m.bind(&mut t, true);
        let x = t.constant(input(6, 1));
        let out = m.forward(&mut t, &v, x, &[0, 0, 0, 1, 1, 1], Mode::Train, true).unwrap();
        assert_eq!(t.value(out.features).shape(), &[6, 5]);
        assert!(out.fused.is_none());
        let logits = ReidModel::logits(&mut t, &v.classifier, out.features).unwrap();
        assert_eq!(t.value(logits).shape(), &[6, 5]);
        assert_eq!(m.classifier.label_space().range(1).unwrap(), 2..5);
    }

    #[test]
    fn vars_match_params() {
        let mut m = tiny(NormKind::Rdsbn);
        m.set_rectify(true);
        m.mdif = Some(Mdif {
            params: MdifParams::residual_init(5),
            registry: AgentRegistry::new(5, &[0, 1], DEFAULT_MOMENTUM).unwrap(),
            classifier: m.classifier.clone(),
        });
        let mut t = Tape::new();
        let vars = m.bind(&mut t, true).vars();
        let names = m.param_names();
        let params: Vec<Tensor> = m.params_mut().into_iter().map(|p| p.clone()).collect();
        assert_eq!(vars.len(), params.len());
        assert_eq!(names.len(), params.len());
        for (v, p) in vars.iter().zip(&params) {
            assert_eq!(t.value(*v), p);
        }
    }

    #[test]
    fn shared_branch_under_bn() {
        let m = tiny(NormKind::Bn);
        assert_eq!(m.blocks[0].norm.domains(), vec![SHARED_BRANCH]);
        assert_eq!(m.norm_ids(&[0, 1, 2]), vec![0, 0, 0]);
    }

    #[test]
    fn eval_features_are_per_sample() {
        let mut m = tiny(NormKind::Dsbn);
        let x = input(4, 2);
        let all = m.extract(&x, 1, false).unwrap();
        let one = m.extract(&Tensor::new(vec![1, 3, 4], x.data()[12..24].to_vec()).unwrap(), 1, false).unwrap();
        assert_eq!(all.row(1), one.row(0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = tiny(NormKind::Rdsbn);
        m.set_rectify(true);
        m.mdif = Some(Mdif {
            params: MdifParams::residual_init(5),
            registry: AgentRegistry::new(5, &[0, 1], DEFAULT_MOMENTUM).unwrap(),
            classifier: m.classifier.clone(),
        });
        let x = input(6, 4);
        let mut t = Tape::new();
        let v = m.bind(&mut t, true);
        let xv = t.constant(x.clone());
        m.forward(&mut t, &v, xv, &[0, 0, 0, 1, 1, 1], Mode::Train, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let mut back = ReidModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.extract(&x, 1, true).unwrap(), m.extract(&x, 1, true).unwrap());
    }
}
