use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::data::{sample_batch_with, BatchPlan, DomainBatch, DomainDataset, Role};
use super::model::{Classifier, Mdif, ModelVars, NormKind, ReidModel};
use super::optim::{adam_step, step_decay, AdamConfig, OptimizerState};
use super::derive_seed;
use crate::clustering::{generate_pseudo_labels, ClusterConfig, PseudoLabelAssignment};
use crate::error::{Error, Result};
use crate::graph_fusion::{compute_agent, AgentRegistry, MdifParams};
use crate::numerics::{Tape, Tensor};
use crate::objectives::{id_loss, stage_loss, triplet_loss, LossBundle, LossParts, Stage, StageLoss};
use crate::{DomainId, Mode};

const PRETRAIN_STREAM: u64 = 1;
const ADAPT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub weight_decay: f64,
    pub identities_per_domain: usize,
    pub samples_per_identity: usize,
    pub margin: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig::pretrain_default()
    }
}

impl StageConfig {
    pub fn pretrain_default() -> Self {
        StageConfig {
            epochs: 80,
            iters_per_epoch: 20,
            lr: 3.5e-4,
            milestones: vec![40, 70],
            gamma: 0.1,
            weight_decay: 5e-4,
            identities_per_domain: 8,
            samples_per_identity: 4,
            margin: 0.3,
        }
    }

    pub fn adapt_default() -> Self {
        StageConfig {
            epochs: 40,
            milestones: Vec::new(),
            ..StageConfig::pretrain_default()
        }
    }

    pub fn plan(&self) -> BatchPlan {
        BatchPlan {
            identities_per_domain: self.identities_per_domain,
            samples_per_identity: self.samples_per_identity,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decay(self.lr, epoch, &self.milestones, self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().validate()?;
        self.adam().validate()?;
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.margin >= 0.0) {
            return Err(Error::Config(format!("triplet margin must be non-negative, got {}", self.margin)));
        }
        if self.identities_per_domain < 2 {
            return Err(Error::Config("batch-hard triplets need at least 2 identities per domain".into()));
        }
        if self.samples_per_identity < 2 {
            return Err(Error::Config("batch-hard triplets need at least 2 samples per identity".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MdifInit {
    /// Identity first layer, zero second layer.
    Residual,
    /// Both layers zero.
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptOptions {
    pub mdif: bool,
    pub mdif_init: MdifInit,
    pub agent_momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBundle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub lr: f64,
    pub id_loss: f64,
    pub id_mdif_loss: Option<f64>,
    pub triplet_loss: f64,
    pub total: f64,
    pub clusters: Option<usize>,
    pub noise: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    fn close_epoch(&mut self, stage: Stage, epoch: usize, lr: f64, assignment: Option<&PseudoLabelAssignment>) {
        let steps: Vec<&StepLog> = self.steps.iter().filter(|s| s.stage == stage && s.epoch == epoch).collect();
        let n = steps.len().max(1) as f64;
        let mean = |f: &dyn Fn(&LossBundle) -> f64| steps.iter().map(|s| f(&s.loss)).sum::<f64>() / n;
        let id_mdif_loss = steps
            .iter()
            .map(|s| s.loss.id_mdif_loss)
            .collect::<Option<Vec<f64>>>()
            .filter(|v| !v.is_empty())
            .map(|v| v.iter().sum::<f64>() / n);
        self.epochs.push(EpochLog {
            stage,
            epoch,
            lr,
            id_loss: mean(&|b| b.id_loss),
            id_mdif_loss,
            triplet_loss: mean(&|b| b.triplet_loss),
            total: mean(&|b| b.total),
            clusters: assignment.map(|a| a.num_clusters),
            noise: assignment.map(|a| a.noise_count()),
        });
    }
}

/// One forward/backward/update on `batch` (domain-local labels).
///
/// The adaptation stage adds the fused-feature identity loss when the model
/// carries MDIF; otherwise both stages optimize identity plus triplet loss.
/// Non-finite losses and gradients surface as numeric errors.
pub fn train_step(model: &mut ReidModel, opt: &mut OptimizerState, batch: &DomainBatch, stage: Stage, cfg: &StageConfig, lr: f64) -> Result<LossBundle> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let loss = batch_loss(model, &mut tape, &vars, batch, stage, cfg.margin)?;
    if !loss.bundle.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {:?}", loss.bundle)));
    }
    let grads = tape.backward(loss.total)?;
    let handles = vars.vars();
    let grad_refs: Vec<&Tensor> = handles.iter().map(|&v| grads.wrt(v)).collect::<Result<_>>()?;
    adam_step(model.params_mut(), &grad_refs, opt, &cfg.adam(), lr)?;
    Ok(loss.bundle)
}

/// The stage objective on one batch, built on `tape` from bound `vars`.
///
/// The fused-feature identity term is added only in adaptation with MDIF
/// present; otherwise the objective is `ID + tri`.
pub fn batch_loss(model: &mut ReidModel, tape: &mut Tape, vars: &ModelVars, batch: &DomainBatch, stage: Stage, margin: f64) -> Result<StageLoss> {
    let space = model.classifier.label_space();
    let labels: Vec<usize> = batch
        .domain_ids
        .iter()
        .zip(&batch.labels)
        .map(|(&d, &l)| space.global(d, l))
        .collect::<Result<_>>()?;
    let x = tape.constant(batch.inputs.clone());
    let fuse = stage == Stage::Adapt && model.mdif.is_some();
    let out = model.forward(tape, vars, x, &batch.domain_ids, Mode::Train, fuse)?;
    let mask = vec![false; labels.len()];
    let logits = ReidModel::logits(tape, &vars.classifier, out.features)?;
    let id = id_loss(tape, logits, &labels, &mask)?;
    let triplet = triplet_loss(tape, out.features, &labels, margin)?;
    let (composition, id_mdif) = match (out.fused, &vars.mdif) {
        (Some(fused), Some(mv)) => {
            let l = ReidModel::logits(tape, &mv.classifier, fused)?;
            (Stage::Adapt, Some(id_loss(tape, l, &labels, &mask)?))
        }
        _ => (Stage::Pretrain, None),
    };
    stage_loss(
        tape,
        composition,
        LossParts {
            id: Some(id),
            id_mdif,
            triplet: Some(triplet),
        },
    )
}

fn diverged(stage: &'static str, epoch: usize, step: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        Error::Numeric(detail) => Error::Diverged { stage, epoch, step, detail },
        other => other,
    }
}

fn check_classes(model: &ReidModel, datasets: &[&DomainDataset]) -> Result<()> {
    for ds in datasets {
        let rows = model.classifier.blocks.get(&ds.domain).map_or(0, Tensor::rows);
        if rows < ds.num_labels() {
            return Err(Error::Config(format!(
                "classifier has {rows} classes for domain {} but the data uses {}",
                ds.domain,
                ds.num_labels()
            )));
        }
    }
    Ok(())
}

/// Supervised training on the labeled sources with step learning-rate decay.
pub fn pretrain_stage(sources: &[DomainDataset], model: &mut ReidModel, cfg: &StageConfig, seed: u64) -> Result<TrainLog> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::Config("pre-training needs at least one source domain".into()));
    }
    if model.mdif.is_some() {
        return Err(Error::State("pre-training expects a model without fusion".into()));
    }
    for s in sources {
        s.validate()?;
    }
    let refs: Vec<&DomainDataset> = sources.iter().collect();
    check_classes(model, &refs)?;
    let plans = vec![cfg.plan(); refs.len()];
    let mut opt = OptimizerState::new();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        for step in 0..cfg.iters_per_epoch {
            let batch = sample_batch_with(&refs, &plans, derive_seed(seed, PRETRAIN_STREAM, epoch as u64, step as u64))?;
            let loss = train_step(model, &mut opt, &batch, Stage::Pretrain, cfg, lr).map_err(diverged("pretrain", epoch, step))?;
            log.steps.push(StepLog {
                stage: Stage::Pretrain,
                epoch,
                step,
                lr,
                loss,
            });
        }
        log.close_epoch(Stage::Pretrain, epoch, lr, None);
        let e = log.epochs.last().expect("just pushed");
        log::info!("pretrain epoch {epoch}: id {:.4} tri {:.4}", e.id_loss, e.triplet_loss);
    }
    Ok(log)
}

/// Converts a pre-trained model for adaptation.
///
/// Adds a target branch initialized with the mean source affine parameters
/// and statistics calibrated on the target samples, turns rectification on
/// for [`NormKind::Rdsbn`], and attaches MDIF when requested. Agents start
/// from each domain's full-set agent so inference is defined before the
/// first training step.
pub fn prepare_adaptation(model: &mut ReidModel, sources: &[DomainDataset], target: &DomainDataset, opts: &AdaptOptions) -> Result<()> {
    let source_domains: Vec<DomainId> = sources.iter().map(|s| s.domain).collect();
    if model.mdif.is_some() {
        return Err(Error::State("model is already prepared for adaptation".into()));
    }
    let t = target.domain;
    model.set_rectify(model.kind == NormKind::Rdsbn);
    if model.kind != NormKind::Bn {
        for block in &mut model.blocks {
            let mut gamma = Tensor::zeros(&[block.norm.channels()]);
            let mut beta = Tensor::zeros(&[block.norm.channels()]);
            for &s in &source_domains {
                let b = block.norm.branch(s)?;
                gamma = gamma.add(&b.bn.gamma)?;
                beta = beta.add(&b.bn.beta)?;
            }
            let k = source_domains.len().max(1) as f64;
            let branch = block.norm.register(t)?;
            branch.bn.gamma = gamma.scale(1.0 / k);
            branch.bn.beta = beta.scale(1.0 / k);
        }
        calibrate(model, target)?;
    }
    if opts.mdif {
        let c = model.feature_dim();
        let params = match opts.mdif_init {
            MdifInit::Residual => MdifParams::residual_init(c),
            MdifInit::Zeros => MdifParams::zeros(c),
        };
        let mut domains = source_domains.clone();
        domains.push(t);
        let mut registry = AgentRegistry::new(c, &domains, opts.agent_momentum)?;
        for ds in sources.iter().chain(std::iter::once(target)) {
            let features = model.extract(&ds.inputs, ds.domain, false)?;
            let mut tape = Tape::new();
            let head = registry.head.bind(&mut tape, false);
            let f = tape.constant(features);
            let agent = compute_agent(&mut tape, f, &head, ds.domain)?;
            registry.set_agent(ds.domain, tape.value(agent).reshape(&[c])?)?;
        }
        model.mdif = Some(Mdif {
            params,
            registry,
            classifier: model.classifier.clone(),
        });
    }
    Ok(())
}

/// Sets the target branch statistics to those of the full target set.
fn calibrate(model: &mut ReidModel, target: &DomainDataset) -> Result<()> {
    let t = target.domain;
    let saved: Vec<f64> = model.blocks.iter().map(|b| b.norm.branch(t).map(|br| br.bn.momentum)).collect::<Result<_>>()?;
    for b in &mut model.blocks {
        b.norm.branch_mut(t)?.bn.momentum = 1.0;
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let x = tape.constant(target.inputs.clone());
    let ids = vec![t; target.len()];
    let result = model.backbone(&mut tape, &vars, x, &ids, Mode::Train);
    for (b, m) in model.blocks.iter_mut().zip(saved) {
        let br = b.norm.branch_mut(t)?;
        br.bn.momentum = m;
        br.stats.step = 0;
    }
    result.map(|_| ())
}

/// Rows for the target classes: unit cluster centroids scaled to the mean
/// norm of the existing classifier rows.
fn centroid_rows(features: &Tensor, assignment: &PseudoLabelAssignment, classifier: &Classifier, target: DomainId) -> Result<Tensor> {
    let c = features.cols();
    let mut norms = Vec::new();
    for (&d, w) in &classifier.blocks {
        if d != target {
            norms.extend((0..w.rows()).map(|i| w.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()));
        }
    }
    let scale = if norms.is_empty() { 1.0 } else { norms.iter().sum::<f64>() / norms.len() as f64 };
    let mut sums = vec![0.0; assignment.num_clusters * c];
    for (i, &l) in assignment.labels.iter().enumerate() {
        if l >= 0 {
            let row = &mut sums[l as usize * c..(l as usize + 1) * c];
            row.iter_mut().zip(features.row(i)).for_each(|(a, b)| *a += b);
        }
    }
    let centroids = Tensor::new(vec![assignment.num_clusters, c], sums)?;
    Ok(centroids.l2_normalize_rows().scale(scale))
}

/// Per epoch: cluster target features, reset the target classes, then train
/// on source plus pseudo-labeled target batches at a constant learning rate.
///
/// `on_epoch` runs after each epoch (used for evaluation).
pub fn adapt_stage(
    sources: &[DomainDataset],
    target: &mut DomainDataset,
    model: &mut ReidModel,
    cfg: &StageConfig,
    cluster: &ClusterConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochLog, &mut ReidModel) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    cluster.validate()?;
    if target.role != Role::Target {
        return Err(Error::Config(format!("domain {} is not a target domain", target.domain)));
    }
    for s in sources {
        s.validate()?;
    }
    let src_refs: Vec<&DomainDataset> = sources.iter().collect();
    check_classes(model, &src_refs)?;
    let t = target.domain;
    let mut opt = OptimizerState::new();
    let mut log = TrainLog::default();
    let target_rows = [format!("classifier/d{t}"), format!("mdif_classifier/d{t}")];
    for epoch in 0..cfg.epochs {
        let names_before = model.param_names();
        let features = model.extract(&target.inputs, t, false)?;
        let assignment = generate_pseudo_labels(&features, cluster, epoch)?;
        target.labels = assignment.labels.clone();
        model.classifier.blocks.remove(&t);
        if let Some(m) = &mut model.mdif {
            m.classifier.blocks.remove(&t);
        }
        if assignment.num_clusters > 0 {
            let rows = centroid_rows(&features, &assignment, &model.classifier, t)?;
            model.classifier.blocks.insert(t, rows);
            if let Some(m) = &mut model.mdif {
                let rows = centroid_rows(&features, &assignment, &m.classifier, t)?;
                m.classifier.blocks.insert(t, rows);
            }
        }
        opt.remap(&names_before, &model.param_names(), |n| !target_rows.iter().any(|r| r == n));
        log::info!(
            "adapt epoch {epoch}: {} clusters, {} noise of {}",
            assignment.num_clusters,
            assignment.noise_count(),
            target.len()
        );

        let mut refs = src_refs.clone();
        let mut plans = vec![cfg.plan(); refs.len()];
        if assignment.num_clusters > 0 {
            refs.push(target);
            plans.push(BatchPlan {
                identities_per_domain: cfg.identities_per_domain.min(assignment.num_clusters),
                samples_per_identity: cfg.samples_per_identity,
            });
        } else {
            log::warn!("adapt epoch {epoch}: no target clusters, training on sources only");
        }
        let lr = cfg.lr_at(epoch);
        for step in 0..cfg.iters_per_epoch {
            let batch = sample_batch_with(&refs, &plans, derive_seed(seed, ADAPT_STREAM, epoch as u64, step as u64))?;
            let loss = train_step(model, &mut opt, &batch, Stage::Adapt, cfg, lr).map_err(diverged("adapt", epoch, step))?;
            log.steps.push(StepLog {
                stage: Stage::Adapt,
                epoch,
                step,
                lr,
                loss,
            });
        }
        log.close_epoch(Stage::Adapt, epoch, lr, Some(&assignment));
        let entry = log.epochs.last().expect("just pushed").clone();
        on_epoch(&entry, model)?;
    }
    Ok(log)
}

/// Class counts per labeled domain.
pub fn class_counts(datasets: &[DomainDataset]) -> BTreeMap<DomainId, usize> {
    datasets.iter().map(|d| (d.domain, d.num_labels())).collect()
}
