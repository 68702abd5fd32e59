use damix_core::experiment::{adapt_model, pretrain_model, ExperimentConfig, Variant};
use damix_core::pipeline::{pretrain_stage, NormKind, ReidModel};
use damix_core::synthetic::generate_benchmark;

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
[data]
test_identities = 6
[model]
widths = [16, 16]
[pretrain]
epochs = 6
iters_per_epoch = 5
lr = 0.003
milestones = []
identities_per_domain = 4
samples_per_identity = 4
[adapt]
epochs = 0
iters_per_epoch = 3
lr = 0.001
identities_per_domain = 4
samples_per_identity = 4
"#,
    )
    .unwrap()
}

fn params(model: &ReidModel) -> Vec<damix_core::numerics::Tensor> {
    model.clone().params_mut().into_iter().map(|t| t.clone()).collect()
}

#[test]
fn pretraining_reduces_the_loss() {
    let cfg = small();
    let bench = generate_benchmark(&cfg.data).unwrap();
    for kind in [NormKind::Bn, NormKind::Dsbn] {
        let (_, log) = pretrain_model(&cfg, &bench, kind).unwrap();
        let first = log.epochs.first().unwrap().total;
        let last = log.epochs.last().unwrap().total;
        assert!(last < first, "{kind:?}: {first} -> {last}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = small();
    cfg.pretrain.lr = 0.0;
    cfg.pretrain.epochs = 2;
    let bench = generate_benchmark(&cfg.data).unwrap();
    let (mut model, _) = pretrain_model(&cfg, &bench, NormKind::Dsbn).unwrap();
    let before = params(&model);
    pretrain_stage(&bench.sources, &mut model, &cfg.pretrain, 5).unwrap();
    assert_eq!(params(&model), before);
}

#[test]
fn zero_adapt_epochs_keep_the_converted_checkpoint() {
    let cfg = small();
    let bench = generate_benchmark(&cfg.data).unwrap();
    let (pre, _) = pretrain_model(&cfg, &bench, NormKind::Dsbn).unwrap();
    let out = adapt_model(&cfg, &bench, &pre, Variant { norm: NormKind::Rdsbn, mdif: true }).unwrap();
    let mut m = out.model;
    assert!(out.log.steps.is_empty());
    assert_eq!(out.metrics.len(), 1);
    for (a, b) in m.blocks.iter().zip(&pre.blocks) {
        assert_eq!(a.weight, b.weight);
        for d in bench.source_ids() {
            let (x, y) = (a.norm.branch(d).unwrap(), b.norm.branch(d).unwrap());
            assert_eq!(x.bn, y.bn);
            assert!(x.rectifier.data().iter().all(|&v| v == 0.0));
        }
    }
    let mdif = m.mdif.as_ref().unwrap();
    assert!(mdif.params.w2.data().iter().all(|&v| v == 0.0));
    let t = bench.target.domain;
    let plain = m.extract(&bench.target_test.inputs, t, false).unwrap();
    let fused = m.extract(&bench.target_test.inputs, t, true).unwrap();
    assert_eq!(plain, fused);
}

#[test]
fn bn_checkpoint_cannot_start_a_domain_specific_variant() {
    let mut cfg = small();
    cfg.pretrain.epochs = 1;
    let bench = generate_benchmark(&cfg.data).unwrap();
    let (pre, _) = pretrain_model(&cfg, &bench, NormKind::Bn).unwrap();
    assert!(adapt_model(&cfg, &bench, &pre, Variant { norm: NormKind::Rdsbn, mdif: false }).is_err());
}

#[test]
fn adaptation_runs_and_clusters() {
    let mut cfg = small();
    cfg.adapt.epochs = 2;
    let bench = generate_benchmark(&cfg.data).unwrap();
    let (pre, _) = pretrain_model(&cfg, &bench, NormKind::Dsbn).unwrap();
    let out = adapt_model(&cfg, &bench, &pre, Variant { norm: NormKind::Rdsbn, mdif: true }).unwrap();
    assert_eq!(out.metrics.len(), 2);
    assert_eq!(out.pseudo_labels.len(), bench.target.len());
    for m in &out.metrics {
        assert!(m.map > 0.0 && m.map <= 1.0);
        assert_eq!(m.domain_distances.len(), 3);
        assert!(m.id_mdif_loss.is_some());
    }
}
