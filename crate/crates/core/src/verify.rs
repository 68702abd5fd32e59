//! Self-check suites: gradients, normalization and graph invariants, oracle
//! agreement, and moving-average convergence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::clustering::dbscan;
use crate::error::Result;
use crate::evaluation::{evaluate_retrieval, interclass_distance, intraclass_variance};
use crate::graph_fusion::{build_adjacency, mdif_forward, AgentRegistry, Layer, MdifParams, MdifVars, WeightHead, WeightHeadVars};
use crate::normalization::{bn_forward, rdsbn_forward, standardize, update_running_stats, BnParams, BnVars, BranchVars, RdsbnState, RdsbnVars, RunningStats};
use crate::numerics::gradcheck::{relative_error, DEFAULT_STEP};
use crate::numerics::{check_gradients_multi, Tape, Tensor, Var};
use crate::objectives::{id_loss, triplet_loss, Stage};
use crate::pipeline::{batch_loss, BackboneSpec, DomainBatch, Mdif, NormKind, ReidModel};
use crate::reference;
use crate::{DomainId, Mode};

/// Relative tolerance for every finite-difference comparison.
pub const GRAD_TOL: f64 = 1e-4;
/// Wall-clock budget for the gradient suite.
pub const GRAD_BUDGET: Duration = Duration::from_secs(60);
pub const ORACLE_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn from_result(name: &str, r: Result<Check>) -> Check {
        r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
    }
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub title: &'static str,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl Suite {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn timed(title: &'static str, f: impl FnOnce() -> Vec<Check>) -> Suite {
    let start = Instant::now();
    let checks = f();
    Suite {
        title,
        checks,
        elapsed: start.elapsed(),
    }
}

pub fn run_all() -> Vec<Suite> {
    vec![gradient_suite(), normalization_suite(), graph_suite(), oracle_suite(), moving_average_suite()]
}

/// One line per check, grouped by suite, with a final verdict.
pub fn render_table(suites: &[Suite]) -> String {
    let width = suites.iter().flat_map(|s| s.checks.iter().map(|c| c.name.len())).max().unwrap_or(0);
    let mut out = String::new();
    for s in suites {
        let _ = writeln!(out, "== {} ({:.2}s)", s.title, s.elapsed.as_secs_f64());
        for c in &s.checks {
            let _ = writeln!(out, "  {} {:width$}  {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
    }
    let failed: usize = suites.iter().map(|s| s.checks.iter().filter(|c| !c.passed).count()).sum();
    let total: usize = suites.iter().map(|s| s.checks.len()).sum();
    let _ = writeln!(out, "{} of {total} checks passed", total - failed);
    out
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()).expect("shape matches data")
}

/// `Σ out ⊙ probe` with a fixed random probe, so no gradient vanishes by
/// symmetry.
fn probe_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let p = tape.constant(randn(&shape, 1.0, &mut rng(seed)));
    let prod = tape.mul(out, p)?;
    tape.sum_all(prod)
}

fn grad_check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Check {
    Check::from_result(
        name,
        check_gradients_multi(f, inputs, DEFAULT_STEP, GRAD_TOL).map(|r| Check::new(name, r.passed, format!("max rel err {:.2e}", r.max_rel_error))),
    )
}

// ---------------------------------------------------------------- gradients

pub fn gradient_suite() -> Suite {
    let start = Instant::now();
    let mut checks = vec![
        grad_bn(),
        grad_rdsbn(),
        grad_mdif(),
        grad_id_loss(),
        grad_triplet(),
        Check::from_result("stage-2 composite", grad_composite()),
    ];
    let elapsed = start.elapsed();
    checks.push(Check::new(
        "suite runtime",
        elapsed < GRAD_BUDGET,
        format!("{:.2}s (budget {}s)", elapsed.as_secs_f64(), GRAD_BUDGET.as_secs()),
    ));
    Suite {
        title: "gradients",
        checks,
        elapsed,
    }
}

fn grad_bn() -> Check {
    let mut r = rng(1);
    let c = 3;
    let inputs = [randn(&[4, c, 5], 1.5, &mut r), randn(&[c], 1.0, &mut r), randn(&[c], 1.0, &mut r)];
    let params = BnParams::new(c, 1e-5, 0.1).expect("valid");
    grad_check("bn_forward (x, gamma, beta)", &inputs, |t, v| {
        let vars = BnVars { gamma: v[1], beta: v[2] };
        let out = bn_forward(t, v[0], &params, &vars, &mut RunningStats::new(c), Mode::Train)?;
        probe_sum(t, out, 11)
    })
}

fn grad_rdsbn() -> Check {
    let mut r = rng(2);
    let c = 3;
    let state = RdsbnState::new(c, 2, 1e-5, 0.1, true).and_then(|mut s| {
        s.register(0)?;
        s.register(1)?;
        Ok(s)
    });
    let Ok(state) = state else {
        return Check::new("rdsbn_forward", false, "state construction failed");
    };
    let mut inputs = vec![randn(&[6, c, 4], 1.0, &mut r)];
    for _ in 0..2 {
        inputs.push(randn(&[c], 1.0, &mut r));
        inputs.push(randn(&[c], 1.0, &mut r));
        inputs.push(randn(&[2, 2], 0.5, &mut r));
    }
    let ids = [0, 1, 1, 0, 1, 0];
    grad_check("rdsbn_forward (x, gamma, beta, r)", &inputs, |t, v| {
        let mut vars = RdsbnVars::default();
        for d in 0..2 {
            vars.branches.insert(
                d,
                BranchVars {
                    bn: BnVars {
                        gamma: v[1 + 3 * d],
                        beta: v[2 + 3 * d],
                    },
                    rectifier: Some(v[3 + 3 * d]),
                },
            );
        }
        let out = rdsbn_forward(t, v[0], &ids, &mut state.clone(), &vars, Mode::Train)?;
        probe_sum(t, out, 12)
    })
}

fn grad_mdif() -> Check {
    let mut r = rng(3);
    let c = 4;
    let domains = [0, 1, 2];
    let Ok(registry) = AgentRegistry::new(c, &domains, 0.1) else {
        return Check::new("mdif_forward", false, "registry construction failed");
    };
    let params = MdifParams::zeros(c);
    let inputs = [
        randn(&[6, c], 1.0, &mut r),
        randn(&[c, c], 0.6, &mut r),
        randn(&[c, c], 0.6, &mut r),
        randn(&[c, 1], 0.1, &mut r),
        Tensor::vector(vec![1.0]),
    ];
    let ids = [2, 0, 1, 0, 2, 1];
    grad_check("mdif_forward (H0, W1, W2, agent head)", &inputs, |t, v| {
        let vars = MdifVars { w1: v[1], w2: v[2] };
        let head = WeightHeadVars { weight: v[3], bias: v[4] };
        let out = mdif_forward(t, v[0], &ids, &params, &vars, &mut registry.clone(), &head, Mode::Train)?;
        probe_sum(t, out, 13)
    })
}

fn grad_id_loss() -> Check {
    let mut r = rng(4);
    let labels = [0, 3, 1, 4, 2, 0];
    let ignore = [false, false, true, false, false, false];
    grad_check("id_loss", &[randn(&[6, 5], 1.0, &mut r)], |t, v| id_loss(t, v[0], &labels, &ignore))
}

fn grad_triplet() -> Check {
    let mut r = rng(5);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    grad_check("triplet_loss", &[randn(&[8, 4], 1.0, &mut r)], |t, v| triplet_loss(t, v[0], &labels, 0.3))
}

/// A small RDSBN+MDIF model with every parameter randomized.
pub fn tiny_model(seed: u64) -> Result<(ReidModel, DomainBatch)> {
    let mut r = rng(seed);
    let domains = [0, 1, 2];
    let classes: BTreeMap<DomainId, usize> = domains.iter().map(|&d| (d, 3)).collect();
    let spec = BackboneSpec {
        in_channels: 3,
        widths: vec![4],
        slope: 0.01,
    };
    let mut model = ReidModel::new(&spec, NormKind::Rdsbn, &domains, &classes, 0.5, seed)?;
    model.set_rectify(true);
    let c = model.feature_dim();
    let mut registry = AgentRegistry::new(c, &domains, 0.1)?;
    registry.head = WeightHead {
        weight: randn(&[c, 1], 0.1, &mut r),
        bias: Tensor::vector(vec![1.0]),
    };
    for d in domains {
        registry.set_agent(d, randn(&[c], 1.0, &mut r))?;
    }
    model.mdif = Some(Mdif {
        params: MdifParams {
            w1: randn(&[c, c], 0.6, &mut r),
            w2: randn(&[c, c], 0.6, &mut r),
            slope: 0.01,
        },
        registry,
        classifier: model.classifier.clone(),
    });
    for b in &mut model.blocks {
        for d in domains {
            let br = b.norm.branch_mut(d)?;
            br.rectifier = randn(br.rectifier.shape(), 0.5, &mut r);
            br.bn.gamma = randn(&[c], 0.3, &mut r).map(|v| v + 1.0);
            br.bn.beta = randn(&[c], 0.3, &mut r);
        }
    }
    let mut domain_ids = Vec::new();
    let mut labels = Vec::new();
    for d in domains {
        for id in 0..2 {
            for _ in 0..2 {
                domain_ids.push(d);
                labels.push(id);
            }
        }
    }
    let batch = DomainBatch {
        inputs: randn(&[domain_ids.len(), 3, 4], 1.0, &mut r),
        domain_ids,
        labels,
    };
    Ok((model, batch))
}

fn composite_value(model: &ReidModel, batch: &DomainBatch) -> Result<f64> {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, false);
    let loss = batch_loss(&mut m, &mut tape, &vars, batch, Stage::Adapt, 0.3)?;
    Ok(loss.bundle.total)
}

fn grad_composite() -> Result<Check> {
    let (model, batch) = tiny_model(6)?;
    let mut m = model.clone();
    let mut tape = Tape::new();
    let vars = m.bind(&mut tape, true);
    let loss = batch_loss(&mut m, &mut tape, &vars, &batch, Stage::Adapt, 0.3)?;
    let grads = tape.backward(loss.total)?;
    let analytic: Vec<Tensor> = vars.vars().iter().map(|&v| grads.wrt(v).cloned()).collect::<Result<_>>()?;
    let names = model.param_names();
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    for (k, g) in analytic.iter().enumerate() {
        for i in 0..g.numel() {
            let mut plus = model.clone();
            plus.params_mut()[k].data_mut()[i] += DEFAULT_STEP;
            let mut minus = model.clone();
            minus.params_mut()[k].data_mut()[i] -= DEFAULT_STEP;
            let fd = (composite_value(&plus, &batch)? - composite_value(&minus, &batch)?) / (2.0 * DEFAULT_STEP);
            let e = relative_error(g.data()[i], fd);
            if e > worst.0 || worst.1.is_empty() {
                worst = (worst.0.max(e), format!("{}[{i}]", names[k]));
            }
            count += 1;
        }
    }
    Ok(Check::new(
        "stage-2 composite",
        worst.0 <= GRAD_TOL,
        format!("{count} parameters, max rel err {:.2e} at {}", worst.0, worst.1),
    ))
}

// ------------------------------------------------------------ normalization

pub fn normalization_suite() -> Suite {
    timed("normalization invariants", || {
        vec![
            Check::from_result("standardized mean and variance", standardized_core()),
            Check::from_result("rectifier r=0 halves DSBN", rectifier_zero()),
        ]
    })
}

fn standardized_core() -> Result<Check> {
    let eps = 1e-5;
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for (trial, &scale) in [1e-3, 1e-2, 1.0, 30.0].iter().enumerate() {
        let mut r = rng(100 + trial as u64);
        let c = 4;
        let x = randn(&[5, c, 6], scale, &mut r).map(|v| v + 7.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = standardize(&mut tape, xv, &mut RunningStats::new(c), eps, 0.1, Mode::Train)?;
        let y = tape.value(y).clone();
        for ch in 0..c {
            let pick = |t: &Tensor| -> Vec<f64> { (0..5).flat_map(|i| (0..6).map(move |l| (i, l))).map(|(i, l)| t.data()[(i * c + ch) * 6 + l]).collect() };
            let (xs, ys) = (pick(&x), pick(&y));
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
            worst_mean = worst_mean.max(my.abs());
            worst_var = worst_var.max((vy - vx / (vx + eps)).abs());
        }
    }
    Ok(Check::new(
        "standardized mean and variance",
        worst_mean <= 1e-10 && worst_var <= 1e-6,
        format!("max |mean| {worst_mean:.1e}, max variance gap {worst_var:.1e}"),
    ))
}

fn rectifier_zero() -> Result<Check> {
    let mut r = rng(7);
    let c = 3;
    let mut rect = RdsbnState::new(c, 2, 1e-5, 0.1, true)?;
    for d in 0..2 {
        let b = rect.register(d)?;
        b.bn.gamma = randn(&[c], 1.0, &mut r);
        b.bn.beta = randn(&[c], 1.0, &mut r);
        b.stats.mean = randn(&[c], 1.0, &mut r);
    }
    let mut plain = rect.clone();
    plain.set_rectify(false);
    let x = randn(&[6, c, 5], 2.0, &mut r);
    let ids = [0, 1, 0, 1, 1, 0];
    let mut exact = true;
    for mode in [Mode::Train, Mode::Eval] {
        let run = |state: &mut RdsbnState| -> Result<Tensor> {
            let mut t = Tape::new();
            let vars = state.bind(&mut t, false);
            let xv = t.constant(x.clone());
            let y = rdsbn_forward(&mut t, xv, &ids, state, &vars, mode)?;
            Ok(t.value(y).clone())
        };
        let a = run(&mut rect.clone())?;
        let b = run(&mut plain.clone())?.scale(0.5);
        exact &= a == b;
    }
    Ok(Check::new("rectifier r=0 halves DSBN", exact, if exact { "bitwise equal in train and eval" } else { "outputs differ" }))
}

// -------------------------------------------------------------------- graph

pub fn graph_suite() -> Suite {
    timed("graph invariants", || {
        vec![
            adjacency_structure(),
            clique_third(),
            Check::from_result("eval-mode instance independence", eval_independence()),
            Check::from_result("zero MDIF reproduces no-MDIF retrieval", zero_mdif_identity()),
        ]
    })
}

fn adjacency_structure() -> Check {
    let mut bad = Vec::new();
    for d in 1..=4 {
        for q in 0..=8 {
            for layer in [Layer::First, Layer::Second] {
                let Ok(g) = build_adjacency(d, q, layer) else {
                    bad.push(format!("D={d} Q={q} {layer:?}: construction failed"));
                    continue;
                };
                let inst = d * q;
                let n = inst + d;
                let domain_of = |i: usize| if i < inst { i / q } else { i - inst };
                let mut ok = g.adjacency.shape() == [n, n];
                for i in 0..n {
                    for j in 0..n {
                        let agent_i = i >= inst;
                        let agent_j = j >= inst;
                        let expected = i == j
                            || (agent_i && agent_j)
                            || (layer == Layer::Second && agent_i != agent_j && domain_of(i) == domain_of(j));
                        let a = g.adjacency.data()[i * n + j];
                        ok &= a == if expected { 1.0 } else { 0.0 };
                        let norm = if expected { 1.0 / (g.degrees[i] * g.degrees[j]).sqrt() } else { 0.0 };
                        ok &= g.normalized.data()[i * n + j] == norm;
                    }
                    ok &= g.degrees[i] == g.adjacency.row(i).iter().sum::<f64>();
                }
                if !ok {
                    bad.push(format!("D={d} Q={q} {layer:?}"));
                }
            }
        }
    }
    Check::new(
        "adjacency structure for D in 1..4, Q in 0..8",
        bad.is_empty(),
        if bad.is_empty() { "72 graphs".to_string() } else { bad.join("; ") },
    )
}

fn clique_third() -> Check {
    let ok = [Layer::First, Layer::Second].iter().all(|&layer| match build_adjacency(3, 0, layer) {
        Ok(g) => g.normalized.data().iter().all(|&v| v == 1.0 / 3.0),
        Err(_) => false,
    }) && build_adjacency(3, 2, Layer::First).is_ok_and(|g| (6..9).all(|i| (6..9).all(|j| g.normalized.data()[i * 9 + j] == 1.0 / 3.0)));
    Check::new("3-agent clique entries are 1/3", ok, "")
}

fn populated_registry(c: usize, domains: &[DomainId], seed: u64) -> Result<(AgentRegistry, MdifParams)> {
    let mut r = rng(seed);
    let mut registry = AgentRegistry::new(c, domains, 0.1)?;
    let params = MdifParams {
        w1: randn(&[c, c], 0.6, &mut r),
        w2: randn(&[c, c], 0.6, &mut r),
        slope: 0.01,
    };
    let ids: Vec<DomainId> = domains.iter().flat_map(|&d| [d, d, d]).collect();
    let mut t = Tape::new();
    let h = t.constant(randn(&[ids.len(), c], 1.0, &mut r));
    let vars = params.bind(&mut t, false);
    let head = registry.head.bind(&mut t, false);
    mdif_forward(&mut t, h, &ids, &params, &vars, &mut registry, &head, Mode::Train)?;
    Ok((registry, params))
}

fn eval_independence() -> Result<Check> {
    let c = 4;
    let domains = [0, 1, 2];
    let (mut registry, params) = populated_registry(c, &domains, 8)?;
    let ids = [1, 0, 2, 2, 1, 0, 1];
    let h0 = randn(&[ids.len(), c], 1.0, &mut rng(9));
    let run = |h: Tensor, ids: &[DomainId], registry: &mut AgentRegistry| -> Result<Tensor> {
        let mut t = Tape::new();
        let hv = t.constant(h);
        let vars = params.bind(&mut t, false);
        let head = registry.head.bind(&mut t, false);
        let y = mdif_forward(&mut t, hv, ids, &params, &vars, registry, &head, Mode::Eval)?;
        Ok(t.value(y).clone())
    };
    let before = registry.clone();
    let batched = run(h0.clone(), &ids, &mut registry)?;
    let mut same = true;
    for (i, &d) in ids.iter().enumerate() {
        let single = run(h0.gather_rows(&[i])?, &[d], &mut registry)?;
        same &= single.data() == batched.row(i);
    }
    let untouched = registry == before;
    Ok(Check::new(
        "eval-mode instance independence",
        same && untouched,
        format!("per-instance bitwise equal: {same}, registry unchanged: {untouched}"),
    ))
}

fn zero_mdif_identity() -> Result<Check> {
    let (mut model, batch) = tiny_model(10)?;
    if let Some(m) = model.mdif.as_mut() {
        m.params = MdifParams::zeros(m.params.channels());
    }
    let target = 2;
    let rows: Vec<usize> = (0..batch.domain_ids.len()).filter(|&i| batch.domain_ids[i] == target).collect();
    let inputs = batch.inputs.gather_rows(&rows)?;
    let mut bare = model.clone();
    bare.mdif = None;
    let plain = bare.extract(&inputs, target, true)?.l2_normalize_rows();
    let fused = model.extract(&inputs, target, true)?.l2_normalize_rows();
    let ids: Vec<usize> = rows.iter().map(|&i| batch.labels[i]).collect();
    let (q, g) = ([0, 2], [1, 3]);
    let eval = |f: &Tensor| evaluate_retrieval(&f.gather_rows(&q)?, &[ids[0], ids[2]], &f.gather_rows(&g)?, &[ids[1], ids[3]], &[1, 2]);
    let (a, b) = (eval(&plain)?, eval(&fused)?);
    let same = plain == fused && a == b;
    Ok(Check::new(
        "zero MDIF reproduces no-MDIF retrieval",
        same,
        if same { "features and metrics bitwise equal" } else { "outputs differ" },
    ))
}

// ------------------------------------------------------------------ oracles

pub fn oracle_suite() -> Suite {
    timed("oracle equivalence", || {
        vec![
            dbscan_oracle(),
            Check::from_result("retrieval vs brute-force AP/CMC", retrieval_oracle()),
            Check::from_result("inter/intra-class vs loops", class_oracle()),
            Check::from_result("rdsbn_forward vs scalar loops", rdsbn_oracle()),
            Check::from_result("mdif_forward vs dense graph", mdif_oracle()),
        ]
    })
}

fn blobs(r: &mut ChaCha8Rng, n: usize, dim: usize) -> Tensor {
    let centers = r.gen_range(1..=6);
    let spread: f64 = r.gen_range(0.05..0.6);
    let c = randn(&[centers, dim], 2.0, r);
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let k = r.gen_range(0..centers);
        for j in 0..dim {
            data.push(c.row(k)[j] + spread * r.sample::<f64, _>(StandardNormal));
        }
    }
    Tensor::new(vec![n, dim], data).expect("sized")
}

fn dbscan_oracle() -> Check {
    let mut r = rng(20);
    let mut failures = Vec::new();
    for trial in 0..100 {
        let n = r.gen_range(1..=200);
        let dim = r.gen_range(1..=4);
        let pts = blobs(&mut r, n, dim);
        let eps = r.gen_range(0.05..1.0);
        let min_pts = r.gen_range(1..=6);
        match dbscan(&pts, eps, min_pts) {
            Ok(a) if reference::same_partition(&a.labels, &reference::dbscan(&pts, eps, min_pts)) => {}
            Ok(_) => failures.push(format!("#{trial}")),
            Err(e) => failures.push(format!("#{trial}: {e}")),
        }
    }
    Check::new(
        "dbscan vs density-reachability oracle",
        failures.is_empty(),
        if failures.is_empty() { "100 instances, N ≤ 200".to_string() } else { failures.join(", ") },
    )
}

fn retrieval_oracle() -> Result<Check> {
    let mut r = rng(21);
    let ranks = [1, 3, 5, 10];
    let mut worst: f64 = 0.0;
    let mut cmc_ok = true;
    for trial in 0..50 {
        let ids = r.gen_range(2..8);
        let dim = r.gen_range(1..5);
        let nq = r.gen_range(1..15);
        let ng = r.gen_range(ids..40);
        let mut gids: Vec<usize> = (0..ng).map(|i| if i < ids { i } else { r.gen_range(0..ids) }).collect();
        for i in (1..gids.len()).rev() {
            let j = r.gen_range(0..=i);
            gids.swap(i, j);
        }
        let qids: Vec<usize> = (0..nq).map(|_| r.gen_range(0..ids)).collect();
        let mut q = randn(&[nq, dim], 1.0, &mut r);
        let mut g = randn(&[ng, dim], 1.0, &mut r);
        if trial % 2 == 0 {
            // coarse grid so that distance ties occur
            q = q.map(|v| v.round());
            g = g.map(|v| v.round());
        }
        let got = evaluate_retrieval(&q, &qids, &g, &gids, &ranks)?;
        let (map, cmc) = reference::retrieval(&q, &qids, &g, &gids, &ranks);
        worst = worst.max((got.map - map).abs());
        cmc_ok &= got.cmc.iter().zip(&cmc).all(|(a, b)| (a - b).abs() <= ORACLE_TOL);
    }
    Ok(Check::new(
        "retrieval vs brute-force AP/CMC",
        worst <= ORACLE_TOL && cmc_ok,
        format!("50 instances, max mAP gap {worst:.1e}, CMC agrees: {cmc_ok}"),
    ))
}

fn class_oracle() -> Result<Check> {
    let mut r = rng(22);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = r.gen_range(2..60);
        let dim = r.gen_range(1..6);
        let k = r.gen_range(2..=n.min(8));
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { r.gen_range(0..k) } * 3).collect();
        let f = randn(&[n, dim], 2.0, &mut r);
        worst = worst.max((interclass_distance(&f, &labels)? - reference::interclass(&f, &labels)).abs());
        worst = worst.max((intraclass_variance(&f, &labels)? - reference::intraclass(&f, &labels)).abs());
    }
    Ok(Check::new("inter/intra-class vs loops", worst <= ORACLE_TOL, format!("50 instances, max gap {worst:.1e}")))
}

fn rdsbn_oracle() -> Result<Check> {
    let mut r = rng(23);
    let c = 3;
    let mut state = RdsbnState::new(c, 2, 1e-5, 0.1, true)?;
    let mut params = BTreeMap::new();
    for d in [0, 2] {
        let b = state.register(d)?;
        b.bn.gamma = randn(&[c], 1.0, &mut r);
        b.bn.beta = randn(&[c], 1.0, &mut r);
        b.rectifier = randn(&[2, 2], 0.5, &mut r);
        let rows = (0..2).map(|m| [b.rectifier.data()[2 * m], b.rectifier.data()[2 * m + 1]]).collect();
        params.insert(
            d,
            reference::BranchParams {
                gamma: b.bn.gamma.data().to_vec(),
                beta: b.bn.beta.data().to_vec(),
                rectifier: Some(rows),
            },
        );
    }
    let x = randn(&[7, c, 5], 2.0, &mut r);
    let ids = [2, 0, 0, 2, 2, 0, 2];
    let mut t = Tape::new();
    let vars = state.bind(&mut t, false);
    let xv = t.constant(x.clone());
    let y = rdsbn_forward(&mut t, xv, &ids, &mut state, &vars, Mode::Train)?;
    let gap = t.value(y).max_abs_diff(&reference::rdsbn_train(&x, &ids, &params, 1e-5));
    Ok(Check::new("rdsbn_forward vs scalar loops", gap <= ORACLE_TOL, format!("max gap {gap:.1e}")))
}

fn mdif_oracle() -> Result<Check> {
    let c = 4;
    let domains = [0, 1, 2];
    let mut r = rng(24);
    let mut registry = AgentRegistry::new(c, &domains, 0.1)?;
    registry.head = WeightHead {
        weight: randn(&[c, 1], 0.1, &mut r),
        bias: Tensor::vector(vec![1.0]),
    };
    let params = MdifParams {
        w1: randn(&[c, c], 0.6, &mut r),
        w2: randn(&[c, c], 0.6, &mut r),
        slope: 0.01,
    };
    let ids = [1, 0, 2, 0, 1, 2, 2];
    let h0 = randn(&[ids.len(), c], 1.0, &mut r);
    let run = |registry: &mut AgentRegistry, ids: &[DomainId], h: &Tensor, mode: Mode| -> Result<Tensor> {
        let mut t = Tape::new();
        let hv = t.constant(h.clone());
        let vars = params.bind(&mut t, false);
        let head = registry.head.bind(&mut t, false);
        let y = mdif_forward(&mut t, hv, ids, &params, &vars, registry, &head, mode)?;
        Ok(t.value(y).clone())
    };
    let train = run(&mut registry, &ids, &h0, Mode::Train)?;
    let w = registry.head.weight.data().to_vec();
    let b = registry.head.bias.data()[0];
    let agents: Vec<Vec<f64>> = domains
        .iter()
        .map(|&d| {
            let rows: Vec<Vec<f64>> = (0..ids.len()).filter(|&i| ids[i] == d).map(|i| h0.row(i).to_vec()).collect();
            reference::agent(&rows, &w, b)
        })
        .collect();
    let train_gap = train.max_abs_diff(&reference::mdif(&h0, &ids, &domains, &agents, &params.w1, &params.w2, params.slope, None));

    // eval: only two domains present, agents from the registry, agent
    // degrees fixed at D + Q_train
    let eval_ids = [2, 0, 2];
    let h1 = randn(&[3, c], 1.0, &mut r);
    let eval = run(&mut registry, &eval_ids, &h1, Mode::Eval)?;
    let mut stored = Vec::new();
    let mut degrees = Vec::new();
    for &d in &domains {
        let e = registry.agent(d)?.expect("populated by the train pass");
        stored.push(e.vector.data().to_vec());
        degrees.push((domains.len() + e.instances) as f64);
    }
    let eval_gap = eval.max_abs_diff(&reference::mdif(&h1, &eval_ids, &domains, &stored, &params.w1, &params.w2, params.slope, Some(&degrees)));
    let gap = train_gap.max(eval_gap);
    Ok(Check::new(
        "mdif_forward vs dense graph",
        gap <= ORACLE_TOL,
        format!("train gap {train_gap:.1e}, eval gap {eval_gap:.1e}"),
    ))
}

// ----------------------------------------------------------- moving average

pub fn moving_average_suite() -> Suite {
    timed("moving averages", || {
        vec![
            Check::from_result("running statistics converge geometrically", running_stats_geometric()),
            Check::from_result("agent registry converges geometrically", agent_geometric()),
        ]
    })
}

fn geometric_gap(start: &[f64], target: &[f64], values: &[f64], alpha: f64, t: i32) -> f64 {
    let f = (1.0 - alpha).powi(t);
    (0..start.len())
        .map(|k| ((values[k] - target[k]).abs() - f * (start[k] - target[k]).abs()).abs())
        .fold(0.0, f64::max)
}

fn running_stats_geometric() -> Result<Check> {
    let mut r = rng(30);
    let c = 4;
    let mut worst: f64 = 0.0;
    for alpha in [0.1, 0.3, 0.9] {
        // through the update rule
        let mu = randn(&[c], 1.0, &mut r);
        let var = randn(&[c], 1.0, &mut r).map(|v| v * v + 0.1);
        let mut s = RunningStats {
            mean: randn(&[c], 3.0, &mut r),
            var: randn(&[c], 1.0, &mut r).map(|v| v * v + 0.5),
            step: 0,
        };
        let start = s.clone();
        for t in 1..=50 {
            s = update_running_stats(&s, &mu, &var, alpha)?;
            worst = worst.max(geometric_gap(start.mean.data(), mu.data(), s.mean.data(), alpha, t));
            worst = worst.max(geometric_gap(start.var.data(), var.data(), s.var.data(), alpha, t));
        }
        // through train-mode normalization on a constant batch
        let x = randn(&[4, c, 3], 1.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let mut s = RunningStats::new(c);
        standardize(&mut tape, xv, &mut s, 1e-5, 1.0, Mode::Train)?;
        let (bm, bv) = (s.mean.clone(), s.var.clone());
        let mut s = RunningStats::new(c);
        let start = s.clone();
        for t in 1..=50 {
            standardize(&mut tape, xv, &mut s, 1e-5, alpha, Mode::Train)?;
            worst = worst.max(geometric_gap(start.mean.data(), bm.data(), s.mean.data(), alpha, t));
            worst = worst.max(geometric_gap(start.var.data(), bv.data(), s.var.data(), alpha, t));
        }
    }
    Ok(Check::new(
        "running statistics converge geometrically",
        worst <= ORACLE_TOL,
        format!("max deviation {worst:.1e}"),
    ))
}

fn agent_geometric() -> Result<Check> {
    let mut r = rng(31);
    let c = 5;
    let mut worst: f64 = 0.0;
    for alpha in [0.1, 0.5] {
        let mut reg = AgentRegistry::new(c, &[0], alpha)?;
        let start = randn(&[c], 2.0, &mut r);
        let target = randn(&[c], 1.0, &mut r);
        reg.set_agent(0, start.clone())?;
        for t in 1..=50 {
            reg.update_agent(0, &target, alpha)?;
            let v = reg.agent(0)?.expect("set").vector.data().to_vec();
            worst = worst.max(geometric_gap(start.data(), target.data(), &v, alpha, t));
        }
    }
    Ok(Check::new(
        "agent registry converges geometrically",
        worst <= ORACLE_TOL,
        format!("max deviation {worst:.1e}"),
    ))
}
