//! Batch normalization, domain-specific branches, and instance-driven
//! rectification of the per-domain affine parameters.
//!
//! Inputs are `N × C × L` tensors: `N` samples, `C` channels, `L` spatial
//! positions. Statistics are per channel over the `N × L` slice. Variances are
//! biased (divide by the element count).
//!
//! A rectifying branch scales its affine output per sample and channel by
//! `a = sigmoid(1ᴹ · (r · [μₙ; σₙ]))`, where `μₙ`, `σₙ` are the sample's own
//! channel statistics over `L` and `r` is the branch's `M × 2` rectifier.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{io, ReduceOp, Tape, Tensor, Var};
use crate::{DomainId, Mode};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_RANK: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    pub momentum: f64,
}

impl BnParams {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        let p = BnParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            eps,
            momentum,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        check_alpha(self.momentum)?;
        if self.gamma.shape() != self.beta.shape() || self.gamma.rank() != 1 {
            return Err(Error::dim("BnParams", self.gamma.shape(), self.beta.shape()));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BnVars {
        let leaf = |tape: &mut Tape, t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        BnVars {
            gamma: leaf(tape, &self.gamma),
            beta: leaf(tape, &self.beta),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BnVars {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub step: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
            step: 0,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("moving-average rate must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// One moving-average step toward the batch statistics.
pub fn update_running_stats(stats: &RunningStats, batch_mean: &Tensor, batch_var: &Tensor, alpha: f64) -> Result<RunningStats> {
    check_alpha(alpha)?;
    if batch_mean.shape() != stats.mean.shape() {
        return Err(Error::dim("update_running_stats", stats.mean.shape(), batch_mean.shape()));
    }
    if batch_var.shape() != stats.var.shape() {
        return Err(Error::dim("update_running_stats", stats.var.shape(), batch_var.shape()));
    }
    let blend = |old: f64, new: f64| (1.0 - alpha) * old + alpha * new;
    Ok(RunningStats {
        mean: stats.mean.zip_with(batch_mean, "update_running_stats", blend)?,
        var: stats.var.zip_with(batch_var, "update_running_stats", blend)?,
        step: stats.step + 1,
    })
}

fn check_input(tape: &Tape, x: Var, channels: usize) -> Result<(usize, usize)> {
    let s = tape.value(x).shape();
    if s.len() != 3 || s[1] != channels {
        return Err(Error::dim("normalization input (N×C×L)", s, &[channels]));
    }
    Ok((s[0], s[2]))
}

/// The standardization core `(x − μ) / sqrt(σ² + ε)`, before any affine map.
///
/// Train mode uses batch statistics and advances `stats`; eval mode uses the
/// stored running statistics.
pub fn standardize(tape: &mut Tape, x: Var, stats: &mut RunningStats, eps: f64, momentum: f64, mode: Mode) -> Result<Var> {
    let channels = stats.mean.numel();
    let (n, l) = check_input(tape, x, channels)?;
    let (mean, var) = match mode {
        Mode::Train => {
            if n * l < 2 {
                return Err(Error::DegenerateBatch(format!("train-mode statistics need at least 2 elements per channel, got {}", n * l)));
            }
            let mean = tape.reduce_keepdim(ReduceOp::Mean, x, &[0, 2])?;
            let var = tape.reduce_keepdim(ReduceOp::Var, x, &[0, 2])?;
            let bm = tape.value(mean).reshape(&[channels])?;
            let bv = tape.value(var).reshape(&[channels])?;
            *stats = update_running_stats(stats, &bm, &bv, momentum)?;
            (mean, var)
        }
        Mode::Eval => {
            let mean = tape.constant(stats.mean.reshape(&[1, channels, 1])?);
            let var = tape.constant(stats.var.reshape(&[1, channels, 1])?);
            (mean, var)
        }
    };
    let centered = tape.sub(x, mean)?;
    let shifted = tape.add_scalar(var, eps);
    let denom = tape.sqrt(shifted)?;
    tape.div(centered, denom)
}

fn affine(tape: &mut Tape, xhat: Var, vars: &BnVars) -> Result<Var> {
    let c = tape.value(vars.gamma).numel();
    let g = tape.reshape(vars.gamma, &[1, c, 1])?;
    let b = tape.reshape(vars.beta, &[1, c, 1])?;
    let scaled = tape.mul(xhat, g)?;
    tape.add(scaled, b)
}

/// Plain batch normalization.
pub fn bn_forward(tape: &mut Tape, x: Var, params: &BnParams, vars: &BnVars, stats: &mut RunningStats, mode: Mode) -> Result<Var> {
    check_input(tape, x, params.channels())?;
    let xhat = standardize(tape, x, stats, params.eps, params.momentum, mode)?;
    affine(tape, xhat, vars)
}

/// Per-channel rectification weights of one instance `x_n: C × L`,
/// evaluated as the literal chain `sigmoid(1ᴹ · (r · [μₙ; σₙ]))`.
pub fn rectifier_weights(x_n: &Tensor, rectifier: &Tensor, eps: f64) -> Result<Tensor> {
    if x_n.rank() != 2 || x_n.shape()[1] == 0 {
        return Err(Error::dim("rectifier_weights input (C×L, L≥1)", x_n.shape(), &[2]));
    }
    if rectifier.rank() != 2 || rectifier.shape()[1] != 2 {
        return Err(Error::dim("rectifier (M×2)", rectifier.shape(), &[2]));
    }
    let (c, l) = (x_n.shape()[0], x_n.shape()[1]);
    let mut stacked = Tensor::zeros(&[2, c]);
    for ch in 0..c {
        let row = x_n.row(ch);
        let mu = row.iter().sum::<f64>() / l as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / l as f64;
        stacked.data_mut()[ch] = mu;
        stacked.data_mut()[c + ch] = (var + eps).sqrt();
    }
    let m = rectifier.shape()[0];
    let reduced = Tensor::ones(&[1, m]).matmul(&rectifier.matmul(&stacked)?)?;
    reduced.map(crate::numerics::sigmoid).reshape(&[c])
}

/// Batched rectification weights on the tape: `x: n × C × L` → `n × C × 1`.
pub fn rectifier_weights_var(tape: &mut Tape, x: Var, rectifier: Var, eps: f64) -> Result<Var> {
    let rs = tape.value(rectifier).shape().to_vec();
    if rs.len() != 2 || rs[1] != 2 {
        return Err(Error::dim("rectifier (M×2)", &rs, &[2]));
    }
    let mu = tape.reduce_keepdim(ReduceOp::Mean, x, &[2])?;
    let var = tape.reduce_keepdim(ReduceOp::Var, x, &[2])?;
    let shifted = tape.add_scalar(var, eps);
    let sigma = tape.sqrt(shifted)?;
    let ones = tape.constant(Tensor::ones(&[1, rs[0]]));
    // 1ᴹ·r collapses the rank, leaving the two coefficients on μ and σ.
    let coeff = tape.matmul(ones, rectifier)?;
    let w_mu = tape.take(coeff, &[0])?;
    let w_sigma = tape.take(coeff, &[1])?;
    let w_mu = tape.reshape(w_mu, &[1, 1, 1])?;
    let w_sigma = tape.reshape(w_sigma, &[1, 1, 1])?;
    let a = tape.mul(mu, w_mu)?;
    let b = tape.mul(sigma, w_sigma)?;
    let logits = tape.add(a, b)?;
    Ok(tape.sigmoid(logits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub bn: BnParams,
    pub stats: RunningStats,
    /// `M × 2`.
    pub rectifier: Tensor,
}

impl Branch {
    fn new(channels: usize, rank: usize, eps: f64, momentum: f64) -> Result<Self> {
        Ok(Branch {
            bn: BnParams::new(channels, eps, momentum)?,
            stats: RunningStats::new(channels),
            rectifier: Tensor::zeros(&[rank, 2]),
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BranchVars {
    pub bn: BnVars,
    pub rectifier: Option<Var>,
}

/// Tape handles for every branch of an [`RdsbnState`].
#[derive(Debug, Clone, Default)]
pub struct RdsbnVars {
    pub branches: BTreeMap<DomainId, BranchVars>,
}

impl RdsbnVars {
    /// Trainable handles in the same order as [`RdsbnState::params_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in self.branches.values() {
            out.push(b.bn.gamma);
            out.push(b.bn.beta);
            out.extend(b.rectifier);
        }
        out
    }
}

/// Domain-specific normalization branches with optional rectification.
///
/// With `rectify` off, every branch is plain batch normalization and the
/// rectifiers are neither used nor trained.
#[derive(Debug, Clone, PartialEq)]
pub struct RdsbnState {
    branches: BTreeMap<DomainId, Branch>,
    channels: usize,
    rank: usize,
    eps: f64,
    momentum: f64,
    rectify: bool,
}

impl RdsbnState {
    pub fn new(channels: usize, rank: usize, eps: f64, momentum: f64, rectify: bool) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("rectifier rank must be at least 1".into()));
        }
        BnParams::new(channels, eps, momentum)?;
        Ok(RdsbnState {
            branches: BTreeMap::new(),
            channels,
            rank,
            eps,
            momentum,
            rectify,
        })
    }

    pub fn with_domains(channels: usize, domains: &[DomainId], rectify: bool) -> Result<Self> {
        let mut s = Self::new(channels, DEFAULT_RANK, DEFAULT_EPS, DEFAULT_MOMENTUM, rectify)?;
        for &d in domains {
            s.register(d)?;
        }
        Ok(s)
    }

    /// Adds a freshly initialized branch (γ=1, β=0, μ̄=0, σ̄²=1, r=0).
    pub fn register(&mut self, domain: DomainId) -> Result<&mut Branch> {
        let b = Branch::new(self.channels, self.rank, self.eps, self.momentum)?;
        Ok(self.branches.entry(domain).or_insert(b))
    }

    pub fn insert_branch(&mut self, domain: DomainId, branch: Branch) -> Result<()> {
        branch.bn.validate()?;
        if branch.bn.channels() != self.channels {
            return Err(Error::dim("insert_branch", &[self.channels], &[branch.bn.channels()]));
        }
        if branch.rectifier.shape() != [self.rank, 2] {
            return Err(Error::dim("insert_branch rectifier", &[self.rank, 2], branch.rectifier.shape()));
        }
        self.branches.insert(domain, branch);
        Ok(())
    }

    pub fn branch(&self, domain: DomainId) -> Result<&Branch> {
        self.branches.get(&domain).ok_or(Error::UnknownDomain(domain))
    }

    pub fn branch_mut(&mut self, domain: DomainId) -> Result<&mut Branch> {
        self.branches.get_mut(&domain).ok_or(Error::UnknownDomain(domain))
    }

    pub fn domains(&self) -> Vec<DomainId> {
        self.branches.keys().copied().collect()
    }

    pub fn branches(&self) -> impl Iterator<Item = (DomainId, &Branch)> {
        self.branches.iter().map(|(&d, b)| (d, b))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn rectify(&self) -> bool {
        self.rectify
    }

    pub fn set_rectify(&mut self, on: bool) {
        self.rectify = on;
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> RdsbnVars {
        let mut branches = BTreeMap::new();
        for (&d, b) in &self.branches {
            let bn = b.bn.bind(tape, trainable);
            let rectifier = self.rectify.then(|| {
                if trainable {
                    tape.param(b.rectifier.clone())
                } else {
                    tape.constant(b.rectifier.clone())
                }
            });
            branches.insert(d, BranchVars { bn, rectifier });
        }
        RdsbnVars { branches }
    }

    /// Trainable tensors in the same order as [`RdsbnVars::vars`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let rectify = self.rectify;
        let mut out = Vec::new();
        for b in self.branches.values_mut() {
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
            if rectify {
                out.push(&mut b.rectifier);
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut domains = BTreeMap::new();
        for (&d, b) in &self.branches {
            let name = |k: &str| format!("d{d}_{k}.dmx");
            io::save(&b.bn.gamma, &dir.join(name("gamma")))?;
            io::save(&b.bn.beta, &dir.join(name("beta")))?;
            io::save(&b.stats.mean, &dir.join(name("running_mean")))?;
            io::save(&b.stats.var, &dir.join(name("running_var")))?;
            io::save(&b.rectifier, &dir.join(name("rectifier")))?;
            domains.insert(
                d.to_string(),
                BranchEntry {
                    gamma: name("gamma"),
                    beta: name("beta"),
                    running_mean: name("running_mean"),
                    running_var: name("running_var"),
                    rectifier: name("rectifier"),
                    step: b.stats.step,
                },
            );
        }
        let manifest = NormManifest {
            channels: self.channels,
            rank: self.rank,
            eps: self.eps,
            momentum: self.momentum,
            rectify: self.rectify,
            domains,
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let m: NormManifest = read_json(&path)?;
        let mut state = RdsbnState::new(m.channels, m.rank, m.eps, m.momentum, m.rectify)?;
        for (key, e) in m.domains {
            let d: DomainId = key.parse().map_err(|_| Error::format(&path, format!("domain key {key:?} is not an id")))?;
            let branch = Branch {
                bn: BnParams {
                    gamma: io::load(&dir.join(&e.gamma))?,
                    beta: io::load(&dir.join(&e.beta))?,
                    eps: m.eps,
                    momentum: m.momentum,
                },
                stats: RunningStats {
                    mean: io::load(&dir.join(&e.running_mean))?,
                    var: io::load(&dir.join(&e.running_var))?,
                    step: e.step,
                },
                rectifier: io::load(&dir.join(&e.rectifier))?,
            };
            state.insert_branch(d, branch).map_err(|err| Error::format(&path, err.to_string()))?;
        }
        Ok(state)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BranchEntry {
    gamma: String,
    beta: String,
    running_mean: String,
    running_var: String,
    rectifier: String,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct NormManifest {
    channels: usize,
    rank: usize,
    eps: f64,
    momentum: f64,
    rectify: bool,
    domains: BTreeMap<String, BranchEntry>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Groups sample indices by domain, in ascending domain order.
pub(crate) fn group_by_domain(domain_ids: &[DomainId]) -> BTreeMap<DomainId, Vec<usize>> {
    let mut groups: BTreeMap<DomainId, Vec<usize>> = BTreeMap::new();
    for (i, &d) in domain_ids.iter().enumerate() {
        groups.entry(d).or_default().push(i);
    }
    groups
}

/// Normalizes each sample with its own domain's branch and restores input order.
pub fn rdsbn_forward(tape: &mut Tape, x: Var, domain_ids: &[DomainId], state: &mut RdsbnState, vars: &RdsbnVars, mode: Mode) -> Result<Var> {
    let (n, _) = check_input(tape, x, state.channels)?;
    if domain_ids.len() != n {
        return Err(Error::dim("rdsbn_forward domain tags", &[n], &[domain_ids.len()]));
    }
    let groups = group_by_domain(domain_ids);
    for &d in groups.keys() {
        if !state.branches.contains_key(&d) || !vars.branches.contains_key(&d) {
            return Err(Error::UnknownDomain(d));
        }
    }
    let eps = state.eps;
    let mut parts = Vec::with_capacity(groups.len());
    let mut order = Vec::with_capacity(n);
    for (d, idx) in &groups {
        if mode == Mode::Train && idx.len() < 2 {
            return Err(Error::DegenerateBatch(format!("domain {d} has a single sample in a train-mode batch")));
        }
        let branch = state.branches.get_mut(d).expect("checked above");
        let bv = vars.branches[d];
        let xs = tape.gather_rows(x, idx)?;
        let xhat = standardize(tape, xs, &mut branch.stats, branch.bn.eps, branch.bn.momentum, mode)?;
        let normed = affine(tape, xhat, &bv.bn)?;
        let out = match bv.rectifier {
            Some(r) => {
                let a = rectifier_weights_var(tape, xs, r, eps)?;
                tape.mul(normed, a)?
            }
            None => normed,
        };
        parts.push(out);
        order.extend_from_slice(idx);
    }
    let stacked = tape.concat_rows(&parts)?;
    let mut inverse = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    tape.gather_rows(stacked, &inverse)
}

/// An eval-mode normalizer that applies one branch to every input.
#[derive(Debug, Clone, Copy)]
pub struct BranchNormalizer<'a> {
    domain: DomainId,
    branch: &'a Branch,
    rectify: bool,
    eps: f64,
}

pub fn eval_branch_select(state: &RdsbnState, target: DomainId) -> Result<BranchNormalizer<'_>> {
    Ok(BranchNormalizer {
        domain: target,
        branch: state.branch(target)?,
        rectify: state.rectify,
        eps: state.eps,
    })
}

impl BranchNormalizer<'_> {
    pub fn domain(&self) -> DomainId {
        self.domain
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let vars = self.branch.bn.bind(tape, false);
        let mut stats = self.branch.stats.clone();
        let xhat = standardize(tape, x, &mut stats, self.branch.bn.eps, self.branch.bn.momentum, Mode::Eval)?;
        let normed = affine(tape, xhat, &vars)?;
        if !self.rectify {
            return Ok(normed);
        }
        let r = tape.constant(self.branch.rectifier.clone());
        let a = rectifier_weights_var(tape, x, r, self.eps)?;
        tape.mul(normed, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sigmoid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut p = BnParams::new(1, DEFAULT_EPS, 0.1).unwrap();
        p.beta = Tensor::vector(vec![0.7]);
        let mut stats = RunningStats::new(1);
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[4, 1, 2], 3.2));
        let v = p.bind(&mut t, false);
        let y = bn_forward(&mut t, x, &p, &v, &mut stats, Mode::Train).unwrap();
        for &o in t.value(y).data() {
            assert!((o - 0.7).abs() <= 0.7e-3);
        }
    }

    #[test]
    fn two_value_batch() {
        let mut p = BnParams::new(1, 1e-300, 0.1).unwrap();
        p.gamma = Tensor::vector(vec![2.0]);
        p.beta = Tensor::vector(vec![1.0]);
        let mut stats = RunningStats::new(1);
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap());
        let v = p.bind(&mut t, false);
        let y = bn_forward(&mut t, x, &p, &v, &mut stats, Mode::Train).unwrap();
        assert_eq!(t.value(y).data(), &[-1.0, 3.0]);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let p = BnParams::new(3, DEFAULT_EPS, 0.1).unwrap();
        let mut stats = RunningStats::new(3);
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 2, 1]));
        let v = p.bind(&mut t, false);
        assert!(matches!(bn_forward(&mut t, x, &p, &v, &mut stats, Mode::Train), Err(Error::Dimension { .. })));
    }

    #[test]
    fn train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xt = random(&[4, 3, 2], &mut rng);
        let p = BnParams::new(3, DEFAULT_EPS, 0.1).unwrap();
        let mut stats = RunningStats::new(3);
        let mut t = Tape::new();
        let x = t.constant(xt.clone());
        let v = p.bind(&mut t, false);
        let y = bn_forward(&mut t, x, &p, &v, &mut stats, Mode::Train).unwrap();
        let y = t.value(y);
        for c in 0..3 {
            let xs: Vec<f64> = (0..4).flat_map(|n| (0..2).map(move |l| (n, l))).map(|(n, l)| xt.data()[n * 6 + c * 2 + l]).collect();
            let ys: Vec<f64> = (0..4).flat_map(|n| (0..2).map(move |l| (n, l))).map(|(n, l)| y.data()[n * 6 + c * 2 + l]).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let var = |v: &[f64]| {
                let m = mean(v);
                v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64
            };
            assert!(mean(&ys).abs() <= 1e-12);
            let expected = 1.0 / (1.0 + DEFAULT_EPS / var(&xs));
            assert!((var(&ys) - expected).abs() <= 1e-6);
        }
    }

    #[test]
    fn running_stats_updates() {
        let s = RunningStats::new(1);
        let m = Tensor::vector(vec![5.0]);
        let v = Tensor::vector(vec![2.0]);
        let one = update_running_stats(&s, &m, &v, 1.0).unwrap();
        assert_eq!(one.mean, m);
        assert_eq!(one.var, v);
        assert_eq!(one.step, 1);
        let zero = update_running_stats(&s, &m, &v, 0.0).unwrap();
        assert_eq!(zero.mean, s.mean);
        assert_eq!(zero.var, s.var);
        assert!(matches!(update_running_stats(&s, &m, &v, 1.5), Err(Error::Config(_))));

        // μ̄³ = 5·(1 − 0.9³)
        let mut cur = s;
        for _ in 0..3 {
            cur = update_running_stats(&cur, &m, &v, 0.1).unwrap();
        }
        assert!((cur.mean.item() - 1.355).abs() < 1e-12);
        assert_eq!(cur.step, 3);
    }

    #[test]
    fn rectifier_zero_is_half() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]).unwrap();
        let a = rectifier_weights(&x, &Tensor::zeros(&[1, 2]), DEFAULT_EPS).unwrap();
        assert_eq!(a.data(), &[0.5, 0.5]);
    }

    #[test]
    fn rectifier_mean_only() {
        // channel means 0, 1, −1
        let x = Tensor::from_rows(&[vec![-1.0, 1.0], vec![1.0, 1.0], vec![-2.0, 0.0]]).unwrap();
        let r = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let a = rectifier_weights(&x, &r, DEFAULT_EPS).unwrap();
        let expect = [0.5, sigmoid(1.0), sigmoid(-1.0)];
        for (got, want) in a.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!((a.data()[1] - 0.7311).abs() < 1e-4);
        assert!((a.data()[2] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn tape_rectifier_matches_matrix_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[3, 4, 5], &mut rng);
        let r = random(&[2, 2], &mut rng);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let rv = t.constant(r.clone());
        let a = rectifier_weights_var(&mut t, xv, rv, DEFAULT_EPS).unwrap();
        let a = t.value(a).clone();
        for n in 0..3 {
            let xn = Tensor::new(vec![4, 5], x.data()[n * 20..(n + 1) * 20].to_vec()).unwrap();
            let direct = rectifier_weights(&xn, &r, DEFAULT_EPS).unwrap();
            for c in 0..4 {
                assert!((a.data()[n * 4 + c] - direct.data()[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unknown_domain_and_degenerate_group() {
        let mut state = RdsbnState::with_domains(2, &[0, 1], true).unwrap();
        let mut t = Tape::new();
        let vars = state.bind(&mut t, false);
        let x = t.constant(Tensor::zeros(&[3, 2, 1]));
        assert!(matches!(rdsbn_forward(&mut t, x, &[0, 0, 7], &mut state, &vars, Mode::Train), Err(Error::UnknownDomain(7))));
        assert!(matches!(rdsbn_forward(&mut t, x, &[0, 0, 1], &mut state, &vars, Mode::Train), Err(Error::DegenerateBatch(_))));
        assert!(rdsbn_forward(&mut t, x, &[0, 0, 1], &mut state, &vars, Mode::Eval).is_ok());
        assert!(matches!(eval_branch_select(&state, 5), Err(Error::UnknownDomain(5))));
    }

    #[test]
    fn shifted_domains_share_standardized_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random(&[3, 2, 2], &mut rng);
        let shift = Tensor::new(vec![1, 2, 1], vec![4.0, -9.0]).unwrap();
        let moved = base.add(&shift).unwrap();
        let mut s0 = RunningStats::new(2);
        let mut s1 = RunningStats::new(2);
        let mut t = Tape::new();
        let a = t.constant(base);
        let b = t.constant(moved);
        let za = standardize(&mut t, a, &mut s0, DEFAULT_EPS, 0.1, Mode::Train).unwrap();
        let zb = standardize(&mut t, b, &mut s1, DEFAULT_EPS, 0.1, Mode::Train).unwrap();
        assert!(t.value(za).max_abs_diff(t.value(zb)) < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut state = RdsbnState::with_domains(3, &[0, 2], true).unwrap();
        for p in state.params_mut() {
            *p = random(p.shape(), &mut rng);
        }
        state.branch_mut(2).unwrap().stats.step = 9;
        let dir = tempfile::tempdir().unwrap();
        state.save(dir.path()).unwrap();
        let back = RdsbnState::load(dir.path()).unwrap();
        assert_eq!(back, state);
    }

    #[test]
    fn bind_order_matches_params() {
        let mut state = RdsbnState::with_domains(3, &[0, 1], true).unwrap();
        let mut t = Tape::new();
        let vars = state.bind(&mut t, true).vars();
        let params = state.params_mut();
        assert_eq!(vars.len(), params.len());
        for (v, p) in vars.iter().zip(params) {
            assert_eq!(t.value(*v), &*p);
        }
    }
}
