use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: `p ← p − lr·wd·p` before the moment update is applied.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per parameter, in binding order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reorders moments from the `old` parameter naming to `new`. Names that
    /// are new, or rejected by `keep`, start again from zero.
    pub fn remap(&mut self, old: &[String], new: &[String], keep: impl Fn(&str) -> bool) {
        let mut m = Vec::with_capacity(new.len());
        let mut v = Vec::with_capacity(new.len());
        for name in new {
            match old.iter().position(|o| o == name).filter(|&i| i < self.m.len() && keep(name)) {
                Some(i) => {
                    m.push(self.m[i].clone());
                    v.push(self.v[i].clone());
                }
                None => {
                    m.push(Tensor::zeros(&[0]));
                    v.push(Tensor::zeros(&[0]));
                }
            }
        }
        self.m = m;
        self.v = v;
    }

    /// Moments for parameters whose extent changed (or that are new) start
    /// again from zero. Bias correction stays global.
    fn align(&mut self, params: &[&mut Tensor]) {
        self.m.truncate(params.len());
        self.v.truncate(params.len());
        for (i, p) in params.iter().enumerate() {
            if i >= self.m.len() {
                self.m.push(Tensor::zeros(p.shape()));
                self.v.push(Tensor::zeros(p.shape()));
            } else if self.m[i].shape() != p.shape() {
                self.m[i] = Tensor::zeros(p.shape());
                self.v[i] = Tensor::zeros(p.shape());
            }
        }
    }
}

/// One Adam step with bias correction and decoupled weight decay.
pub fn adam_step(params: Vec<&mut Tensor>, grads: &[&Tensor], state: &mut OptimizerState, config: &AdamConfig, lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim("adam_step", &[params.len()], &[grads.len()]));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::dim("adam_step gradient", p.shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {i}")));
        }
    }
    state.align(&params);
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let pd = p.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            let mk = &mut m.data_mut()[k];
            *mk = b1 * *mk + (1.0 - b1) * gk;
            let mk = *mk;
            let vk = &mut v.data_mut()[k];
            *vk = b2 * *vk + (1.0 - b2) * gk * gk;
            let vk = *vk;
            let mhat = mk / c1;
            let vhat = vk / c2;
            pd[k] -= lr * config.weight_decay * pd[k];
            pd[k] -= lr * mhat / (vhat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Step decay: multiply by `gamma` at every milestone epoch already reached.
pub fn step_decay(base: f64, epoch: usize, milestones: &[usize], gamma: f64) -> f64 {
    base * gamma.powi(milestones.iter().filter(|&&m| epoch >= m).count() as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamConfig {
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![0.5]);
        let g = Tensor::vector(vec![1.0]);
        let mut s = OptimizerState::new();
        adam_step(vec![&mut p], &[&g], &mut s, &no_decay(), 0.001).unwrap();
        assert!((p.data()[0] - (0.5 - 0.001)).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = Tensor::vector(vec![0.3, -2.0]);
        let before = p.clone();
        let g = Tensor::zeros(&[2]);
        let mut s = OptimizerState::new();
        for _ in 0..5 {
            adam_step(vec![&mut p], &[&g], &mut s, &no_decay(), 0.01).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut p = Tensor::vector(vec![0.3, -2.0]);
        let before = p.clone();
        let g = Tensor::vector(vec![4.0, -1.0]);
        adam_step(vec![&mut p], &[&g], &mut OptimizerState::new(), &AdamConfig::default(), 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_step_is_bounded() {
        let lr = 0.01;
        let mut p = Tensor::vector(vec![0.0]);
        let g = Tensor::vector(vec![3.0]);
        let mut s = OptimizerState::new();
        for _ in 0..200 {
            let before = p.data()[0];
            adam_step(vec![&mut p], &[&g], &mut s, &no_decay(), lr).unwrap();
            assert!((p.data()[0] - before).abs() <= lr * (1.0 + 1e-9));
        }
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = Tensor::vector(vec![2.0]);
        let g = Tensor::zeros(&[1]);
        let cfg = AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        adam_step(vec![&mut p], &[&g], &mut OptimizerState::new(), &cfg, 0.1).unwrap();
        assert!((p.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = Tensor::vector(vec![1.0]);
        let g = Tensor::vector(vec![f64::NAN]);
        assert!(adam_step(vec![&mut p], &[&g], &mut OptimizerState::new(), &no_decay(), 0.1).is_err());
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn moments_reset_on_shape_change() {
        let mut s = OptimizerState::new();
        let mut a = Tensor::vector(vec![1.0]);
        adam_step(vec![&mut a], &[&Tensor::vector(vec![1.0])], &mut s, &no_decay(), 0.1).unwrap();
        let mut b = Tensor::zeros(&[2]);
        adam_step(vec![&mut b], &[&Tensor::zeros(&[2])], &mut s, &no_decay(), 0.1).unwrap();
        assert_eq!(s.m[0].shape(), &[2]);
        assert_eq!(b, Tensor::zeros(&[2]));
    }

    #[test]
    fn remap_follows_names() {
        let mut s = OptimizerState::new();
        let mut a = Tensor::vector(vec![1.0]);
        let mut b = Tensor::vector(vec![1.0, 2.0]);
        adam_step(vec![&mut a, &mut b], &[&Tensor::vector(vec![1.0]), &Tensor::vector(vec![2.0, 2.0])], &mut s, &no_decay(), 0.1).unwrap();
        let old = vec!["a".to_string(), "b".to_string()];
        let new = vec!["b".to_string(), "c".to_string(), "a".to_string()];
        let ma = s.m[0].clone();
        let mb = s.m[1].clone();
        s.remap(&old, &new, |n| n != "a");
        assert_eq!(s.m[0], mb);
        assert_eq!(s.m[1].numel(), 0);
        assert_ne!(s.m[2], ma);
    }

    #[test]
    fn milestones() {
        assert_eq!(step_decay(1.0, 39, &[40, 70], 0.1), 1.0);
        assert!((step_decay(1.0, 40, &[40, 70], 0.1) - 0.1).abs() < 1e-15);
        assert!((step_decay(1.0, 79, &[40, 70], 0.1) - 0.01).abs() < 1e-15);
    }
}
