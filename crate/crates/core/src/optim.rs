//! Base (unconstrained) optimizers: SGD with momentum and AdamW.
//!
//! State is kept per slot, where a slot is the position of a tensor in the
//! parameter collection the optimizer is driven with.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub trait BaseOptimizer {
    /// Applies one update to `param` in slot `slot` given its gradient.
    fn step(&mut self, slot: usize, param: &mut DenseMatrix, grad: &DenseMatrix) -> Result<()>;

    fn lr(&self) -> f64;

    fn set_lr(&mut self, lr: f64) -> Result<()>;

    /// Named tensors describing the optimizer's internal buffers.
    fn export_state(&self) -> Vec<(String, DenseMatrix)>;

    fn import_state(&mut self, entries: &[(String, DenseMatrix)]) -> Result<()>;
}

fn check_lr(lr: f64) -> Result<()> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!(
            "learning rate must be positive, got {lr}"
        )))
    }
}

fn slot_entry<T: Default>(slots: &mut Vec<T>, slot: usize) -> &mut T {
    if slots.len() <= slot {
        slots.resize_with(slot + 1, T::default);
    }
    &mut slots[slot]
}

fn parse_slot(key: &str, prefix: &str) -> Option<usize> {
    key.strip_prefix(prefix)?.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
}

impl SgdConfig {
    pub fn plain(lr: f64) -> Self {
        Self {
            lr,
            weight_decay: 0.0,
            momentum: 0.0,
            nesterov: false,
        }
    }
}

/// SGD with L2 weight decay folded into the gradient and optional
/// (Nesterov) momentum. The momentum buffer starts as the first gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    config: SgdConfig,
    buffers: Vec<Option<DenseMatrix>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Result<Self> {
        check_lr(config.lr)?;
        if !(config.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if config.nesterov && config.momentum == 0.0 {
            return Err(Error::config("nesterov momentum requires momentum > 0"));
        }
        Ok(Self {
            config,
            buffers: Vec::new(),
        })
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }
}

impl BaseOptimizer for Sgd {
    fn step(&mut self, slot: usize, param: &mut DenseMatrix, grad: &DenseMatrix) -> Result<()> {
        param.check_same_shape(grad, "sgd step")?;
        let SgdConfig {
            lr,
            weight_decay,
            momentum,
            nesterov,
        } = self.config;
        let mut d = grad.clone();
        if weight_decay != 0.0 {
            d.axpy(weight_decay, param)?;
        }
        if momentum != 0.0 {
            let buf = slot_entry(&mut self.buffers, slot);
            let b = match buf.take() {
                Some(mut b) => {
                    b.check_same_shape(&d, "sgd momentum buffer")?;
                    for (bv, &dv) in b.as_mut_slice().iter_mut().zip(d.as_slice()) {
                        *bv = momentum * *bv + dv;
                    }
                    b
                }
                None => d.clone(),
            };
            if nesterov {
                d.axpy(momentum, &b)?;
            } else {
                d = b.clone();
            }
            *buf = Some(b);
        }
        param.axpy(-lr, &d)
    }

    fn lr(&self) -> f64 {
        self.config.lr
    }

    fn set_lr(&mut self, lr: f64) -> Result<()> {
        check_lr(lr)?;
        self.config.lr = lr;
        Ok(())
    }

    fn export_state(&self) -> Vec<(String, DenseMatrix)> {
        self.buffers
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_ref().map(|b| (format!("sgd.buf.{i}"), b.clone())))
            .collect()
    }

    fn import_state(&mut self, entries: &[(String, DenseMatrix)]) -> Result<()> {
        self.buffers.clear();
        for (key, value) in entries {
            let slot = parse_slot(key, "sgd.buf.")
                .ok_or_else(|| Error::state(format!("unexpected SGD state entry `{key}`")))?;
            *slot_entry(&mut self.buffers, slot) = Some(value.clone());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct AdamSlot {
    m: Option<DenseMatrix>,
    v: Option<DenseMatrix>,
    t: u64,
}

/// Adam with decoupled weight decay: `w <- w (1 - lr * wd)` happens before
/// the bias-corrected moment step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    config: AdamWConfig,
    slots: Vec<AdamSlot>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        check_lr(config.lr)?;
        if !(config.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(Self {
            config,
            slots: Vec::new(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }
}

impl BaseOptimizer for AdamW {
    fn step(&mut self, slot: usize, param: &mut DenseMatrix, grad: &DenseMatrix) -> Result<()> {
        param.check_same_shape(grad, "adamw step")?;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let state = slot_entry(&mut self.slots, slot);
        let (rows, cols) = grad.shape();
        let m = state
            .m
            .get_or_insert_with(|| DenseMatrix::zeros(rows, cols));
        let v = state
            .v
            .get_or_insert_with(|| DenseMatrix::zeros(rows, cols));
        m.check_same_shape(grad, "adamw moments")?;
        state.t += 1;
        let bc1 = 1.0 - beta1.powi(state.t as i32);
        let bc2 = 1.0 - beta2.powi(state.t as i32);
        let decay = 1.0 - lr * weight_decay;
        for (((w, &g), mv), vv) in param
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(m.as_mut_slice())
            .zip(v.as_mut_slice())
        {
            if weight_decay != 0.0 {
                *w *= decay;
            }
            *mv = beta1 * *mv + (1.0 - beta1) * g;
            *vv = beta2 * *vv + (1.0 - beta2) * g * g;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    fn lr(&self) -> f64 {
        self.config.lr
    }

    fn set_lr(&mut self, lr: f64) -> Result<()> {
        check_lr(lr)?;
        self.config.lr = lr;
        Ok(())
    }

    fn export_state(&self) -> Vec<(String, DenseMatrix)> {
        let mut out = Vec::new();
        for (i, s) in self.slots.iter().enumerate() {
            if let (Some(m), Some(v)) = (&s.m, &s.v) {
                out.push((format!("adamw.m.{i}"), m.clone()));
                out.push((format!("adamw.v.{i}"), v.clone()));
                out.push((
                    format!("adamw.t.{i}"),
                    DenseMatrix::filled(1, 1, s.t as f64),
                ));
            }
        }
        out
    }

    fn import_state(&mut self, entries: &[(String, DenseMatrix)]) -> Result<()> {
        self.slots.clear();
        for (key, value) in entries {
            if let Some(i) = parse_slot(key, "adamw.m.") {
                slot_entry(&mut self.slots, i).m = Some(value.clone());
            } else if let Some(i) = parse_slot(key, "adamw.v.") {
                slot_entry(&mut self.slots, i).v = Some(value.clone());
            } else if let Some(i) = parse_slot(key, "adamw.t.") {
                slot_entry(&mut self.slots, i).t =
                    value.as_slice().first().copied().unwrap_or(0.0) as u64;
            } else {
                return Err(Error::state(format!(
                    "unexpected AdamW state entry `{key}`"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    Sgd,
    AdamW,
}

impl FromStr for BaseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" => Ok(BaseKind::Sgd),
            "adamw" | "adam" => Ok(BaseKind::AdamW),
            other => Err(Error::config(format!("unknown base optimizer `{other}`"))),
        }
    }
}

impl fmt::Display for BaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaseKind::Sgd => "sgd",
            BaseKind::AdamW => "adamw",
        })
    }
}

/// Hyper-parameters shared by every optimizer wrapper.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub kind: BaseKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
}

impl BaseConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: BaseKind::Sgd,
            lr,
            weight_decay: 0.0,
            momentum: 0.0,
            nesterov: false,
        }
    }

    pub fn build(&self) -> Result<BaseOpt> {
        Ok(match self.kind {
            BaseKind::Sgd => BaseOpt::Sgd(Sgd::new(SgdConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                momentum: self.momentum,
                nesterov: self.nesterov,
            })?),
            BaseKind::AdamW => {
                BaseOpt::AdamW(AdamW::new(AdamWConfig::new(self.lr, self.weight_decay))?)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BaseOpt {
    Sgd(Sgd),
    AdamW(AdamW),
}

impl BaseOptimizer for BaseOpt {
    fn step(&mut self, slot: usize, param: &mut DenseMatrix, grad: &DenseMatrix) -> Result<()> {
        match self {
            BaseOpt::Sgd(o) => o.step(slot, param, grad),
            BaseOpt::AdamW(o) => o.step(slot, param, grad),
        }
    }

    fn lr(&self) -> f64 {
        match self {
            BaseOpt::Sgd(o) => o.lr(),
            BaseOpt::AdamW(o) => o.lr(),
        }
    }

    fn set_lr(&mut self, lr: f64) -> Result<()> {
        match self {
            BaseOpt::Sgd(o) => o.set_lr(lr),
            BaseOpt::AdamW(o) => o.set_lr(lr),
        }
    }

    fn export_state(&self) -> Vec<(String, DenseMatrix)> {
        match self {
            BaseOpt::Sgd(o) => o.export_state(),
            BaseOpt::AdamW(o) => o.export_state(),
        }
    }

    fn import_state(&mut self, entries: &[(String, DenseMatrix)]) -> Result<()> {
        match self {
            BaseOpt::Sgd(o) => o.import_state(entries),
            BaseOpt::AdamW(o) => o.import_state(entries),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DenseMatrix {
        DenseMatrix::filled(1, 1, v)
    }

    #[test]
    fn sgd_plain_step() {
        let mut opt = Sgd::new(SgdConfig::plain(0.1)).unwrap();
        let mut w = scalar(1.0);
        opt.step(0, &mut w, &scalar(2.0)).unwrap();
        assert!((w.get(0, 0) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.9,
            ..SgdConfig::plain(0.1)
        })
        .unwrap();
        let mut w = scalar(1.0);
        opt.step(0, &mut w, &scalar(1.0)).unwrap();
        assert!((w.get(0, 0) - 0.9).abs() < 1e-15);
        opt.step(0, &mut w, &scalar(1.0)).unwrap();
        assert!((w.get(0, 0) - 0.71).abs() < 1e-15);
        let state = opt.export_state();
        assert!((state[0].1.get(0, 0) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_nesterov_and_decay() {
        // g' = g + wd w = 1 + 0.1 = 1.1; buf = 1.1; d = 1.1 + 0.9 * 1.1 = 2.09
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            weight_decay: 0.1,
            momentum: 0.9,
            nesterov: true,
        })
        .unwrap();
        let mut w = scalar(1.0);
        opt.step(0, &mut w, &scalar(1.0)).unwrap();
        assert!((w.get(0, 0) - (1.0 - 0.209)).abs() < 1e-14);
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut opt = Sgd::new(SgdConfig {
            momentum: 0.9,
            ..SgdConfig::plain(0.5)
        })
        .unwrap();
        let mut w = DenseMatrix::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let before = w.clone();
        for _ in 0..5 {
            opt.step(0, &mut w, &DenseMatrix::zeros(1, 2)).unwrap();
        }
        assert!(w.bitwise_eq(&before));
    }

    #[test]
    fn sgd_rejects_bad_config() {
        assert!(matches!(
            Sgd::new(SgdConfig::plain(0.0)),
            Err(Error::Config(_))
        ));
        assert!(Sgd::new(SgdConfig::plain(-1.0)).is_err());
        assert!(Sgd::new(SgdConfig {
            nesterov: true,
            ..SgdConfig::plain(0.1)
        })
        .is_err());
    }

    #[test]
    fn adamw_first_step() {
        let mut opt = AdamW::new(AdamWConfig::new(0.01, 0.0)).unwrap();
        let mut w = scalar(1.0);
        opt.step(0, &mut w, &scalar(1.0)).unwrap();
        assert!((w.get(0, 0) - (1.0 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adamw_decoupled_decay() {
        let mut opt = AdamW::new(AdamWConfig::new(0.01, 0.1)).unwrap();
        let mut w = scalar(1.0);
        opt.step(0, &mut w, &scalar(1.0)).unwrap();
        assert!((w.get(0, 0) - 0.989).abs() < 1e-9);
    }

    #[test]
    fn adamw_zero_gradient_constant() {
        let mut opt = AdamW::new(AdamWConfig::new(0.01, 0.0)).unwrap();
        let mut w = scalar(0.3);
        for _ in 0..10 {
            opt.step(0, &mut w, &scalar(0.0)).unwrap();
        }
        assert_eq!(w.get(0, 0), 0.3);
    }

    #[test]
    fn state_round_trip_continues_identically() {
        for kind in [BaseKind::Sgd, BaseKind::AdamW] {
            let cfg = BaseConfig {
                kind,
                lr: 0.05,
                weight_decay: 0.01,
                momentum: 0.9,
                nesterov: false,
            };
            let mut a = cfg.build().unwrap();
            let mut w = DenseMatrix::from_rows(&[vec![0.5, -0.25]]).unwrap();
            let g = DenseMatrix::from_rows(&[vec![0.1, 0.3]]).unwrap();
            a.step(1, &mut w, &g).unwrap();
            let mut b = cfg.build().unwrap();
            b.import_state(&a.export_state()).unwrap();
            let mut wa = w.clone();
            let mut wb = w.clone();
            a.step(1, &mut wa, &g).unwrap();
            b.step(1, &mut wb, &g).unwrap();
            assert!(wa.bitwise_eq(&wb), "{kind}");
        }
    }
}
