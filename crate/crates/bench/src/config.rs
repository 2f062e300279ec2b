//! Plain-text `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known and may appear at most once; keys not given keep their defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ftp_core::{Activation, BaseConfig, BaseKind, LossKind, MlpSpec};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ft,
    LinearProbe,
    LpFt,
    L2Sp,
    MarsSp,
    Tpgm,
    Ftp,
    HyperSgd,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ft,
        Method::LinearProbe,
        Method::LpFt,
        Method::L2Sp,
        Method::MarsSp,
        Method::Tpgm,
        Method::Ftp,
        Method::HyperSgd,
    ];

    /// Methods that keep tensors inside a norm ball around the anchor.
    pub fn is_projected(self) -> bool {
        matches!(self, Method::MarsSp | Method::Tpgm | Method::Ftp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ft => "ft",
            Method::LinearProbe => "linear-probe",
            Method::LpFt => "lp-ft",
            Method::L2Sp => "l2-sp",
            Method::MarsSp => "mars-sp",
            Method::Tpgm => "tpgm",
            Method::Ftp => "ftp",
            Method::HyperSgd => "hyper-sgd",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    Cosine,
}

impl Schedule {
    /// Learning rate at iteration `t` of `total`.
    pub fn lr_at(self, base: f64, t: u64, total: u64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let frac = if total == 0 {
                    0.0
                } else {
                    t as f64 / total as f64
                };
                // never exactly zero: the base optimizers reject lr = 0
                (0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())).max(base * 1e-3)
            }
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::config(format!("unknown schedule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub hidden: Vec<usize>,
    pub activation: Activation,

    pub method: Method,
    pub base: BaseKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub schedule: Schedule,
    /// Annealing factor for positive radius gradients.
    pub k: f64,
    /// Parameter names exempt from projection; `all` exempts every tensor.
    pub exclude_set: Vec<String>,
    pub tpgm_inner_iters: usize,
    pub mars_sp_gamma: f64,
    pub l2_sp_lambda: f64,
    /// Weight of the fine-tuned model in the final interpolation; 1 disables it.
    pub wise_ratio: f64,
    pub hyper_alpha0: f64,
    pub hyper_kappa: f64,
    pub lp_ft_probe_epochs: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Checkpoint of the pretrained model; pretraining runs when absent.
    pub pretrained: Option<PathBuf>,
    /// Save a resumable checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,

    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_momentum: f64,
    pub pretrain_batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            hidden: vec![64, 64],
            activation: Activation::Relu,
            method: Method::Ftp,
            base: BaseKind::Sgd,
            lr: 0.03,
            weight_decay: 5e-4,
            momentum: 0.9,
            nesterov: true,
            schedule: Schedule::Cosine,
            k: 1.0,
            exclude_set: Vec::new(),
            tpgm_inner_iters: 1,
            mars_sp_gamma: 1.0,
            l2_sp_lambda: 0.01,
            wise_ratio: 1.0,
            hyper_alpha0: 0.01,
            hyper_kappa: 1e-4,
            lp_ft_probe_epochs: 5,
            epochs: 40,
            batch_size: 20,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            pretrained: None,
            checkpoint_every: 0,
            pretrain_epochs: 30,
            pretrain_lr: 0.05,
            pretrain_momentum: 0.9,
            pretrain_batch_size: 50,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty() && *s != "none")
        .map(String::from)
        .collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    /// Every recognised key, in the order `to_text` writes them.
    pub const KEYS: &'static [&'static str] = &[
        "dataset.dim",
        "dataset.classes",
        "dataset.modes",
        "dataset.separation",
        "dataset.noise",
        "dataset.n_train",
        "dataset.n_test",
        "dataset.finetune_n",
        "dataset.finetune_val_n",
        "dataset.finetune_skew",
        "dataset.finetune_modes",
        "dataset.rotation_step",
        "dataset.translation_step",
        "dataset.noise_step",
        "dataset.dropout_step",
        "model.hidden",
        "model.activation",
        "method",
        "base",
        "lr",
        "weight_decay",
        "momentum",
        "nesterov",
        "schedule",
        "k",
        "exclude_set",
        "tpgm.inner_iters",
        "mars_sp.gamma",
        "l2_sp.lambda",
        "wise.ratio",
        "hyper.alpha0",
        "hyper.kappa",
        "lp_ft.probe_epochs",
        "epochs",
        "batch_size",
        "seed",
        "output_dir",
        "pretrained",
        "checkpoint_every",
        "pretrain.epochs",
        "pretrain.lr",
        "pretrain.momentum",
        "pretrain.batch_size",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.dataset;
        match key {
            "dataset.dim" => d.dim = parse(key, value)?,
            "dataset.classes" => d.classes = parse(key, value)?,
            "dataset.modes" => d.modes = parse(key, value)?,
            "dataset.separation" => d.separation = parse(key, value)?,
            "dataset.noise" => d.noise = parse(key, value)?,
            "dataset.n_train" => d.n_train = parse(key, value)?,
            "dataset.n_test" => d.n_test = parse(key, value)?,
            "dataset.finetune_n" => d.finetune_n = parse(key, value)?,
            "dataset.finetune_val_n" => d.finetune_val_n = parse(key, value)?,
            "dataset.finetune_skew" => d.finetune_skew = parse(key, value)?,
            "dataset.finetune_modes" => d.finetune_modes = parse(key, value)?,
            "dataset.rotation_step" => d.rotation_step = parse(key, value)?,
            "dataset.translation_step" => d.translation_step = parse(key, value)?,
            "dataset.noise_step" => d.noise_step = parse(key, value)?,
            "dataset.dropout_step" => d.dropout_step = parse(key, value)?,
            "model.hidden" => {
                self.hidden = parse_list(value)
                    .iter()
                    .map(|w| parse(key, w))
                    .collect::<Result<_>>()?
            }
            "model.activation" => self.activation = parse(key, value)?,
            "method" => self.method = value.parse()?,
            "base" => self.base = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "nesterov" => self.nesterov = parse_bool(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "k" => self.k = parse(key, value)?,
            "exclude_set" => self.exclude_set = parse_list(value),
            "tpgm.inner_iters" => self.tpgm_inner_iters = parse(key, value)?,
            "mars_sp.gamma" => self.mars_sp_gamma = parse(key, value)?,
            "l2_sp.lambda" => self.l2_sp_lambda = parse(key, value)?,
            "wise.ratio" => self.wise_ratio = parse(key, value)?,
            "hyper.alpha0" => self.hyper_alpha0 = parse(key, value)?,
            "hyper.kappa" => self.hyper_kappa = parse(key, value)?,
            "lp_ft.probe_epochs" => self.lp_ft_probe_epochs = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "pretrained" => {
                self.pretrained =
                    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "pretrain.epochs" => self.pretrain_epochs = parse(key, value)?,
            "pretrain.lr" => self.pretrain_lr = parse(key, value)?,
            "pretrain.momentum" => self.pretrain_momentum = parse(key, value)?,
            "pretrain.batch_size" => self.pretrain_batch_size = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let d = &self.dataset;
        Some(match key {
            "dataset.dim" => d.dim.to_string(),
            "dataset.classes" => d.classes.to_string(),
            "dataset.modes" => d.modes.to_string(),
            "dataset.separation" => d.separation.to_string(),
            "dataset.noise" => d.noise.to_string(),
            "dataset.n_train" => d.n_train.to_string(),
            "dataset.n_test" => d.n_test.to_string(),
            "dataset.finetune_n" => d.finetune_n.to_string(),
            "dataset.finetune_val_n" => d.finetune_val_n.to_string(),
            "dataset.finetune_skew" => d.finetune_skew.to_string(),
            "dataset.finetune_modes" => d.finetune_modes.to_string(),
            "dataset.rotation_step" => d.rotation_step.to_string(),
            "dataset.translation_step" => d.translation_step.to_string(),
            "dataset.noise_step" => d.noise_step.to_string(),
            "dataset.dropout_step" => d.dropout_step.to_string(),
            "model.hidden" => join(&self.hidden),
            "model.activation" => self.activation.to_string(),
            "method" => self.method.to_string(),
            "base" => self.base.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "momentum" => self.momentum.to_string(),
            "nesterov" => self.nesterov.to_string(),
            "schedule" => self.schedule.to_string(),
            "k" => self.k.to_string(),
            "exclude_set" => join(&self.exclude_set),
            "tpgm.inner_iters" => self.tpgm_inner_iters.to_string(),
            "mars_sp.gamma" => self.mars_sp_gamma.to_string(),
            "l2_sp.lambda" => self.l2_sp_lambda.to_string(),
            "wise.ratio" => self.wise_ratio.to_string(),
            "hyper.alpha0" => self.hyper_alpha0.to_string(),
            "hyper.kappa" => self.hyper_kappa.to_string(),
            "lp_ft.probe_epochs" => self.lp_ft_probe_epochs.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "seed" => self.seed.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "pretrained" => self
                .pretrained
                .as_ref()
                .map_or_else(|| "none".to_string(), |p| p.display().to_string()),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "pretrain.epochs" => self.pretrain_epochs.to_string(),
            "pretrain.lr" => self.pretrain_lr.to_string(),
            "pretrain.momentum" => self.pretrain_momentum.to_string(),
            "pretrain.batch_size" => self.pretrain_batch_size.to_string(),
            _ => return None,
        })
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| Error::config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Applies `key=value` overrides on top of the current values.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or_else(|| {
                Error::config(format!("override `{}` is not key=value", o.as_ref()))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.get(key).expect("listed key"));
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let bad = |msg: String| Err(Error::config(msg));
        if self.hidden.contains(&0) {
            return bad("model.hidden widths must be positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.pretrain_batch_size == 0 {
            return bad("epochs and batch sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.k) {
            return bad(format!("k must lie in [0, 1], got {}", self.k));
        }
        if !(0.0..=1.0).contains(&self.wise_ratio) {
            return bad(format!(
                "wise.ratio must lie in [0, 1], got {}",
                self.wise_ratio
            ));
        }
        if !(self.mars_sp_gamma >= 0.0) {
            return bad("mars_sp.gamma must be >= 0".into());
        }
        if !(self.l2_sp_lambda >= 0.0) {
            return bad("l2_sp.lambda must be >= 0".into());
        }
        if self.method == Method::Tpgm && self.dataset.finetune_val_n == 0 {
            return bad("tpgm needs dataset.finetune_val_n > 0".into());
        }
        self.base_config().build()?;
        BaseConfig {
            lr: self.pretrain_lr,
            momentum: self.pretrain_momentum,
            ..BaseConfig::sgd(self.pretrain_lr)
        }
        .build()?;
        Ok(())
    }

    pub fn base_config(&self) -> BaseConfig {
        BaseConfig {
            kind: self.base,
            lr: self.lr,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            nesterov: self.nesterov,
        }
    }

    pub fn model_spec(&self) -> Result<MlpSpec> {
        let mut widths = vec![self.dataset.dim];
        widths.extend(&self.hidden);
        widths.push(self.dataset.classes);
        Ok(MlpSpec::uniform(
            widths,
            self.activation,
            LossKind::SoftmaxCrossEntropy,
        )?)
    }
}
