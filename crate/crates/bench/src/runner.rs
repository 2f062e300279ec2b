//! Pretraining and stepwise fine-tuning with pass counting, constraint
//! auditing and resumable state.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use ftp_core::baselines::{
    apply_l2_sp, freeze_mask, mars_sp_step, tpgm_step, unfreeze_all, wise_interpolate_params,
    TpgmState,
};
use ftp_core::ftp::{
    ensure_gammas, ftp_step, is_projected, load_grads, unconstrained_step, values_of,
};
use ftp_core::hyper::{hyper_sgd_lr_step, HyperLrState};
use ftp_core::model::backward;
use ftp_core::rng::RngState;
use ftp_core::{
    mars_norm, BaseConfig, BaseOpt, BaseOptimizer, Batch, DenseMatrix, ExcludeSet, GammaState,
    ManagedParam, MlpSpec, NamedParams, SeededRng,
};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Method, Schedule};
use crate::dataset::{generate_shift_dataset, ShiftDataset};
use crate::error::{Error, Result};
use crate::evaluate::evaluate;
use crate::metrics::{IterRow, RunRecord, Summary};

/// Slack allowed by the per-iteration constraint audit.
pub const CONSTRAINT_TOL: f64 = 1e-9;

const STREAM_TRAIN: u64 = 1 << 20;
const STREAM_VALIDATION: u64 = 2 << 20;
const STREAM_PRETRAIN: u64 = 3 << 20;
const STREAM_INIT: u64 = 4 << 20;

/// Counts forward and backward passes. Every gradient evaluation here is
/// one forward plus one backward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCounter {
    pub fwd: u64,
    pub bwd: u64,
}

impl PassCounter {
    pub fn backward(
        &mut self,
        spec: &MlpSpec,
        params: &NamedParams,
        batch: &Batch,
    ) -> Result<(f64, NamedParams)> {
        self.fwd += 1;
        self.bwd += 1;
        Ok(backward(spec, params, batch)?)
    }
}

/// Indices of minibatch `pos` in epoch `epoch`; each epoch is an
/// independent shuffle so any iteration can be reconstructed directly.
fn minibatch(
    root: &SeededRng,
    stream: u64,
    n: usize,
    batch_size: usize,
    epoch: u64,
    pos: usize,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    root.fork(stream + epoch).shuffle(&mut order);
    let start = pos * batch_size;
    order[start..(start + batch_size).min(n)].to_vec()
}

fn batches_per_epoch(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub spec: MlpSpec,
    pub params: NamedParams,
    pub record: RunRecord,
}

impl Pretrained {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.spec.fingerprint(), self.record.rows.len() as u64);
        for (name, t) in self.params.iter() {
            c.put(format!("value/{name}"), t.clone());
        }
        c
    }

    pub fn load(path: &Path, spec: &MlpSpec) -> Result<NamedParams> {
        if !path.exists() {
            return Err(Error::persistence(format!(
                "pretrained checkpoint {} not found",
                path.display()
            )));
        }
        let c = Checkpoint::load(path)?;
        params_from_checkpoint(&c, spec, "value/")
    }
}

fn params_from_checkpoint(c: &Checkpoint, spec: &MlpSpec, prefix: &str) -> Result<NamedParams> {
    if c.spec_hash != spec.fingerprint() {
        return Err(Error::persistence(format!(
            "checkpoint was written for a different model (hash {:016x}, expected {:016x})",
            c.spec_hash,
            spec.fingerprint()
        )));
    }
    let mut out = NamedParams::new();
    for name in spec.param_names() {
        out.insert(name.clone(), c.require(&format!("{prefix}{name}"))?.clone())?;
    }
    Ok(out)
}

/// Trains a freshly initialised network on the full clean training pool with
/// SGD + momentum and a cosine schedule.
pub fn pretrain(cfg: &ExperimentConfig, data: &ShiftDataset) -> Result<Pretrained> {
    let spec = cfg.model_spec()?;
    let root = SeededRng::new(cfg.seed);
    let params = spec.init_params(&mut root.fork(STREAM_INIT));
    let mut managed = ManagedParam::from_named(&params)?;
    let mut base = BaseConfig {
        momentum: cfg.pretrain_momentum,
        nesterov: false,
        weight_decay: cfg.weight_decay,
        ..BaseConfig::sgd(cfg.pretrain_lr)
    }
    .build()?;
    let n = data.train.len();
    let bpe = batches_per_epoch(n, cfg.pretrain_batch_size);
    let total = bpe * cfg.pretrain_epochs as u64;
    let mut counter = PassCounter::default();
    let mut record = RunRecord::new(Vec::new());
    for t in 0..total {
        let start = Instant::now();
        base.set_lr(Schedule::Cosine.lr_at(cfg.pretrain_lr, t, total))?;
        let idx = minibatch(
            &root,
            STREAM_PRETRAIN,
            n,
            cfg.pretrain_batch_size,
            t / bpe,
            (t % bpe) as usize,
        );
        let (loss, grads) =
            counter.backward(&spec, &values_of(&managed), &data.train.batch(&idx))?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iter: t + 1, loss });
        }
        load_grads(&mut managed, &grads)?;
        unconstrained_step(&mut managed, &mut base)?;
        record.rows.push(IterRow {
            iter: t + 1,
            loss,
            secs_per_iter: start.elapsed().as_secs_f64(),
            fwd_count: counter.fwd,
            bwd_count: counter.bwd,
            gammas: Vec::new(),
        });
    }
    Ok(Pretrained {
        spec,
        params: values_of(&managed),
        record,
    })
}

/// Method-specific state beyond the parameters and base optimizer.
#[derive(Debug, Clone)]
enum MethodState {
    Plain,
    Ftp(BTreeMap<String, GammaState>),
    Tpgm(TpgmState),
    MarsSp(f64),
    Hyper(HyperLrState),
}

/// One fine-tuning run advanced an iteration at a time.
pub struct FineTuner<'a> {
    pub cfg: ExperimentConfig,
    pub spec: MlpSpec,
    data: &'a ShiftDataset,
    pub params: Vec<ManagedParam>,
    base: BaseOpt,
    exclude: ExcludeSet,
    state: MethodState,
    root: SeededRng,
    pub iteration: u64,
    pub counter: PassCounter,
    pub record: RunRecord,
    probe_iters: u64,
}

impl<'a> FineTuner<'a> {
    pub fn new(
        cfg: &ExperimentConfig,
        data: &'a ShiftDataset,
        pretrained: &NamedParams,
    ) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.model_spec()?;
        if data.spec.classes != spec.output_width() || data.spec.dim != spec.input_width() {
            return Err(Error::config("dataset shape does not match the model"));
        }
        let mut params = ManagedParam::from_named(pretrained)?;
        let exclude = if cfg.exclude_set.iter().any(|n| n == "all") {
            ExcludeSet::all(&params)
        } else {
            ExcludeSet::new(&cfg.exclude_set, &params)?
        };
        let base = cfg.base_config().build()?;
        let state = match cfg.method {
            Method::Ftp => {
                let mut g = BTreeMap::new();
                ensure_gammas(&params, &mut g, &exclude, cfg.k)?;
                MethodState::Ftp(g)
            }
            Method::Tpgm => {
                MethodState::Tpgm(TpgmState::new(&params, &exclude, cfg.tpgm_inner_iters)?)
            }
            Method::MarsSp => MethodState::MarsSp(cfg.mars_sp_gamma),
            Method::HyperSgd => {
                MethodState::Hyper(HyperLrState::new(cfg.hyper_alpha0, cfg.hyper_kappa)?)
            }
            _ => MethodState::Plain,
        };
        let bpe = batches_per_epoch(data.finetune.len(), cfg.batch_size);
        let probe_iters = match cfg.method {
            Method::LinearProbe => u64::MAX,
            Method::LpFt => bpe * cfg.lp_ft_probe_epochs as u64,
            _ => 0,
        };
        if probe_iters > 0 {
            freeze_mask(&mut params, &head_names(&spec))?;
        }
        let gamma_names = match &state {
            MethodState::Ftp(g) => g.keys().cloned().collect(),
            MethodState::Tpgm(t) => t.gammas.keys().cloned().collect(),
            MethodState::MarsSp(_) => params
                .iter()
                .filter(|p| is_projected(p, &exclude))
                .map(|p| p.name.clone())
                .collect(),
            _ => Vec::new(),
        };
        Ok(Self {
            cfg: cfg.clone(),
            spec,
            data,
            params,
            base,
            exclude,
            state,
            root: SeededRng::new(cfg.seed),
            iteration: 0,
            counter: PassCounter::default(),
            record: RunRecord::new(gamma_names),
            probe_iters,
        })
    }

    pub fn total_iters(&self) -> u64 {
        batches_per_epoch(self.data.finetune.len(), self.cfg.batch_size) * self.cfg.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.total_iters()
    }

    pub fn values(&self) -> NamedParams {
        values_of(&self.params)
    }

    pub fn anchors(&self) -> NamedParams {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.anchor.clone()))
            .collect()
    }

    /// Current radius of every constrained tensor, keyed by name.
    pub fn gammas(&self) -> BTreeMap<String, f64> {
        match &self.state {
            MethodState::Ftp(g) => g.iter().map(|(n, s)| (n.clone(), s.gamma)).collect(),
            MethodState::Tpgm(t) => t.gammas.iter().map(|(n, s)| (n.clone(), s.gamma)).collect(),
            MethodState::MarsSp(g) => self
                .record
                .gamma_names
                .iter()
                .map(|n| (n.clone(), *g))
                .collect(),
            _ => BTreeMap::new(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match &self.state {
            MethodState::Hyper(h) => h.alpha,
            _ => self.base.lr(),
        }
    }

    fn train_batch(&self, t: u64) -> Batch {
        let n = self.data.finetune.len();
        let bpe = batches_per_epoch(n, self.cfg.batch_size);
        let idx = minibatch(
            &self.root,
            STREAM_TRAIN,
            n,
            self.cfg.batch_size,
            t / bpe,
            (t % bpe) as usize,
        );
        self.data.finetune.batch(&idx)
    }

    /// Advances one iteration and returns the logged row.
    pub fn step(&mut self) -> Result<&IterRow> {
        let t = self.iteration;
        let start = Instant::now();
        if t == self.probe_iters && self.probe_iters > 0 {
            unfreeze_all(&mut self.params);
        }
        if !matches!(self.state, MethodState::Hyper(_)) {
            let total = self.total_iters();
            self.base
                .set_lr(self.cfg.schedule.lr_at(self.cfg.lr, t, total))?;
        }
        let batch = self.train_batch(t);
        let (loss, grads) = self
            .counter
            .backward(&self.spec, &values_of(&self.params), &batch)?;
        if !loss.is_finite() {
            return Err(self.diverged(t, loss, start));
        }
        load_grads(&mut self.params, &grads)?;

        match &mut self.state {
            MethodState::Plain => {
                if self.cfg.method == Method::L2Sp {
                    apply_l2_sp(&mut self.params, self.cfg.l2_sp_lambda)?;
                }
                unconstrained_step(&mut self.params, &mut self.base)?;
            }
            MethodState::Ftp(gammas) => {
                ftp_step(&mut self.params, gammas, &mut self.base, &self.exclude)?
            }
            MethodState::MarsSp(gamma) => {
                mars_sp_step(&mut self.params, &mut self.base, *gamma, &self.exclude)?
            }
            MethodState::Hyper(h) => hyper_sgd_lr_step(h, &mut self.params)?,
            MethodState::Tpgm(state) => {
                let split = &self.data.validation;
                let (spec, root, counter) = (&self.spec, &self.root, &mut self.counter);
                let bs = self.cfg.batch_size;
                let bpe = batches_per_epoch(split.len(), bs);
                let mut draw = t * state.inner_iters as u64;
                let mut source = |probe: &NamedParams| -> ftp_core::Result<Option<NamedParams>> {
                    let idx = minibatch(
                        root,
                        STREAM_VALIDATION,
                        split.len(),
                        bs,
                        draw / bpe,
                        (draw % bpe) as usize,
                    );
                    draw += 1;
                    let (_, g) = counter
                        .backward(spec, probe, &split.batch(&idx))
                        .map_err(|e| ftp_core::Error::State(e.to_string()))?;
                    Ok(Some(g))
                };
                tpgm_step(
                    &mut self.params,
                    state,
                    &mut self.base,
                    &self.exclude,
                    &mut source,
                )?;
            }
        }
        if self.params.iter().any(|p| !p.value.is_finite()) {
            return Err(self.diverged(t, f64::NAN, start));
        }
        self.audit_constraints(t + 1)?;

        self.iteration = t + 1;
        let gammas = self.gammas();
        let row = IterRow {
            iter: t + 1,
            loss,
            secs_per_iter: start.elapsed().as_secs_f64(),
            fwd_count: self.counter.fwd,
            bwd_count: self.counter.bwd,
            gammas: self.record.gamma_names.iter().map(|n| gammas[n]).collect(),
        };
        self.record.rows.push(row);
        Ok(self.record.rows.last().expect("just pushed"))
    }

    fn diverged(&mut self, t: u64, loss: f64, start: Instant) -> Error {
        let gammas = self.gammas();
        self.record.rows.push(IterRow {
            iter: t + 1,
            loss,
            secs_per_iter: start.elapsed().as_secs_f64(),
            fwd_count: self.counter.fwd,
            bwd_count: self.counter.bwd,
            gammas: self
                .record
                .gamma_names
                .iter()
                .map(|n| gammas.get(n).copied().unwrap_or(f64::NAN))
                .collect(),
        });
        Error::Diverged { iter: t + 1, loss }
    }

    fn audit_constraints(&self, iter: u64) -> Result<()> {
        for (name, gamma) in self.gammas() {
            let p = self
                .params
                .iter()
                .find(|p| p.name == name)
                .expect("radius of a known tensor");
            if !is_projected(p, &self.exclude) {
                continue;
            }
            let dist = mars_norm(&p.value.sub(&p.anchor)?)?;
            if dist > gamma + CONSTRAINT_TOL {
                return Err(Error::Constraint {
                    iter,
                    name,
                    dist,
                    gamma,
                });
            }
        }
        Ok(())
    }

    pub fn run_to(&mut self, iteration: u64) -> Result<()> {
        while self.iteration < iteration {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_to(self.total_iters())
    }

    /// Final weights, interpolated towards the anchor when `wise.ratio < 1`.
    pub fn final_params(&self) -> Result<NamedParams> {
        let values = self.values();
        if self.cfg.wise_ratio < 1.0 {
            Ok(wise_interpolate_params(
                &values,
                &self.anchors(),
                self.cfg.wise_ratio,
            )?)
        } else {
            Ok(values)
        }
    }

    pub fn summary(&self) -> Result<Summary> {
        let accuracy = evaluate(&self.spec, &self.final_params()?, self.data)?;
        let n = self.record.rows.len().max(1) as f64;
        Ok(Summary {
            method: self.cfg.method.to_string(),
            seed: self.cfg.seed,
            iterations: self.iteration,
            final_loss: self.record.rows.last().map_or(f64::NAN, |r| r.loss),
            fwd_count: self.counter.fwd,
            bwd_count: self.counter.bwd,
            mean_secs_per_iter: self
                .record
                .rows
                .iter()
                .map(|r| r.secs_per_iter)
                .sum::<f64>()
                / n,
            final_gammas: self.gammas(),
            accuracy,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.spec.fingerprint(), self.iteration);
        c.put_u64s(
            "meta/method",
            &[Method::ALL
                .iter()
                .position(|m| *m == self.cfg.method)
                .unwrap() as u64],
        );
        c.put_u64s("meta/counts", &[self.counter.fwd, self.counter.bwd]);
        let rng = self.root.state();
        c.put_u64s(
            "meta/rng",
            &[
                rng.seed,
                rng.stream,
                rng.word_pos as u64,
                (rng.word_pos >> 64) as u64,
            ],
        );
        for p in &self.params {
            c.put(format!("value/{}", p.name), p.value.clone());
            c.put(format!("anchor/{}", p.name), p.anchor.clone());
            if let Some(prev) = &p.prev_unconstrained {
                c.put(format!("prev/{}", p.name), prev.clone());
            }
            c.put_u64s(format!("frozen/{}", p.name), &[p.frozen as u64]);
        }
        c.put_scalars("opt/lr", &[self.base.lr()]);
        for (key, m) in self.base.export_state() {
            c.put(format!("opt/{key}"), m);
        }
        match &self.state {
            MethodState::Ftp(g) => put_gammas(&mut c, "gamma/", g),
            MethodState::Tpgm(t) => put_gammas(&mut c, "tpgm/", &t.gammas),
            MethodState::Hyper(h) => {
                c.put_scalars("hyper/alpha", &[h.alpha, h.kappa]);
                if let Some(prev) = &h.prev_grad {
                    c.put_scalars("hyper/prev", prev);
                }
            }
            MethodState::Plain | MethodState::MarsSp(_) => {}
        }
        put_record(&mut c, &self.record);
        c
    }

    /// Rebuilds a run from a checkpoint written by [`FineTuner::to_checkpoint`].
    pub fn from_checkpoint(
        cfg: &ExperimentConfig,
        data: &'a ShiftDataset,
        c: &Checkpoint,
    ) -> Result<Self> {
        let spec = cfg.model_spec()?;
        let anchors = params_from_checkpoint(c, &spec, "anchor/")?;
        let mut run = FineTuner::new(cfg, data, &anchors)?;
        let method = c.u64s("meta/method")?;
        if method.first().map(|&i| Method::ALL.get(i as usize)) != Some(Some(&cfg.method)) {
            return Err(Error::persistence(
                "checkpoint was written by a different method",
            ));
        }
        let counts = c.u64s("meta/counts")?;
        let rng = c.u64s("meta/rng")?;
        if counts.len() != 2 || rng.len() != 4 {
            return Err(Error::persistence("malformed run metadata"));
        }
        run.counter = PassCounter {
            fwd: counts[0],
            bwd: counts[1],
        };
        run.root = SeededRng::from_state(RngState {
            seed: rng[0],
            stream: rng[1],
            word_pos: rng[2] as u128 | (rng[3] as u128) << 64,
        });
        for p in run.params.iter_mut() {
            p.value = c.require(&format!("value/{}", p.name))?.clone();
            p.prev_unconstrained = c.get(&format!("prev/{}", p.name)).cloned();
            p.frozen = c.u64s(&format!("frozen/{}", p.name))?.first() == Some(&1);
        }
        run.base.set_lr(c.scalars("opt/lr")?[0])?;
        let opt: Vec<(String, DenseMatrix)> = c
            .with_prefix("opt/")
            .filter(|(k, _)| *k != "lr")
            .map(|(k, m)| (k.to_string(), m.clone()))
            .collect();
        run.base.import_state(&opt)?;
        match &mut run.state {
            MethodState::Ftp(g) => *g = get_gammas(c, "gamma/")?,
            MethodState::Tpgm(t) => t.gammas = get_gammas(c, "tpgm/")?,
            MethodState::Hyper(h) => {
                let a = c.scalars("hyper/alpha")?;
                h.alpha = a[0];
                h.kappa = a[1];
                h.prev_grad = c.get("hyper/prev").map(|m| m.as_slice().to_vec());
            }
            MethodState::Plain | MethodState::MarsSp(_) => {}
        }
        run.record = get_record(c, run.record.gamma_names.clone())?;
        run.iteration = c.iteration;
        Ok(run)
    }
}

fn head_names(spec: &MlpSpec) -> Vec<String> {
    let last = spec.num_layers() - 1;
    vec![MlpSpec::weight_name(last), MlpSpec::bias_name(last)]
}

fn put_gammas(c: &mut Checkpoint, prefix: &str, gammas: &BTreeMap<String, GammaState>) {
    for (name, s) in gammas {
        c.put_scalars(
            format!("{prefix}{name}"),
            &[
                s.gamma,
                s.m,
                s.v,
                f64::from_bits(s.t),
                s.kappa,
                s.mu,
                s.beta1,
                s.beta2,
                s.eps,
            ],
        );
    }
}

fn get_gammas(c: &Checkpoint, prefix: &str) -> Result<BTreeMap<String, GammaState>> {
    c.with_prefix(prefix)
        .map(|(name, m)| {
            let v = m.as_slice();
            if v.len() != 9 {
                return Err(Error::persistence(format!(
                    "radius state of `{name}` has {} fields",
                    v.len()
                )));
            }
            Ok((
                name.to_string(),
                GammaState {
                    gamma: v[0],
                    m: v[1],
                    v: v[2],
                    t: v[3].to_bits(),
                    kappa: v[4],
                    mu: v[5],
                    beta1: v[6],
                    beta2: v[7],
                    eps: v[8],
                },
            ))
        })
        .collect()
}

fn put_record(c: &mut Checkpoint, record: &RunRecord) {
    let rows = &record.rows;
    c.put_u64s(
        "record/iter",
        &rows.iter().map(|r| r.iter).collect::<Vec<_>>(),
    );
    c.put_scalars(
        "record/loss",
        &rows.iter().map(|r| r.loss).collect::<Vec<_>>(),
    );
    c.put_scalars(
        "record/secs",
        &rows.iter().map(|r| r.secs_per_iter).collect::<Vec<_>>(),
    );
    c.put_u64s(
        "record/fwd",
        &rows.iter().map(|r| r.fwd_count).collect::<Vec<_>>(),
    );
    c.put_u64s(
        "record/bwd",
        &rows.iter().map(|r| r.bwd_count).collect::<Vec<_>>(),
    );
    let k = record.gamma_names.len();
    let mut g = DenseMatrix::zeros(rows.len(), k);
    for (i, r) in rows.iter().enumerate() {
        g.row_mut(i).copy_from_slice(&r.gammas);
    }
    c.put("record/gamma", g);
}

fn get_record(c: &Checkpoint, gamma_names: Vec<String>) -> Result<RunRecord> {
    let iters = c.u64s("record/iter")?;
    let loss = c.scalars("record/loss")?;
    let secs = c.scalars("record/secs")?;
    let fwd = c.u64s("record/fwd")?;
    let bwd = c.u64s("record/bwd")?;
    let g = c.require("record/gamma")?;
    let n = iters.len();
    if [loss.len(), secs.len(), fwd.len(), bwd.len(), g.rows()] != [n; 5]
        || g.cols() != gamma_names.len()
    {
        return Err(Error::persistence(
            "metric history arrays disagree in length",
        ));
    }
    let rows = (0..n)
        .map(|i| IterRow {
            iter: iters[i],
            loss: loss[i],
            secs_per_iter: secs[i],
            fwd_count: fwd[i],
            bwd_count: bwd[i],
            gammas: g.row(i).to_vec(),
        })
        .collect();
    Ok(RunRecord { gamma_names, rows })
}

/// Loads the configured pretrained checkpoint, or pretrains and saves one
/// under the output directory when none is configured.
pub fn obtain_pretrained(cfg: &ExperimentConfig, data: &ShiftDataset) -> Result<NamedParams> {
    let spec = cfg.model_spec()?;
    match &cfg.pretrained {
        Some(path) => Pretrained::load(path, &spec),
        None => {
            let p = pretrain(cfg, data)?;
            p.to_checkpoint()
                .save(&cfg.output_dir.join("pretrained.ckpt"))?;
            Ok(p.params)
        }
    }
}

pub struct RunOutput {
    pub record: RunRecord,
    pub summary: Summary,
}

/// Dataset generation, pretraining when needed, fine-tuning, evaluation and
/// all file outputs for one configuration.
pub fn run_experiment(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<RunOutput> {
    let data = generate_shift_dataset(&cfg.dataset, cfg.seed)?;
    let mut run = match resume {
        Some(path) => FineTuner::from_checkpoint(cfg, &data, &Checkpoint::load(path)?)?,
        None => {
            let pretrained = obtain_pretrained(cfg, &data)?;
            FineTuner::new(cfg, &data, &pretrained)?
        }
    };
    let dir = &cfg.output_dir;
    crate::metrics::write_text(&dir.join("config.txt"), &cfg.to_text())?;
    while !run.is_done() {
        if let Err(e) = run.step() {
            run.record.write(dir)?;
            return Err(e);
        }
        if cfg.checkpoint_every > 0 && run.iteration % cfg.checkpoint_every == 0 {
            run.to_checkpoint().save(&dir.join("checkpoint.ckpt"))?;
        }
    }
    run.record.write(dir)?;
    run.to_checkpoint().save(&dir.join("final.ckpt"))?;
    let summary = run.summary()?;
    summary.write(&dir.join("summary.json"))?;
    Ok(RunOutput {
        record: run.record,
        summary,
    })
}

/// Fine-tuning inputs and evaluation targets without the file outputs, for
/// callers that already hold a dataset and pretrained weights.
pub fn finetune_in_memory(
    cfg: &ExperimentConfig,
    data: &ShiftDataset,
    pretrained: &NamedParams,
) -> Result<RunOutput> {
    let mut run = FineTuner::new(cfg, data, pretrained)?;
    run.run()?;
    let summary = run.summary()?;
    Ok(RunOutput {
        record: run.record,
        summary,
    })
}
