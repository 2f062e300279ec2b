//! Gaussian-mixture classification data with parametric input shifts.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ftp_core::{Batch, DenseMatrix, SeededRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEVERITIES: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    Rotation,
    Translation,
    AdditiveNoise,
    FeatureDropout,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [
        ShiftKind::Rotation,
        ShiftKind::Translation,
        ShiftKind::AdditiveNoise,
        ShiftKind::FeatureDropout,
    ];

    fn stream(self) -> u64 {
        match self {
            ShiftKind::Rotation => 0,
            ShiftKind::Translation => 1,
            ShiftKind::AdditiveNoise => 2,
            ShiftKind::FeatureDropout => 3,
        }
    }
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::Rotation => "rotation",
            ShiftKind::Translation => "translation",
            ShiftKind::AdditiveNoise => "additive-noise",
            ShiftKind::FeatureDropout => "feature-dropout",
        })
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShiftKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown shift kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub dim: usize,
    pub classes: usize,
    /// Mixture components per class.
    pub modes: usize,
    /// Distance of each component mean from the origin.
    pub separation: f64,
    pub noise: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Size of the fine-tuning subsample drawn from the training pool.
    pub finetune_n: usize,
    pub finetune_val_n: usize,
    /// Class `c` receives weight `skew^c` in the fine-tuning subsample.
    pub finetune_skew: f64,
    /// Only the first `finetune_modes` components of each class are eligible.
    pub finetune_modes: usize,
    /// Per-severity step sizes of the shifts.
    pub rotation_step: f64,
    pub translation_step: f64,
    pub noise_step: f64,
    pub dropout_step: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            classes: 4,
            modes: 2,
            separation: 3.0,
            noise: 1.0,
            n_train: 2000,
            n_test: 1000,
            finetune_n: 200,
            finetune_val_n: 100,
            finetune_skew: 0.6,
            finetune_modes: 1,
            rotation_step: 0.15,
            translation_step: 0.5,
            noise_step: 0.4,
            dropout_step: 0.12,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(format!("dataset: {msg}")));
        if self.classes < 2 {
            return bad("need at least 2 classes");
        }
        if self.dim == 0 || self.modes == 0 {
            return bad("dim and modes must be positive");
        }
        if self.n_train < self.classes || self.n_test < self.classes {
            return bad("every class needs at least one sample per split");
        }
        if !(self.noise >= 0.0) || !(self.separation >= 0.0) {
            return bad("noise and separation must be >= 0");
        }
        if self.finetune_n == 0 || !(self.finetune_skew > 0.0 && self.finetune_skew <= 1.0) {
            return bad("finetune_n must be positive and finetune_skew in (0, 1]");
        }
        if self.finetune_modes == 0 || self.finetune_modes > self.modes {
            return bad("finetune_modes must lie in 1..=modes");
        }
        for (name, v) in [
            ("rotation_step", self.rotation_step),
            ("translation_step", self.translation_step),
            ("noise_step", self.noise_step),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be >= 0"));
            }
        }
        if !(0.0..=0.2).contains(&self.dropout_step) {
            return bad("dropout_step must lie in [0, 0.2] so severity 5 keeps some features");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Split {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.inputs.row(i)).collect();
        let mut data = Vec::with_capacity(rows.len() * self.inputs.cols());
        for r in rows {
            data.extend_from_slice(r);
        }
        Split {
            inputs: DenseMatrix::from_vec(indices.len(), self.inputs.cols(), data)
                .expect("rows copied from a valid matrix"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let s = self.subset(indices);
        Batch::classification(s.inputs, s.labels)
    }

    pub fn as_batch(&self) -> Batch {
        Batch::classification(self.inputs.clone(), self.labels.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftDataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    /// Pretraining pool.
    pub train: Split,
    /// Held-out in-distribution evaluation split.
    pub clean: Split,
    /// Narrow, label-skewed fine-tuning subsample of the pool.
    pub finetune: Split,
    /// Disjoint subsample with the same skew, used by validation-driven methods.
    pub validation: Split,
    pub ood: BTreeMap<(ShiftKind, u8), Split>,
}

impl ShiftDataset {
    pub fn split(&self, kind: ShiftKind, severity: u8) -> Result<&Split> {
        match severity {
            0 => Ok(&self.clean),
            s if s <= SEVERITIES => Ok(&self.ood[&(kind, s)]),
            s => Err(Error::config(format!(
                "severity must lie in 0..={SEVERITIES}, got {s}"
            ))),
        }
    }
}

struct Mixture {
    means: Vec<Vec<Vec<f64>>>,
}

impl Mixture {
    fn new(spec: &DatasetSpec, rng: &mut SeededRng) -> Self {
        let means = (0..spec.classes)
            .map(|_| {
                (0..spec.modes)
                    .map(|_| {
                        let v: Vec<f64> = (0..spec.dim).map(|_| rng.standard_normal()).collect();
                        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                        v.into_iter().map(|x| x * spec.separation / norm).collect()
                    })
                    .collect()
            })
            .collect();
        Self { means }
    }

    /// Balanced draw: sample `i` belongs to class `i % classes`; components
    /// alternate within each class. Returns the split and each sample's component.
    fn draw(&self, spec: &DatasetSpec, n: usize, rng: &mut SeededRng) -> (Split, Vec<usize>) {
        let mut data = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        let mut modes = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.classes;
            let m = (i / spec.classes) % spec.modes;
            for &mu in &self.means[c][m] {
                data.push(mu + spec.noise * rng.standard_normal());
            }
            labels.push(c);
            modes.push(m);
        }
        let inputs = DenseMatrix::from_vec(n, spec.dim, data).expect("finite samples");
        (Split { inputs, labels }, modes)
    }
}

fn skewed_counts(total: usize, classes: usize, skew: f64) -> Vec<usize> {
    let weights: Vec<f64> = (0..classes).map(|c| skew.powi(c as i32)).collect();
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let missing = total - counts.iter().sum::<usize>();
    for &c in order.iter().take(missing) {
        counts[c] += 1;
    }
    counts
}

pub fn apply_shift(
    inputs: &DenseMatrix,
    kind: ShiftKind,
    severity: u8,
    spec: &DatasetSpec,
    rng: &mut SeededRng,
) -> DenseMatrix {
    let s = severity as f64;
    let mut out = inputs.clone();
    match kind {
        ShiftKind::Rotation => {
            let (sin, cos) = (s * spec.rotation_step).sin_cos();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                for pair in row.chunks_exact_mut(2) {
                    let (a, b) = (pair[0], pair[1]);
                    pair[0] = cos * a - sin * b;
                    pair[1] = sin * a + cos * b;
                }
            }
        }
        ShiftKind::Translation => {
            let dir: Vec<f64> = (0..out.cols()).map(|_| rng.standard_normal()).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let offset: Vec<f64> = dir
                .iter()
                .map(|d| d / norm * s * spec.translation_step * spec.separation)
                .collect();
            for r in 0..out.rows() {
                for (x, o) in out.row_mut(r).iter_mut().zip(&offset) {
                    *x += o;
                }
            }
        }
        ShiftKind::AdditiveNoise => {
            let sigma = s * spec.noise_step * spec.noise.max(1e-12);
            for r in 0..out.rows() {
                for x in out.row_mut(r) {
                    *x += sigma * rng.standard_normal();
                }
            }
        }
        ShiftKind::FeatureDropout => {
            let p = s * spec.dropout_step;
            for r in 0..out.rows() {
                for x in out.row_mut(r) {
                    if rng.uniform() < p {
                        *x = 0.0;
                    }
                }
            }
        }
    }
    out
}

pub fn generate_shift_dataset(spec: &DatasetSpec, seed: u64) -> Result<ShiftDataset> {
    spec.validate()?;
    let root = SeededRng::new(seed);
    let mixture = Mixture::new(spec, &mut root.fork(0));
    let (train, train_modes) = mixture.draw(spec, spec.n_train, &mut root.fork(1));
    let (clean, _) = mixture.draw(spec, spec.n_test, &mut root.fork(2));

    let mut pick = root.fork(3);
    let ft_counts = skewed_counts(spec.finetune_n, spec.classes, spec.finetune_skew);
    let val_counts = skewed_counts(spec.finetune_val_n, spec.classes, spec.finetune_skew);
    let mut ft_idx = Vec::new();
    let mut val_idx = Vec::new();
    for c in 0..spec.classes {
        let eligible: Vec<usize> = (0..train.len())
            .filter(|&i| train.labels[i] == c && train_modes[i] < spec.finetune_modes)
            .collect();
        let need = ft_counts[c] + val_counts[c];
        if need > eligible.len() {
            return Err(Error::config(format!(
                "class {c}: fine-tuning needs {need} samples but only {} are eligible",
                eligible.len()
            )));
        }
        let chosen = pick.sample_indices(eligible.len(), need);
        ft_idx.extend(chosen[..ft_counts[c]].iter().map(|&k| eligible[k]));
        val_idx.extend(chosen[ft_counts[c]..].iter().map(|&k| eligible[k]));
    }
    ft_idx.sort_unstable();
    val_idx.sort_unstable();
    let finetune = train.subset(&ft_idx);
    let validation = train.subset(&val_idx);

    let mut ood = BTreeMap::new();
    for kind in ShiftKind::ALL {
        for severity in 1..=SEVERITIES {
            let mut rng = root.fork(16 + 8 * kind.stream() + severity as u64);
            let inputs = apply_shift(&clean.inputs, kind, severity, spec, &mut rng);
            ood.insert(
                (kind, severity),
                Split {
                    inputs,
                    labels: clean.labels.clone(),
                },
            );
        }
    }
    Ok(ShiftDataset {
        spec: spec.clone(),
        seed,
        train,
        clean,
        finetune,
        validation,
        ood,
    })
}
