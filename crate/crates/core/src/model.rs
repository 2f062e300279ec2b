//! A small fully connected network with analytic gradients.
//!
//! Layer `l` computes `a_{l+1} = act(a_l W_l^T + b_l)` over a batch whose rows
//! are samples, so `W_l` is `out x in` and each row of `W_l` belongs to one
//! output unit. The last layer has no activation. Parameters are exposed by
//! name (`layer{l}.weight`, `layer{l}.bias`) so optimizers can treat them
//! uniformly.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::rng::{sample_normal, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    /// Global Lipschitz constant of the scalar map.
    pub fn lipschitz_constant(self) -> f64 {
        match self {
            Activation::Relu | Activation::Tanh | Activation::Identity => 1.0,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "softmax-cross-entropy" | "cross-entropy" | "ce" => Ok(LossKind::SoftmaxCrossEntropy),
            "mean-squared-error" | "mse" => Ok(LossKind::MeanSquaredError),
            other => Err(Error::config(format!("unknown loss `{other}`"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::SoftmaxCrossEntropy => "softmax-cross-entropy",
            LossKind::MeanSquaredError => "mean-squared-error",
        })
    }
}

/// Architecture of a feed-forward network.
///
/// `widths` lists the input width followed by every layer's output width, so a
/// spec with `widths = [4, 16, 3]` has two linear layers. `activations` has one
/// entry per hidden layer (`widths.len() - 2`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
    loss: LossKind,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>, loss: LossKind) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config(
                "an MLP needs an input width and at least one layer",
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if activations.len() != widths.len() - 2 {
            return Err(Error::config(format!(
                "expected {} hidden activations, got {}",
                widths.len() - 2,
                activations.len()
            )));
        }
        Ok(Self {
            widths,
            activations,
            loss,
        })
    }

    /// Same activation on every hidden layer.
    pub fn uniform(widths: Vec<usize>, activation: Activation, loss: LossKind) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        Self::new(widths, vec![activation; hidden], loss)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer}.bias")
    }

    /// Parameter names in their canonical order.
    pub fn param_names(&self) -> Vec<String> {
        (0..self.num_layers())
            .flat_map(|l| [Self::weight_name(l), Self::bias_name(l)])
            .collect()
    }

    /// Stable 64-bit FNV-1a digest of the architecture, used to match
    /// checkpoints to models.
    pub fn fingerprint(&self) -> u64 {
        let text = format!(
            "widths={:?};act={:?};loss={}",
            self.widths, self.activations, self.loss
        );
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    /// Scaled Gaussian initialization (`N(0, 2/fan_in)` for weights, zero biases).
    pub fn init_params(&self, rng: &mut SeededRng) -> NamedParams {
        let mut params = NamedParams::new();
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let w = sample_normal(rng, fan_out, fan_in, 0.0, std).expect("std is positive");
            params
                .insert(Self::weight_name(l), w)
                .expect("names are unique");
            params
                .insert(Self::bias_name(l), DenseMatrix::zeros(1, fan_out))
                .expect("names are unique");
        }
        params
    }

    fn check_params(&self, params: &NamedParams) -> Result<()> {
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let w = params.require(&Self::weight_name(l))?;
            let b = params.require(&Self::bias_name(l))?;
            if w.shape() != (fan_out, fan_in) || b.shape() != (1, fan_out) {
                return Err(Error::domain(format!(
                    "layer {l}: expected weight {fan_out}x{fan_in} and bias 1x{fan_out}"
                )));
            }
        }
        Ok(())
    }
}

/// An ordered collection of uniquely named tensors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NamedParams {
    entries: Vec<(String, DenseMatrix)>,
}

impl NamedParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: DenseMatrix) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::domain(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseMatrix> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&DenseMatrix> {
        self.get(name)
            .ok_or_else(|| Error::domain(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseMatrix)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseMatrix)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn zeros_like(&self) -> NamedParams {
        NamedParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), DenseMatrix::zeros(t.rows(), t.cols())))
                .collect(),
        }
    }

    /// Total number of scalar coordinates.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// All coordinates concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.as_slice().iter().copied())
            .collect()
    }

    pub fn bitwise_eq(&self, other: &NamedParams) -> bool {
        self.len() == other.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bitwise_eq(b))
    }
}

impl FromIterator<(String, DenseMatrix)> for NamedParams {
    fn from_iter<I: IntoIterator<Item = (String, DenseMatrix)>>(iter: I) -> Self {
        let mut params = NamedParams::new();
        for (n, t) in iter {
            params.insert(n, t).expect("duplicate parameter name");
        }
        params
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Integer class labels, one per sample.
    Classes(Vec<usize>),
    /// Regression targets, `batch x output_width`.
    Values(DenseMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: DenseMatrix,
    pub targets: Targets,
}

impl Batch {
    pub fn classification(inputs: DenseMatrix, labels: Vec<usize>) -> Self {
        Self {
            inputs,
            targets: Targets::Classes(labels),
        }
    }

    pub fn regression(inputs: DenseMatrix, targets: DenseMatrix) -> Self {
        Self {
            inputs,
            targets: Targets::Values(targets),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }
}

struct Trace {
    /// Layer inputs `a_0 .. a_{L-1}`.
    inputs: Vec<DenseMatrix>,
    /// Pre-activations `z_0 .. z_{L-1}`.
    pre: Vec<DenseMatrix>,
    output: DenseMatrix,
}

fn run_forward(spec: &MlpSpec, params: &NamedParams, inputs: &DenseMatrix) -> Result<Trace> {
    spec.check_params(params)?;
    if inputs.cols() != spec.input_width() {
        return Err(Error::domain(format!(
            "input width {} does not match network input width {}",
            inputs.cols(),
            spec.input_width()
        )));
    }
    let layers = spec.num_layers();
    let mut trace = Trace {
        inputs: Vec::with_capacity(layers),
        pre: Vec::with_capacity(layers),
        output: inputs.clone(),
    };
    let mut a = inputs.clone();
    for l in 0..layers {
        let w = params.require(&MlpSpec::weight_name(l))?;
        let b = params.require(&MlpSpec::bias_name(l))?;
        let mut z = a.matmul_transposed(w)?;
        for r in 0..z.rows() {
            for (zv, bv) in z.row_mut(r).iter_mut().zip(b.as_slice()) {
                *zv += bv;
            }
        }
        let next = match spec.activations.get(l) {
            Some(&act) => z.map(|v| act.apply(v)),
            None => z.clone(),
        };
        trace.inputs.push(std::mem::replace(&mut a, next));
        trace.pre.push(z);
    }
    trace.output = a;
    Ok(trace)
}

/// Batch outputs (logits for classification) of the network.
pub fn forward(spec: &MlpSpec, params: &NamedParams, inputs: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(run_forward(spec, params, inputs)?.output)
}

fn check_targets(spec: &MlpSpec, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::domain("empty batch"));
    }
    let k = spec.output_width();
    match (&batch.targets, spec.loss()) {
        (Targets::Classes(labels), LossKind::SoftmaxCrossEntropy) => {
            if labels.len() != batch.len() {
                return Err(Error::domain("label count does not match batch size"));
            }
            if let Some(bad) = labels.iter().find(|&&y| y >= k) {
                return Err(Error::domain(format!(
                    "label {bad} out of range for {k} classes"
                )));
            }
            Ok(())
        }
        (Targets::Values(t), LossKind::MeanSquaredError) => {
            if t.shape() != (batch.len(), k) {
                return Err(Error::domain(
                    "regression targets must be batch x output_width",
                ));
            }
            Ok(())
        }
        _ => Err(Error::domain("target kind does not match the loss")),
    }
}

/// Mean loss and its gradient with respect to the network outputs.
fn loss_and_output_grad(output: &DenseMatrix, targets: &Targets) -> (f64, DenseMatrix) {
    let n = output.rows() as f64;
    let mut grad = DenseMatrix::zeros(output.rows(), output.cols());
    let mut total = 0.0;
    match targets {
        Targets::Classes(labels) => {
            for (r, &y) in labels.iter().enumerate() {
                let logits = output.row(r);
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
                let log_norm = max + sum_exp.ln();
                total += log_norm - logits[y];
                let g = grad.row_mut(r);
                for (c, gz) in g.iter_mut().enumerate() {
                    let p = (logits[c] - log_norm).exp();
                    *gz = (p - if c == y { 1.0 } else { 0.0 }) / n;
                }
            }
        }
        Targets::Values(t) => {
            for r in 0..output.rows() {
                let g = grad.row_mut(r);
                for (c, gz) in g.iter_mut().enumerate() {
                    let d = output.get(r, c) - t.get(r, c);
                    total += d * d;
                    *gz = 2.0 * d / n;
                }
            }
        }
    }
    (total / n, grad)
}

/// Mean loss over the batch.
pub fn loss(spec: &MlpSpec, params: &NamedParams, batch: &Batch) -> Result<f64> {
    check_targets(spec, batch)?;
    let trace = run_forward(spec, params, &batch.inputs)?;
    Ok(loss_and_output_grad(&trace.output, &batch.targets).0)
}

/// Mean loss and analytic gradients for every named tensor.
pub fn backward(spec: &MlpSpec, params: &NamedParams, batch: &Batch) -> Result<(f64, NamedParams)> {
    check_targets(spec, batch)?;
    let trace = run_forward(spec, params, &batch.inputs)?;
    let (loss, mut delta) = loss_and_output_grad(&trace.output, &batch.targets);

    let layers = spec.num_layers();
    let mut grads: Vec<(String, DenseMatrix)> = Vec::with_capacity(2 * layers);
    for l in (0..layers).rev() {
        // delta holds dL/dz_l for the current layer
        let gw = delta.transposed_matmul(&trace.inputs[l])?;
        let mut gb = DenseMatrix::zeros(1, delta.cols());
        for r in 0..delta.rows() {
            for (b, d) in gb.as_mut_slice().iter_mut().zip(delta.row(r)) {
                *b += d;
            }
        }
        grads.push((MlpSpec::bias_name(l), gb));
        grads.push((MlpSpec::weight_name(l), gw));
        if l > 0 {
            let w = params.require(&MlpSpec::weight_name(l))?;
            let upstream = delta.matmul(w)?;
            let act = spec.activations[l - 1];
            delta = upstream.zip_map(&trace.pre[l - 1], |g, z| g * act.derivative(z))?;
        }
    }
    grads.reverse();
    Ok((loss, grads.into_iter().collect()))
}

/// Central-difference gradient `(L(θ+h) - L(θ-h)) / 2h`, one coordinate at a time.
pub fn finite_diff_grad(
    spec: &MlpSpec,
    params: &NamedParams,
    batch: &Batch,
    h: f64,
) -> Result<NamedParams> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    check_targets(spec, batch)?;
    let mut probe = params.clone();
    let mut grads = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let len = params.require(name)?.len();
        for i in 0..len {
            let orig = probe.get(name).expect("cloned").as_slice()[i];
            probe.get_mut(name).expect("cloned").as_mut_slice()[i] = orig + h;
            let up = loss(spec, &probe, batch)?;
            probe.get_mut(name).expect("cloned").as_mut_slice()[i] = orig - h;
            let down = loss(spec, &probe, batch)?;
            probe.get_mut(name).expect("cloned").as_mut_slice()[i] = orig;
            grads.get_mut(name).expect("zeros_like").as_mut_slice()[i] = (up - down) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Index of the largest logit per row.
pub fn predict_classes(outputs: &DenseMatrix) -> Vec<usize> {
    outputs
        .row_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[Vec<f64>]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_network_is_identity_map() {
        let spec = MlpSpec::new(vec![3, 3], vec![], LossKind::MeanSquaredError).unwrap();
        let params: NamedParams = [
            ("layer0.weight".to_string(), DenseMatrix::identity(3)),
            ("layer0.bias".to_string(), DenseMatrix::zeros(1, 3)),
        ]
        .into_iter()
        .collect();
        let x = matrix(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.0, -1.0]]);
        assert_eq!(forward(&spec, &params, &x).unwrap(), x);
    }

    #[test]
    fn relu_kills_negative_preactivations() {
        let spec =
            MlpSpec::uniform(vec![2, 2, 1], Activation::Relu, LossKind::MeanSquaredError).unwrap();
        let params: NamedParams = [
            ("layer0.weight".to_string(), DenseMatrix::filled(2, 2, -1.0)),
            ("layer0.bias".to_string(), DenseMatrix::filled(1, 2, -0.5)),
            ("layer1.weight".to_string(), DenseMatrix::filled(1, 2, 3.0)),
            ("layer1.bias".to_string(), DenseMatrix::zeros(1, 1)),
        ]
        .into_iter()
        .collect();
        let x = matrix(&[vec![1.0, 2.0], vec![0.1, 0.0]]);
        let out = forward(&spec, &params, &x).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_domain_error() {
        let spec =
            MlpSpec::uniform(vec![2, 3], Activation::Relu, LossKind::MeanSquaredError).unwrap();
        let params = spec.init_params(&mut SeededRng::new(0));
        assert!(matches!(
            forward(&spec, &params, &DenseMatrix::zeros(1, 5)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let spec = MlpSpec::new(vec![3, 4], vec![], LossKind::SoftmaxCrossEntropy).unwrap();
        let params: NamedParams = [
            ("layer0.weight".to_string(), DenseMatrix::zeros(4, 3)),
            ("layer0.bias".to_string(), DenseMatrix::zeros(1, 4)),
        ]
        .into_iter()
        .collect();
        let batch = Batch::classification(
            matrix(&[vec![1.0, 2.0, 3.0], vec![0.0, 1.0, 0.0]]),
            vec![0, 3],
        );
        let l = loss(&spec, &params, &batch).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn invalid_labels_rejected() {
        let spec = MlpSpec::new(vec![1, 2], vec![], LossKind::SoftmaxCrossEntropy).unwrap();
        let params = spec.init_params(&mut SeededRng::new(0));
        let batch = Batch::classification(DenseMatrix::zeros(1, 1), vec![2]);
        assert!(matches!(
            backward(&spec, &params, &batch),
            Err(Error::Domain(_))
        ));
        let batch = Batch::classification(DenseMatrix::zeros(2, 1), vec![0]);
        assert!(backward(&spec, &params, &batch).is_err());
        let batch = Batch::regression(DenseMatrix::zeros(1, 1), DenseMatrix::zeros(1, 2));
        assert!(backward(&spec, &params, &batch).is_err());
    }

    #[test]
    fn finite_diff_rejects_zero_step() {
        let spec = MlpSpec::new(vec![1, 1], vec![], LossKind::MeanSquaredError).unwrap();
        let params = spec.init_params(&mut SeededRng::new(0));
        let batch = Batch::regression(DenseMatrix::zeros(1, 1), DenseMatrix::zeros(1, 1));
        assert!(matches!(
            finite_diff_grad(&spec, &params, &batch, 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], vec![], LossKind::MeanSquaredError).is_err());
        assert!(MlpSpec::new(vec![3, 0], vec![], LossKind::MeanSquaredError).is_err());
        assert!(MlpSpec::new(vec![3, 2, 1], vec![], LossKind::MeanSquaredError).is_err());
        let spec =
            MlpSpec::uniform(vec![3, 2, 1], Activation::Tanh, LossKind::MeanSquaredError).unwrap();
        assert_eq!(
            spec.param_names(),
            [
                "layer0.weight",
                "layer0.bias",
                "layer1.weight",
                "layer1.bias"
            ]
        );
    }

    #[test]
    fn fingerprint_tracks_architecture() {
        let a = MlpSpec::uniform(
            vec![3, 8, 2],
            Activation::Relu,
            LossKind::SoftmaxCrossEntropy,
        )
        .unwrap();
        let b = MlpSpec::uniform(
            vec![3, 8, 2],
            Activation::Tanh,
            LossKind::SoftmaxCrossEntropy,
        )
        .unwrap();
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn predicts_argmax() {
        let out = matrix(&[vec![0.1, 0.9, 0.3], vec![2.0, -1.0, 1.0]]);
        assert_eq!(predict_classes(&out), vec![1, 0]);
    }
}
