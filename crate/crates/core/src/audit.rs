//! Lipschitz robustness audit under the l-infinity norm.
//!
//! For a linear layer `h(x) = Wx + b` the difference to its pre-trained
//! counterpart changes at most at rate `L_d = mars(W_f - W_0)`, and the
//! fine-tuned layer is then `(L_d + L_0)`-Lipschitz with `L_0 = mars(W_0)`.
//! For deep networks with 1-Lipschitz activations the product of per-layer
//! MARS norms bounds the whole network. The audit compares these closed-form
//! bounds with ratios measured on sampled input pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{linf_norm, mars_norm, DenseMatrix};
use crate::model::{forward, MlpSpec, NamedParams};
use crate::rng::SeededRng;

/// Slack allowed on every bound comparison.
pub const BOUND_TOL: f64 = 1e-9;

/// Produces input pairs `(x, x')`.
pub trait PairSampler {
    fn dim(&self) -> usize;
    fn next_pair(&mut self) -> (Vec<f64>, Vec<f64>);
}

/// Gaussian pairs interleaved with sign-pattern pairs.
///
/// Every `adversarial_every`-th pair has `x - x' = delta * s` for a sign
/// vector `s`: either one of the supplied hints (cycled) or a random sign
/// pattern. Along `s = sign(row)` a linear map reaches its MARS norm.
#[derive(Debug, Clone)]
pub struct MixedPairSampler {
    rng: SeededRng,
    dim: usize,
    adversarial_every: usize,
    hints: Vec<Vec<f64>>,
    cursor: usize,
    drawn: usize,
}

impl MixedPairSampler {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self {
            rng: SeededRng::new(seed),
            dim,
            adversarial_every: 4,
            hints: Vec::new(),
            cursor: 0,
            drawn: 0,
        }
    }

    /// Adds the sign pattern of every row of `w` as an adversarial direction.
    pub fn with_row_signs(mut self, w: &DenseMatrix) -> Self {
        for row in w.row_iter() {
            self.hints.push(sign_vector(row));
        }
        self
    }

    pub fn adversarial_every(mut self, k: usize) -> Self {
        self.adversarial_every = k.max(1);
        self
    }

    fn gaussian(&mut self) -> Vec<f64> {
        (0..self.dim).map(|_| self.rng.standard_normal()).collect()
    }
}

impl PairSampler for MixedPairSampler {
    fn dim(&self) -> usize {
        self.dim
    }

    fn next_pair(&mut self) -> (Vec<f64>, Vec<f64>) {
        self.drawn += 1;
        let x = self.gaussian();
        if self.drawn % self.adversarial_every == 0 {
            let signs = if self.hints.is_empty() {
                (0..self.dim)
                    .map(|_| if self.rng.uniform() < 0.5 { -1.0 } else { 1.0 })
                    .collect()
            } else {
                self.cursor = (self.cursor + 1) % self.hints.len();
                self.hints[self.cursor].clone()
            };
            let delta = self.rng.uniform_range(0.1, 2.0);
            let x2 = x.iter().zip(&signs).map(|(a, s)| a - delta * s).collect();
            (x, x2)
        } else {
            let x2 = self.gaussian();
            (x, x2)
        }
    }
}

/// Replays a fixed list of pairs, cycling when exhausted.
#[derive(Debug, Clone)]
pub struct ListPairSampler {
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
    cursor: usize,
}

impl ListPairSampler {
    pub fn new(pairs: Vec<(Vec<f64>, Vec<f64>)>) -> Self {
        Self { pairs, cursor: 0 }
    }
}

impl PairSampler for ListPairSampler {
    fn dim(&self) -> usize {
        self.pairs.first().map_or(0, |(x, _)| x.len())
    }

    fn next_pair(&mut self) -> (Vec<f64>, Vec<f64>) {
        let pair = self.pairs[self.cursor % self.pairs.len()].clone();
        self.cursor += 1;
        pair
    }
}

/// `+1` for non-negative entries, `-1` otherwise.
pub fn sign_vector(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| if x < 0.0 { -1.0 } else { 1.0 })
        .collect()
}

fn apply(w: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    w.row_iter().map(|row| crate::matrix::dot(row, x)).collect()
}

fn draw_pairs(
    sampler: &mut dyn PairSampler,
    n_pairs: usize,
    dim: usize,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if n_pairs == 0 {
        return Err(Error::domain("need at least one input pair"));
    }
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let (x, y) = sampler.next_pair();
        if x.len() != dim || y.len() != dim {
            return Err(Error::domain(format!(
                "sampler produced pairs of the wrong width (expected {dim})"
            )));
        }
        let gap: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        if linf_norm(&gap) > 0.0 {
            pairs.push((x, y));
        }
    }
    if pairs.is_empty() {
        return Err(Error::domain("sampler produced only coincident pairs"));
    }
    Ok(pairs)
}

/// Largest sampled `||(W_f - W_0)(x - x')||_inf / ||x - x'||_inf`.
pub fn estimate_diff_lipschitz_lb(
    w_f: &DenseMatrix,
    w_0: &DenseMatrix,
    sampler: &mut dyn PairSampler,
    n_pairs: usize,
) -> Result<f64> {
    let d = w_f.sub(w_0)?;
    let pairs = draw_pairs(sampler, n_pairs, d.cols())?;
    Ok(pairs
        .iter()
        .map(|(x, y)| {
            let gap: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            linf_norm(&apply(&d, &gap)) / linf_norm(&gap)
        })
        .fold(0.0, f64::max))
}

/// Exact l-infinity operator norm of a linear layer.
pub fn layer_lipschitz_upper(w: &DenseMatrix) -> Result<f64> {
    mars_norm(w)
}

/// Input on the unit l-infinity sphere where `w` attains its operator norm:
/// the sign pattern of the row with the largest L1 norm.
pub fn attaining_input(w: &DenseMatrix) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::domain("empty matrix has no attaining input"));
    }
    let worst = w
        .row_iter()
        .enumerate()
        .map(|(i, r)| (i, crate::matrix::l1_norm(r)))
        .fold((0, f64::NEG_INFINITY), |best, cur| {
            if cur.1 > best.1 {
                cur
            } else {
                best
            }
        })
        .0;
    Ok(sign_vector(w.row(worst)))
}

/// `||W x||_inf / ||x||_inf` for the attaining input.
pub fn attained_ratio(w: &DenseMatrix) -> Result<f64> {
    let x = attaining_input(w)?;
    Ok(linf_norm(&apply(w, &x)) / linf_norm(&x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLipschitz {
    pub name: String,
    /// `mars(W_0)`.
    pub l0: f64,
    /// `mars(W_f - W_0)`.
    pub ld: f64,
    /// `mars(W_f)`.
    pub lf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub layers: Vec<LayerLipschitz>,
    /// Largest sampled rate of change of the difference network.
    pub sampled_diff_lb: f64,
    /// Product of per-layer `mars(W_f)` times activation constants.
    pub composed_upper: f64,
    /// The bound sampled ratios are checked against: `L_d + L_0` for a
    /// single linear layer, `composed_upper` otherwise.
    pub bound: f64,
    pub samples: usize,
    /// Largest sampled rate of change of the fine-tuned network.
    pub max_observed_ratio: f64,
    pub holds: bool,
}

/// Samples input pairs through the fine-tuned and pre-trained networks and
/// checks the sampled rates against the closed-form bounds.
pub fn verify_lipschitz_bound(
    spec: &MlpSpec,
    fine_tuned: &NamedParams,
    pretrained: &NamedParams,
    sampler: &mut dyn PairSampler,
    n_pairs: usize,
) -> Result<LipschitzReport> {
    if let Some(act) = spec
        .activations()
        .iter()
        .find(|a| a.lipschitz_constant() > 1.0)
    {
        return Err(Error::Unsupported(format!(
            "activation {act} is not 1-Lipschitz; the composed bound does not apply"
        )));
    }
    let mut layers = Vec::with_capacity(spec.num_layers());
    let mut composed = 1.0;
    for l in 0..spec.num_layers() {
        let name = MlpSpec::weight_name(l);
        let wf = fine_tuned.require(&name)?;
        let w0 = pretrained.require(&name)?;
        let entry = LayerLipschitz {
            l0: mars_norm(w0)?,
            ld: mars_norm(&wf.sub(w0)?)?,
            lf: mars_norm(wf)?,
            name,
        };
        composed *= entry.lf;
        layers.push(entry);
    }
    let act_product: f64 = spec
        .activations()
        .iter()
        .map(|a| a.lipschitz_constant())
        .product();
    composed *= act_product;

    let pairs = draw_pairs(sampler, n_pairs, spec.input_width())?;
    let mut inputs = Vec::with_capacity(pairs.len() * 2 * spec.input_width());
    for (x, y) in &pairs {
        inputs.extend_from_slice(x);
        inputs.extend_from_slice(y);
    }
    let inputs = DenseMatrix::from_vec(pairs.len() * 2, spec.input_width(), inputs)?;
    let out_f = forward(spec, fine_tuned, &inputs)?;
    let out_0 = forward(spec, pretrained, &inputs)?;

    let mut max_ratio: f64 = 0.0;
    let mut max_diff: f64 = 0.0;
    for (k, (x, y)) in pairs.iter().enumerate() {
        let gap: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
        let denom = linf_norm(&gap);
        let (fx, fy) = (out_f.row(2 * k), out_f.row(2 * k + 1));
        let (ox, oy) = (out_0.row(2 * k), out_0.row(2 * k + 1));
        let df: Vec<f64> = fx.iter().zip(fy).map(|(a, b)| a - b).collect();
        let dd: Vec<f64> = df
            .iter()
            .zip(ox.iter().zip(oy))
            .map(|(f, (a, b))| f - (a - b))
            .collect();
        max_ratio = max_ratio.max(linf_norm(&df) / denom);
        max_diff = max_diff.max(linf_norm(&dd) / denom);
    }

    let bound = if layers.len() == 1 {
        layers[0].ld + layers[0].l0
    } else {
        composed
    };
    let mut holds = max_ratio <= bound + BOUND_TOL && max_ratio <= composed + BOUND_TOL;
    if layers.len() == 1 {
        holds &= max_diff <= layers[0].ld + BOUND_TOL;
    }
    Ok(LipschitzReport {
        layers,
        sampled_diff_lb: max_diff,
        composed_upper: composed,
        bound,
        samples: pairs.len(),
        max_observed_ratio: max_ratio,
        holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, LossKind};
    use crate::projection::project_rows;
    use crate::rng::sample_normal;

    fn m(rows: &[Vec<f64>]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn adversarial_pair_reaches_mars_norm() {
        let wf = m(&[vec![1.0, -1.0]]);
        let w0 = DenseMatrix::zeros(1, 2);
        let mut sampler = ListPairSampler::new(vec![
            (vec![0.3, 0.1], vec![0.2, 0.4]),
            (vec![0.5, -0.5], vec![0.0, 0.0]),
        ]);
        let lb = estimate_diff_lipschitz_lb(&wf, &w0, &mut sampler, 2).unwrap();
        assert_eq!(lb, 2.0);
    }

    #[test]
    fn identical_weights_have_zero_difference_rate() {
        let w = m(&[vec![1.0, 2.0], vec![-1.0, 0.5]]);
        let mut sampler = MixedPairSampler::new(3, 2);
        assert_eq!(
            estimate_diff_lipschitz_lb(&w, &w, &mut sampler, 100).unwrap(),
            0.0
        );
    }

    #[test]
    fn coincident_sampler_rejected() {
        let w = m(&[vec![1.0]]);
        let mut sampler = ListPairSampler::new(vec![(vec![1.0], vec![1.0])]);
        assert!(matches!(
            estimate_diff_lipschitz_lb(&w, &w, &mut sampler, 10),
            Err(Error::Domain(_))
        ));
        let mut sampler = MixedPairSampler::new(1, 1);
        assert!(estimate_diff_lipschitz_lb(&w, &w, &mut sampler, 0).is_err());
    }

    #[test]
    fn random_samples_stay_below_operator_norm() {
        let mut rng = SeededRng::new(11);
        for seed in 0..20 {
            let wf = sample_normal(&mut rng, 4, 6, 0.0, 1.0).unwrap();
            let w0 = sample_normal(&mut rng, 4, 6, 0.0, 1.0).unwrap();
            let mut sampler = MixedPairSampler::new(seed, 6);
            let lb = estimate_diff_lipschitz_lb(&wf, &w0, &mut sampler, 500).unwrap();
            assert!(lb <= mars_norm(&wf.sub(&w0).unwrap()).unwrap() + BOUND_TOL);
        }
    }

    #[test]
    fn layer_upper_examples() {
        assert_eq!(
            layer_lipschitz_upper(&m(&[vec![1.0, -2.0], vec![3.0, 4.0]])).unwrap(),
            7.0
        );
        assert_eq!(
            layer_lipschitz_upper(&DenseMatrix::identity(4)).unwrap(),
            1.0
        );
        let w = m(&[vec![1.0, -2.0], vec![3.0, 4.0]]);
        assert_eq!(attaining_input(&w).unwrap(), vec![1.0, 1.0]);
        assert_eq!(attained_ratio(&w).unwrap(), 7.0);
    }

    fn single_layer(wf: DenseMatrix, w0: DenseMatrix) -> (MlpSpec, NamedParams, NamedParams) {
        let spec = MlpSpec::new(
            vec![wf.cols(), wf.rows()],
            vec![],
            LossKind::MeanSquaredError,
        )
        .unwrap();
        let bias = DenseMatrix::zeros(1, wf.rows());
        let f = [
            ("layer0.weight".to_string(), wf),
            ("layer0.bias".to_string(), bias.clone()),
        ]
        .into_iter()
        .collect();
        let z = [
            ("layer0.weight".to_string(), w0),
            ("layer0.bias".to_string(), bias),
        ]
        .into_iter()
        .collect();
        (spec, f, z)
    }

    #[test]
    fn unchanged_model_ratio_bounded_by_l0() {
        let w = m(&[vec![1.0, -0.5], vec![0.25, 2.0]]);
        let (spec, f, z) = single_layer(w.clone(), w);
        let mut sampler = MixedPairSampler::new(5, 2);
        let report = verify_lipschitz_bound(&spec, &f, &z, &mut sampler, 2000).unwrap();
        assert!(report.holds);
        assert_eq!(report.layers[0].ld, 0.0);
        assert!(report.max_observed_ratio <= report.layers[0].l0 + BOUND_TOL);
    }

    #[test]
    fn projection_caps_reported_ld() {
        let mut rng = SeededRng::new(21);
        for _ in 0..20 {
            let w0 = sample_normal(&mut rng, 3, 5, 0.0, 1.0).unwrap();
            let wt = sample_normal(&mut rng, 3, 5, 0.0, 1.0).unwrap();
            let gamma = rng.uniform_range(0.0, 3.0);
            let wp = project_rows(&wt, &w0, gamma).unwrap();
            let (spec, f, z) = single_layer(wp, w0);
            let mut sampler = MixedPairSampler::new(rng.next_u64(), 5);
            let report = verify_lipschitz_bound(&spec, &f, &z, &mut sampler, 200).unwrap();
            assert!(report.layers[0].ld <= gamma + BOUND_TOL);
            assert!(report.holds);
        }
    }

    #[test]
    fn deep_network_respects_composed_bound() {
        let spec = MlpSpec::uniform(
            vec![5, 8, 8, 3],
            Activation::Tanh,
            LossKind::MeanSquaredError,
        )
        .unwrap();
        let mut rng = SeededRng::new(4);
        let p0 = spec.init_params(&mut rng);
        let pf = spec.init_params(&mut rng);
        let mut sampler = MixedPairSampler::new(8, 5);
        let report = verify_lipschitz_bound(&spec, &pf, &p0, &mut sampler, 3000).unwrap();
        assert!(report.holds);
        assert!(report.max_observed_ratio <= report.composed_upper);
        assert_eq!(report.layers.len(), 3);
        let json = serde_json::to_string(&report).unwrap();
        let back: LipschitzReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn reverse_triangle_inequality_under_linf() {
        let mut rng = SeededRng::new(77);
        for _ in 0..1000 {
            let a: Vec<f64> = (0..7).map(|_| rng.standard_normal()).collect();
            let b: Vec<f64> = (0..7).map(|_| rng.standard_normal()).collect();
            let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            assert!((linf_norm(&a) - linf_norm(&b)).abs() <= linf_norm(&diff) + 1e-15);
        }
    }

    #[test]
    fn shrinking_radius_never_raises_ld() {
        let mut rng = SeededRng::new(9);
        let w0 = sample_normal(&mut rng, 4, 4, 0.0, 1.0).unwrap();
        let wt = sample_normal(&mut rng, 4, 4, 0.0, 2.0).unwrap();
        let mut last = f64::INFINITY;
        for k in (0..=20).rev() {
            let gamma = 0.25 * k as f64;
            let ld = mars_norm(&project_rows(&wt, &w0, gamma).unwrap().sub(&w0).unwrap()).unwrap();
            assert!(ld <= last + 1e-12);
            last = ld;
        }
    }
}
