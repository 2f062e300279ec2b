//! Fast trainable projection.
//!
//! Each projected tensor carries its own radius `gamma`. Every step reuses the
//! loss gradient `g_t` that drives the base optimizer to also differentiate
//! the loss with respect to the previous radius, through the projection that
//! produced the current weights from the cached unconstrained weights. The
//! radius is then moved by a scalar Adam step and the fresh unconstrained
//! weights are projected with it. No extra forward or backward pass is needed.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, l1_norm, DenseMatrix};
use crate::model::NamedParams;
use crate::optim::BaseOptimizer;
use crate::projection::{canonicalize, project_rows_in_place, ProjectionView, EPS_DIV};

/// Radius every constraint starts from.
pub const GAMMA_INIT: f64 = 1e-8;

/// A trainable tensor together with everything projection needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagedParam {
    pub name: String,
    /// Live (projected) weights.
    pub value: DenseMatrix,
    /// Pre-trained weights the projection pulls towards.
    pub anchor: DenseMatrix,
    /// Unconstrained weights from the previous step.
    pub prev_unconstrained: Option<DenseMatrix>,
    pub grad: Option<DenseMatrix>,
    pub projectable: bool,
    /// Frozen tensors are skipped by every optimizer step.
    pub frozen: bool,
    pub view: ProjectionView,
}

impl ManagedParam {
    pub fn new(name: impl Into<String>, value: DenseMatrix, projectable: bool) -> Result<Self> {
        let name = name.into();
        let view = canonicalize(&name, &[value.rows(), value.cols()])?;
        Ok(Self {
            anchor: value.clone(),
            value,
            prev_unconstrained: None,
            grad: None,
            projectable,
            frozen: false,
            view,
            name,
        })
    }

    /// Wraps every tensor of a model, anchoring each at its current value.
    pub fn from_named(params: &NamedParams) -> Result<Vec<ManagedParam>> {
        params
            .iter()
            .map(|(n, t)| ManagedParam::new(n, t.clone(), true))
            .collect()
    }

    fn check_grad(&self) -> Result<&DenseMatrix> {
        let g = self
            .grad
            .as_ref()
            .ok_or_else(|| Error::state(format!("no gradient for `{}`", self.name)))?;
        g.check_same_shape(&self.value, &self.name)?;
        self.anchor.check_same_shape(&self.value, &self.name)?;
        Ok(g)
    }
}

/// Current values of a parameter collection.
pub fn values_of(params: &[ManagedParam]) -> NamedParams {
    params
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Copies gradients in by name. Every parameter must receive one.
pub fn load_grads(params: &mut [ManagedParam], grads: &NamedParams) -> Result<()> {
    for p in params.iter_mut() {
        let g = grads
            .get(&p.name)
            .ok_or_else(|| Error::state(format!("no gradient for `{}`", p.name)))?;
        g.check_same_shape(&p.value, &p.name)?;
        p.grad = Some(g.clone());
    }
    Ok(())
}

/// Names exempt from projection.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExcludeSet(BTreeSet<String>);

impl ExcludeSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Validates that every name refers to a parameter in `params`.
    pub fn new<S: AsRef<str>>(names: &[S], params: &[ManagedParam]) -> Result<Self> {
        let mut set = BTreeSet::new();
        for n in names {
            let n = n.as_ref();
            if !params.iter().any(|p| p.name == n) {
                return Err(Error::config(format!(
                    "exclude_set names unknown parameter `{n}`"
                )));
            }
            set.insert(n.to_owned());
        }
        Ok(Self(set))
    }

    pub fn all(params: &[ManagedParam]) -> Self {
        Self(params.iter().map(|p| p.name.clone()).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Whether `p` is subject to a learned or fixed projection radius.
pub fn is_projected(p: &ManagedParam, exclude: &ExcludeSet) -> bool {
    p.projectable && !p.frozen && !exclude.contains(&p.name)
}

/// Scalar Adam state of one projection radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaState {
    pub gamma: f64,
    pub m: f64,
    pub v: f64,
    pub t: u64,
    /// Multiplier applied to positive radius gradients.
    pub kappa: f64,
    pub mu: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Outcome of one radius update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaUpdate {
    /// Adam result before the floor at zero.
    pub raw: f64,
    pub gamma: f64,
}

impl GammaState {
    pub fn new(kappa: f64) -> Result<Self> {
        check_kappa(kappa)?;
        Ok(Self {
            gamma: GAMMA_INIT,
            m: 0.0,
            v: 0.0,
            t: 0,
            kappa,
            mu: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn reset(&mut self) {
        self.gamma = GAMMA_INIT;
        self.m = 0.0;
        self.v = 0.0;
        self.t = 0;
    }

    /// One bias-corrected Adam step on the radius, floored at zero.
    pub fn adam_update(&mut self, grad: f64) -> GammaUpdate {
        self.t += 1;
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad;
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad;
        let m_hat = self.m / (1.0 - self.beta1.powi(self.t as i32));
        let v_hat = self.v / (1.0 - self.beta2.powi(self.t as i32));
        let raw = self.gamma - self.mu * m_hat / (v_hat.sqrt() + self.eps);
        self.gamma = raw.max(0.0);
        GammaUpdate {
            raw,
            gamma: self.gamma,
        }
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if (0.0..=1.0).contains(&kappa) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "annealing factor k must lie in [0, 1], got {kappa}"
        )))
    }
}

/// Scales positive radius gradients by `kappa`; negative ones pass through.
pub fn anneal_gradient(grad: f64, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    Ok(if grad > 0.0 { kappa * grad } else { grad })
}

/// Derivative of the loss with respect to the radius used to project
/// `unconstrained` towards `anchor`, given the loss gradient at the projected
/// weights.
///
/// Only rows whose displacement exceeded `gamma` were scaled by the
/// projection, so only those rows depend on the radius.
pub fn hyper_gradient(
    grad: &DenseMatrix,
    unconstrained: &DenseMatrix,
    anchor: &DenseMatrix,
    gamma: f64,
) -> Result<f64> {
    grad.check_same_shape(unconstrained, "hyper_gradient")?;
    grad.check_same_shape(anchor, "hyper_gradient")?;
    let mut diff = vec![0.0; grad.cols()];
    let mut total = 0.0;
    for r in 0..grad.rows() {
        for ((d, &w), &w0) in diff.iter_mut().zip(unconstrained.row(r)).zip(anchor.row(r)) {
            *d = w - w0;
        }
        let dist = l1_norm(&diff);
        if dist < EPS_DIV || dist <= gamma {
            continue;
        }
        total += dot(grad.row(r), &diff) / dist;
    }
    Ok(total)
}

/// Runs the base optimizer on every unfrozen tensor, consuming gradients.
pub fn unconstrained_step(params: &mut [ManagedParam], base: &mut dyn BaseOptimizer) -> Result<()> {
    for p in params.iter() {
        p.check_grad()?;
    }
    for (slot, p) in params.iter_mut().enumerate() {
        let g = p.grad.take().expect("checked above");
        if !p.frozen {
            base.step(slot, &mut p.value, &g)?;
        }
    }
    Ok(())
}

/// Creates a radius state for every projected tensor that lacks one.
pub fn ensure_gammas(
    params: &[ManagedParam],
    gammas: &mut BTreeMap<String, GammaState>,
    exclude: &ExcludeSet,
    kappa: f64,
) -> Result<()> {
    for p in params.iter().filter(|p| is_projected(p, exclude)) {
        if !gammas.contains_key(&p.name) {
            gammas.insert(p.name.clone(), GammaState::new(kappa)?);
        }
    }
    Ok(())
}

/// One trainable-projection step over a whole parameter collection.
///
/// Gradients must already be loaded; they are consumed.
pub fn ftp_step(
    params: &mut [ManagedParam],
    gammas: &mut BTreeMap<String, GammaState>,
    base: &mut dyn BaseOptimizer,
    exclude: &ExcludeSet,
) -> Result<()> {
    for p in params.iter() {
        p.check_grad()?;
        if let Some(prev) = &p.prev_unconstrained {
            prev.check_same_shape(&p.value, &p.name)?;
        }
        if is_projected(p, exclude) && !gammas.contains_key(&p.name) {
            return Err(Error::state(format!(
                "no projection radius for `{}`",
                p.name
            )));
        }
    }
    for (slot, p) in params.iter_mut().enumerate() {
        let g = p.grad.take().expect("checked above");
        if p.frozen {
            continue;
        }
        if !is_projected(p, exclude) {
            base.step(slot, &mut p.value, &g)?;
            continue;
        }
        let state = gammas.get_mut(&p.name).expect("checked above");
        match &p.prev_unconstrained {
            None => state.gamma = GAMMA_INIT,
            Some(prev) => {
                let hg = hyper_gradient(&g, prev, &p.anchor, state.gamma)?;
                state.adam_update(anneal_gradient(hg, state.kappa)?);
            }
        }
        base.step(slot, &mut p.value, &g)?;
        p.prev_unconstrained = Some(p.value.clone());
        project_rows_in_place(&mut p.value, &p.anchor, state.gamma)?;
    }
    Ok(())
}

/// Makes the current weights the new anchor and restarts every radius.
pub fn rebase_anchor(params: &mut [ManagedParam], gammas: &mut BTreeMap<String, GammaState>) {
    for p in params.iter_mut() {
        p.anchor = p.value.clone();
        p.prev_unconstrained = None;
    }
    for state in gammas.values_mut() {
        state.reset();
    }
}

/// Owning wrapper around [`ftp_step`] for a single run.
#[derive(Debug, Clone)]
pub struct Ftp<O> {
    pub params: Vec<ManagedParam>,
    pub gammas: BTreeMap<String, GammaState>,
    pub base: O,
    pub exclude: ExcludeSet,
}

impl<O: BaseOptimizer> Ftp<O> {
    pub fn new<S: AsRef<str>>(
        initial: &NamedParams,
        base: O,
        kappa: f64,
        exclude: &[S],
    ) -> Result<Self> {
        let params = ManagedParam::from_named(initial)?;
        let exclude = ExcludeSet::new(exclude, &params)?;
        let mut gammas = BTreeMap::new();
        ensure_gammas(&params, &mut gammas, &exclude, kappa)?;
        Ok(Self {
            params,
            gammas,
            base,
            exclude,
        })
    }

    pub fn step(&mut self, grads: &NamedParams) -> Result<()> {
        load_grads(&mut self.params, grads)?;
        ftp_step(
            &mut self.params,
            &mut self.gammas,
            &mut self.base,
            &self.exclude,
        )
    }

    pub fn values(&self) -> NamedParams {
        values_of(&self.params)
    }

    pub fn gamma(&self, name: &str) -> Option<f64> {
        self.gammas.get(name).map(|s| s.gamma)
    }

    pub fn rebase(&mut self) {
        rebase_anchor(&mut self.params, &mut self.gammas);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::mars_norm;
    use crate::optim::{Sgd, SgdConfig};

    fn m(rows: &[Vec<f64>]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn hyper_gradient_examples() {
        let zero = m(&[vec![0.0, 0.0]]);
        let hg =
            hyper_gradient(&m(&[vec![1.0, 0.0]]), &m(&[vec![2.0, -2.0]]), &zero, 1e-8).unwrap();
        assert!((hg - 0.5).abs() < 1e-15);
        let hg =
            hyper_gradient(&m(&[vec![1.0, 1.0]]), &m(&[vec![2.0, -2.0]]), &zero, 1e-8).unwrap();
        assert_eq!(hg, 0.0);
        let hg = hyper_gradient(
            &m(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            &m(&[vec![2.0, -2.0], vec![1.0, 1.0]]),
            &m(&[vec![0.0, 0.0], vec![0.0, 0.0]]),
            1e-8,
        )
        .unwrap();
        assert!((hg - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hyper_gradient_skips_inactive_rows() {
        let g = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let w = m(&[vec![2.0, -2.0], vec![1.0, 1.0]]);
        let w0 = DenseMatrix::zeros(2, 2);
        // second row has displacement 2 <= gamma = 3; first row 4 > 3
        assert!((hyper_gradient(&g, &w, &w0, 3.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(hyper_gradient(&g, &w, &w0, 10.0).unwrap(), 0.0);
        assert_eq!(hyper_gradient(&g, &w0, &w0, 0.0).unwrap(), 0.0);
        assert!(hyper_gradient(&g, &m(&[vec![1.0]]), &w0, 0.0).is_err());
    }

    #[test]
    fn anneal_examples() {
        assert!((anneal_gradient(0.5, 0.5).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(anneal_gradient(-0.5, 0.3).unwrap(), -0.5);
        assert_eq!(anneal_gradient(0.7, 0.0).unwrap(), 0.0);
        assert!(matches!(anneal_gradient(0.1, 1.5), Err(Error::Config(_))));
        assert!(anneal_gradient(0.1, -0.1).is_err());
    }

    #[test]
    fn adam_update_examples() {
        let mut s = GammaState::new(1.0).unwrap();
        let up = s.adam_update(-0.5);
        // m_hat = -0.5, v_hat = 0.25 so the step is 0.01 * 0.5 / (0.5 + 1e-8)
        let expected = 1e-8 + 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((up.gamma - expected).abs() < 1e-17);
        assert!((up.gamma - 0.01000001).abs() < 1e-9);

        let mut s = GammaState::new(1.0).unwrap();
        let up = s.adam_update(0.5);
        assert!((up.raw - (1e-8 - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-17);
        assert!((up.raw + 0.00999999).abs() < 1e-9);
        assert_eq!(up.gamma, 0.0);

        let mut s = GammaState::new(1.0).unwrap();
        let up = s.adam_update(0.0);
        assert_eq!(up.gamma, GAMMA_INIT);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn gamma_state_rejects_bad_kappa() {
        assert!(matches!(GammaState::new(1.01), Err(Error::Config(_))));
    }

    fn toy() -> NamedParams {
        [
            (
                "w".to_string(),
                m(&[vec![0.5, -0.5, 1.0], vec![0.2, 0.1, -0.3]]),
            ),
            ("b".to_string(), m(&[vec![0.1, -0.1]])),
        ]
        .into_iter()
        .collect()
    }

    fn grads(seed: f64) -> NamedParams {
        [
            (
                "w".to_string(),
                m(&[vec![seed, -0.3, 0.2], vec![0.5 * seed, 0.4, -0.1]]),
            ),
            ("b".to_string(), m(&[vec![-seed, 0.25]])),
        ]
        .into_iter()
        .collect()
    }

    #[test]
    fn first_step_collapses_to_initial_radius() {
        let base = Sgd::new(SgdConfig::plain(0.5)).unwrap();
        let mut ftp = Ftp::new(&toy(), base, 1.0, &[] as &[&str]).unwrap();
        ftp.step(&grads(1.0)).unwrap();
        for p in &ftp.params {
            let d = mars_norm(&p.value.sub(&p.anchor).unwrap()).unwrap();
            assert!(d <= GAMMA_INIT + 1e-9, "{}: {d}", p.name);
            assert_eq!(ftp.gamma(&p.name), Some(GAMMA_INIT));
        }
    }

    #[test]
    fn excluding_everything_matches_base_optimizer() {
        let cfg = SgdConfig {
            momentum: 0.9,
            weight_decay: 1e-3,
            ..SgdConfig::plain(0.1)
        };
        let mut ftp = Ftp::new(&toy(), Sgd::new(cfg).unwrap(), 1.0, &["w", "b"]).unwrap();
        let mut plain = ManagedParam::from_named(&toy()).unwrap();
        let mut base = Sgd::new(cfg).unwrap();
        for i in 0..20 {
            let g = grads(i as f64 * 0.1 - 1.0);
            ftp.step(&g).unwrap();
            load_grads(&mut plain, &g).unwrap();
            unconstrained_step(&mut plain, &mut base).unwrap();
        }
        assert!(ftp.values().bitwise_eq(&values_of(&plain)));
        assert!(ftp.gammas.is_empty());
    }

    #[test]
    fn zero_kappa_never_shrinks_radius() {
        let base = Sgd::new(SgdConfig::plain(0.05)).unwrap();
        let mut ftp = Ftp::new(&toy(), base, 0.0, &[] as &[&str]).unwrap();
        let mut last: BTreeMap<String, f64> = BTreeMap::new();
        for i in 0..100 {
            let s = ((i * 37 % 11) as f64 - 5.0) / 5.0;
            ftp.step(&grads(s)).unwrap();
            for (name, st) in &ftp.gammas {
                if let Some(&prev) = last.get(name) {
                    assert!(st.gamma >= prev, "{name} shrank at {i}");
                }
                last.insert(name.clone(), st.gamma);
            }
        }
    }

    #[test]
    fn missing_gradient_is_state_error_and_leaves_params() {
        let base = Sgd::new(SgdConfig::plain(0.05)).unwrap();
        let mut ftp = Ftp::new(&toy(), base, 1.0, &[] as &[&str]).unwrap();
        let before = ftp.params.clone();
        ftp.params[0].grad = Some(DenseMatrix::zeros(2, 3));
        let err = ftp_step(
            &mut ftp.params,
            &mut ftp.gammas,
            &mut ftp.base,
            &ftp.exclude,
        );
        assert!(matches!(err, Err(Error::State(_))));
        assert_eq!(ftp.params[1], before[1]);
        assert_eq!(ftp.params[0].value, before[0].value);
    }

    #[test]
    fn unknown_exclude_name_rejected() {
        let base = Sgd::new(SgdConfig::plain(0.05)).unwrap();
        assert!(matches!(
            Ftp::new(&toy(), base, 1.0, &["head.weight"]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rebase_resets_anchor_and_radius() {
        let base = Sgd::new(SgdConfig::plain(0.5)).unwrap();
        let mut ftp = Ftp::new(&toy(), base, 1.0, &[] as &[&str]).unwrap();
        for i in 0..30 {
            ftp.step(&grads(-1.0 + 0.01 * i as f64)).unwrap();
        }
        let original = toy();
        ftp.rebase();
        let snapshot = ftp.params.clone();
        ftp.rebase();
        assert_eq!(ftp.params, snapshot);
        for p in &ftp.params {
            assert!(p.anchor.bitwise_eq(&p.value));
            assert!(p.prev_unconstrained.is_none());
            let st = ftp.gammas[&p.name];
            assert_eq!((st.gamma, st.m, st.v, st.t), (GAMMA_INIT, 0.0, 0.0, 0));
            // near no-op projection right after rebase
            let mut q = p.value.clone();
            project_rows_in_place(&mut q, &p.anchor, GAMMA_INIT).unwrap();
            assert!(q.bitwise_eq(&p.value));
        }
        ftp.step(&grads(1.0)).unwrap();
        for p in &ftp.params {
            let d = mars_norm(&p.value.sub(&p.anchor).unwrap()).unwrap();
            assert!(d <= ftp.gammas[&p.name].gamma + 1e-9);
            let from_original =
                mars_norm(&p.value.sub(original.get(&p.name).unwrap()).unwrap()).unwrap();
            assert!(
                from_original > 1e-3,
                "{} should have moved away from the old anchor",
                p.name
            );
        }
    }
}
