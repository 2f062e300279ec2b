//! Comparison methods: validation-driven trainable projection (TPGM), fixed
//! radius projection (MARS-SP), L2-SP regularization, weight-space
//! interpolation and parameter freezing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ftp::{
    hyper_gradient, is_projected, unconstrained_step, ExcludeSet, GammaState, ManagedParam,
};
use crate::matrix::DenseMatrix;
use crate::model::NamedParams;
use crate::optim::BaseOptimizer;
use crate::projection::{project_rows, project_rows_in_place};

/// Supplies loss gradients at arbitrary weights, typically on held-out
/// batches. `None` means the source has no data.
pub trait GradientSource {
    fn gradient(&mut self, params: &NamedParams) -> Result<Option<NamedParams>>;
}

impl<F> GradientSource for F
where
    F: FnMut(&NamedParams) -> Result<Option<NamedParams>>,
{
    fn gradient(&mut self, params: &NamedParams) -> Result<Option<NamedParams>> {
        self(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpgmState {
    pub gammas: BTreeMap<String, GammaState>,
    pub inner_iters: usize,
}

impl TpgmState {
    pub fn new(params: &[ManagedParam], exclude: &ExcludeSet, inner_iters: usize) -> Result<Self> {
        let mut gammas = BTreeMap::new();
        for p in params.iter().filter(|p| is_projected(p, exclude)) {
            gammas.insert(p.name.clone(), GammaState::new(1.0)?);
        }
        Ok(Self {
            gammas,
            inner_iters,
        })
    }
}

/// One TPGM iteration.
///
/// Runs the base step to obtain the unconstrained weights, then for
/// `inner_iters` rounds projects them with the current radii, pulls a
/// validation gradient at the projected weights and moves each radius by
/// Adam. The unconstrained weights stay fixed during the inner loop and are
/// finally projected with the updated radii. Each inner round costs one extra
/// gradient evaluation.
pub fn tpgm_step(
    params: &mut [ManagedParam],
    state: &mut TpgmState,
    base: &mut dyn BaseOptimizer,
    exclude: &ExcludeSet,
    validation: &mut dyn GradientSource,
) -> Result<()> {
    for p in params.iter().filter(|p| is_projected(p, exclude)) {
        if !state.gammas.contains_key(&p.name) {
            return Err(Error::state(format!(
                "no projection radius for `{}`",
                p.name
            )));
        }
    }
    unconstrained_step(params, base)?;

    for _ in 0..state.inner_iters {
        let mut probe = NamedParams::new();
        for p in params.iter() {
            let value = if is_projected(p, exclude) {
                project_rows(&p.value, &p.anchor, state.gammas[&p.name].gamma)?
            } else {
                p.value.clone()
            };
            probe.insert(p.name.clone(), value)?;
        }
        let grads = validation
            .gradient(&probe)?
            .ok_or_else(|| Error::config("TPGM needs a non-empty validation source"))?;
        for p in params.iter().filter(|p| is_projected(p, exclude)) {
            let g = grads.require(&p.name)?;
            let st = state.gammas.get_mut(&p.name).expect("checked above");
            let hg = hyper_gradient(g, &p.value, &p.anchor, st.gamma)?;
            st.adam_update(hg);
        }
    }

    for p in params.iter_mut().filter(|p| is_projected(p, exclude)) {
        project_rows_in_place(&mut p.value, &p.anchor, state.gammas[&p.name].gamma)?;
    }
    Ok(())
}

/// Base step followed by projection of every projected tensor onto a single
/// shared radius. `f64::INFINITY` turns the projection off.
pub fn mars_sp_step(
    params: &mut [ManagedParam],
    base: &mut dyn BaseOptimizer,
    gamma: f64,
    exclude: &ExcludeSet,
) -> Result<()> {
    if !(gamma >= 0.0) {
        return Err(Error::domain(format!(
            "MARS-SP radius must be >= 0, got {gamma}"
        )));
    }
    unconstrained_step(params, base)?;
    for p in params.iter_mut().filter(|p| is_projected(p, exclude)) {
        project_rows_in_place(&mut p.value, &p.anchor, gamma)?;
    }
    Ok(())
}

/// Gradient of `lambda/2 * ||W - W0||^2`.
pub fn l2_sp_grad(param: &DenseMatrix, anchor: &DenseMatrix, lambda: f64) -> Result<DenseMatrix> {
    if !(lambda >= 0.0) {
        return Err(Error::config(format!(
            "L2-SP lambda must be >= 0, got {lambda}"
        )));
    }
    param.zip_map(anchor, |w, w0| lambda * (w - w0))
}

/// Adds the L2-SP pull to the loaded gradient of every unfrozen tensor.
pub fn apply_l2_sp(params: &mut [ManagedParam], lambda: f64) -> Result<()> {
    for p in params.iter_mut().filter(|p| !p.frozen) {
        let extra = l2_sp_grad(&p.value, &p.anchor, lambda)?;
        let g = p
            .grad
            .as_mut()
            .ok_or_else(|| Error::state(format!("no gradient for `{}`", p.name)))?;
        g.axpy(1.0, &extra)?;
    }
    Ok(())
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..=1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "interpolation ratio must lie in [0, 1], got {ratio}"
        )))
    }
}

/// `ratio * fine_tuned + (1 - ratio) * anchor`. The endpoints are exact.
pub fn wise_interpolate(
    fine_tuned: &DenseMatrix,
    anchor: &DenseMatrix,
    ratio: f64,
) -> Result<DenseMatrix> {
    check_ratio(ratio)?;
    if ratio == 1.0 {
        fine_tuned.check_same_shape(anchor, "wise_interpolate")?;
        return Ok(fine_tuned.clone());
    }
    if ratio == 0.0 {
        fine_tuned.check_same_shape(anchor, "wise_interpolate")?;
        return Ok(anchor.clone());
    }
    fine_tuned.zip_map(anchor, |f, a| ratio * f + (1.0 - ratio) * a)
}

/// Tensor-wise interpolation of two whole models with identical names.
pub fn wise_interpolate_params(
    fine_tuned: &NamedParams,
    anchor: &NamedParams,
    ratio: f64,
) -> Result<NamedParams> {
    check_ratio(ratio)?;
    let mut out = NamedParams::new();
    for (name, f) in fine_tuned.iter() {
        out.insert(name, wise_interpolate(f, anchor.require(name)?, ratio)?)?;
    }
    Ok(out)
}

/// Freezes every tensor not named in `trainable`: its gradient is zeroed and
/// optimizer steps leave it untouched. Listed tensors are unfrozen.
pub fn freeze_mask<S: AsRef<str>>(params: &mut [ManagedParam], trainable: &[S]) -> Result<()> {
    for name in trainable {
        let name = name.as_ref();
        if !params.iter().any(|p| p.name == name) {
            return Err(Error::config(format!(
                "cannot keep unknown parameter `{name}` trainable"
            )));
        }
    }
    for p in params.iter_mut() {
        let keep = trainable.iter().any(|n| n.as_ref() == p.name);
        p.frozen = !keep;
        if !keep {
            if let Some(g) = p.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }
    Ok(())
}

/// Clears every freeze flag.
pub fn unfreeze_all(params: &mut [ManagedParam]) {
    for p in params.iter_mut() {
        p.frozen = false;
    }
}
