//! Row-wise projection onto a MARS ball around an anchor.
//!
//! A tensor is first viewed as a 2-D matrix whose rows are the units that the
//! constraint applies to independently; see [`canonicalize`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{l1_norm, DenseMatrix};

/// Floor on a row's L1 displacement used as the projection denominator.
pub const EPS_DIV: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeRule {
    /// `n x m` weight matrix, kept as is.
    Matrix,
    /// Vector of length `n` viewed as one `1 x n` row.
    Vector,
    /// Kernel `o x i x k...` flattened to `o x (i * k...)`.
    Kernel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionView {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub rule: ShapeRule,
}

/// Maps a tensor shape to the 2-D view whose rows are projected.
pub fn canonicalize(name: &str, dims: &[usize]) -> Result<ProjectionView> {
    let numel: usize = dims.iter().product();
    if dims.is_empty() || numel == 0 {
        return Err(Error::domain(format!(
            "cannot project empty tensor `{name}`"
        )));
    }
    let (rows, cols, rule) = match dims.len() {
        1 => (1, dims[0], ShapeRule::Vector),
        2 if dims[0] == 1 => (1, dims[1], ShapeRule::Vector),
        2 => (dims[0], dims[1], ShapeRule::Matrix),
        3 | 4 => (dims[0], numel / dims[0], ShapeRule::Kernel),
        r => {
            return Err(Error::Unsupported(format!(
                "tensor `{name}` has rank {r}; at most 4 axes are supported"
            )))
        }
    };
    Ok(ProjectionView {
        name: name.to_owned(),
        rows,
        cols,
        rule,
    })
}

/// Scale factor applied to a displacement row of L1 length `dist`.
///
/// Returns `None` when the row is already inside the ball and must be kept
/// verbatim.
#[inline]
pub fn row_scale(dist: f64, gamma: f64) -> Option<f64> {
    if dist <= gamma {
        None
    } else {
        Some((gamma / dist.max(EPS_DIV)).min(1.0))
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "projection radius must be >= 0, got {gamma}"
        )))
    }
}

/// Projects each row of `w_tilde` onto the L1 ball of radius `gamma` centred
/// on the matching row of `anchor`. Rows already inside are returned
/// unchanged. `gamma = f64::INFINITY` disables the constraint.
pub fn project_rows(
    w_tilde: &DenseMatrix,
    anchor: &DenseMatrix,
    gamma: f64,
) -> Result<DenseMatrix> {
    let mut out = w_tilde.clone();
    project_rows_in_place(&mut out, anchor, gamma)?;
    Ok(out)
}

pub fn project_rows_in_place(w: &mut DenseMatrix, anchor: &DenseMatrix, gamma: f64) -> Result<()> {
    check_gamma(gamma)?;
    w.check_same_shape(anchor, "project_rows")?;
    let mut diff = vec![0.0; w.cols()];
    for r in 0..w.rows() {
        let a = anchor.row(r);
        let row = w.row_mut(r);
        for ((d, &x), &x0) in diff.iter_mut().zip(row.iter()).zip(a) {
            *d = x - x0;
        }
        if let Some(scale) = row_scale(l1_norm(&diff), gamma) {
            for ((x, &d), &x0) in row.iter_mut().zip(&diff).zip(a) {
                *x = scale * d + x0;
            }
        }
    }
    Ok(())
}
