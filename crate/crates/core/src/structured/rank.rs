use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative tolerance for [`numeric_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Singular values in descending order.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    if a.rank() != 2 {
        return Err(Error::shape("singular_values", a.shape(), &[]));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("matrix passed to singular_values".into()));
    }
    let m = DMatrix::from_row_slice(a.shape()[0], a.shape()[1], a.data());
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Number of singular values above `tol · σ_max`.
pub fn numeric_rank(a: &Tensor, tol: f64) -> Result<usize> {
    if tol <= 0.0 || !tol.is_finite() {
        return Err(Error::config("rank tolerance must be positive"));
    }
    let sv = singular_values(a)?;
    let cut = tol * sv.first().copied().unwrap_or(0.0);
    Ok(sv.iter().filter(|&&s| s > cut).count())
}
