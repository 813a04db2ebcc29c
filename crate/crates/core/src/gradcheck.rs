//! Central-difference gradient checks.

use crate::error::Result;
use crate::tensor::Tensor;

/// Step used for coordinate `x`: `1e-5 · max(1, |x|)`.
pub fn default_step(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Central-difference gradient of scalar `f` at `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor) -> Result<Tensor> {
    let mut work = x.clone().into_data();
    let mut grad = vec![0.0; work.len()];
    for i in 0..work.len() {
        let x0 = work[i];
        let h = default_step(x0);
        work[i] = x0 + h;
        let fp = f(&Tensor::new(x.shape(), work.clone())?)?;
        work[i] = x0 - h;
        let fm = f(&Tensor::new(x.shape(), work.clone())?)?;
        work[i] = x0;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape(), grad)
}

/// `max |a − b| / max(1, max |b|)`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b) / b.max_abs().max(1.0)
}
