// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite differences, used as an independent gradient oracle.

use super::Tensor;
use crate::error::Result;

/// Per-coordinate step: `1e-5 · max(1, |x|)`.
pub fn step_for(x: f64) -> f64 {
    1e-5 * x.abs().max(1.0)
}

/// Central-difference gradient of a scalar function at `x`.
pub fn central_difference<F>(mut f: F, x: &Tensor) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let h = step_for(x0);
        probe.data_mut()[i] = x0 + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = x0;
        out[i] = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or the absolute difference when both are ~0.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm_l2().max(b.norm_l2());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
