// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward kernels and their vector-Jacobian products.
//!
//! Each differentiable operation comes as a pair: `op(...)` computes the
//! forward value and `op_vjp(..., g)` maps an upstream cotangent `g` (same
//! shape as the output) to cotangents for the inputs. Matrices are 2-D
//! row-major; row-wise kernels treat a 1-D tensor as a single row.

use super::Tensor;
use crate::error::{Error, Result};

fn require_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!("{what}: expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a · b` for `a: [m×k]`, `b: [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d(a, "matmul lhs")?;
    let (k2, n) = require_2d(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul: [{m}×{k}] · [{k2}×{n}]")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d(a, "matmul_nt lhs")?;
    let (n, k2) = require_2d(b, "matmul_nt rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul_nt: [{m}×{k}] · [{n}×{k2}]ᵀ")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// `aᵀ · b` for `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = require_2d(a, "matmul_tn lhs")?;
    let (k2, n) = require_2d(b, "matmul_tn rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!("matmul_tn: [{k}×{m}]ᵀ · [{k2}×{n}]")));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let api = ad[p * m + i];
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// VJP of [`matmul`]: `(g·bᵀ, aᵀ·g)`.
pub fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_nt(g, b)?, matmul_tn(a, g)?))
}

/// VJP of [`matmul_nt`]: `(g·b, gᵀ·a)`.
pub fn matmul_nt_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul(g, b)?, matmul_tn(g, a)?))
}

fn softmax_slice(x: &[f64], temperature: f64, out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - max) / temperature).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// Softmax of a vector at the given temperature, `exp(v/T) / Σ exp(v/T)`.
pub fn softmax(v: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    let mut out = vec![0.0; v.len()];
    softmax_slice(v.data(), temperature, &mut out);
    Tensor::new(v.shape().to_vec(), out)
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    let c = x.cols();
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.data().chunks(c).zip(out.chunks_mut(c)) {
        softmax_slice(xr, temperature, or);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// VJP of row-wise softmax given its output `y`: `(diag(y) − y yᵀ) g / T` per row.
pub fn softmax_vjp(y: &Tensor, g: &Tensor, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    if y.shape() != g.shape() {
        return Err(Error::Shape(format!("softmax_vjp: {:?} vs {:?}", y.shape(), g.shape())));
    }
    let c = y.cols();
    let mut out = vec![0.0; y.len()];
    for ((yr, gr), or) in y.data().chunks(c).zip(g.data().chunks(c)).zip(out.chunks_mut(c)) {
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yi), &gi) in or.iter_mut().zip(yr).zip(gr) {
            *o = yi * (gi - inner) / temperature;
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Saved intermediates of a row-wise layer norm.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Layer norm of a single vector: `gain ⊙ (v − μ)/√(σ² + eps) + bias`.
pub fn layer_norm(v: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (out, _) = layer_norm_rows(v, gain, bias, eps)?;
    out.reshape(v.shape())
}

/// Row-wise layer norm; returns the output and what the VJP needs.
pub fn layer_norm_rows(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    let n = x.cols();
    if n < 2 {
        return Err(Error::Domain(format!("layer norm needs at least 2 features, got {n}")));
    }
    if !(eps > 0.0) {
        return Err(Error::Domain(format!("layer norm eps must be positive, got {eps}")));
    }
    if gain.len() != n || bias.len() != n {
        return Err(Error::Shape(format!(
            "layer norm: features {n}, gain {:?}, bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let rows = x.rows();
    let mut out = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x.data()[r * n..(r + 1) * n];
        let mean = xr.iter().sum::<f64>() / n as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..n {
            let xh = (xr[j] - mean) * is;
            normalized[r * n + j] = xh;
            out[r * n + j] = gain.data()[j] * xh + bias.data()[j];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        LayerNormCache { normalized: Tensor::new(x.shape().to_vec(), normalized)?, inv_std },
    ))
}

/// VJP of [`layer_norm_rows`]: cotangents for `(x, gain, bias)`.
pub fn layer_norm_vjp(
    cache: &LayerNormCache,
    gain: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let xhat = &cache.normalized;
    if xhat.shape() != g.shape() {
        return Err(Error::Shape(format!("layer_norm_vjp: {:?} vs {:?}", xhat.shape(), g.shape())));
    }
    let n = xhat.cols();
    let rows = xhat.rows();
    let mut gx = vec![0.0; xhat.len()];
    let mut ggain = vec![0.0; n];
    let mut gbias = vec![0.0; n];
    let mut gxhat = vec![0.0; n];
    for r in 0..rows {
        let gr = &g.data()[r * n..(r + 1) * n];
        let xr = &xhat.data()[r * n..(r + 1) * n];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for j in 0..n {
            ggain[j] += gr[j] * xr[j];
            gbias[j] += gr[j];
            gxhat[j] = gr[j] * gain.data()[j];
            sum_g += gxhat[j];
            sum_gx += gxhat[j] * xr[j];
        }
        let is = cache.inv_std[r];
        for j in 0..n {
            gx[r * n + j] = is / n as f64 * (n as f64 * gxhat[j] - sum_g - xr[j] * sum_gx);
        }
    }
    Ok((
        Tensor::new(xhat.shape().to_vec(), gx)?,
        Tensor::new(gain.shape().to_vec(), ggain)?,
        Tensor::new(gain.shape().to_vec(), gbias)?,
    ))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

pub fn gelu_vjp(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    let d = x.map(|v| {
        let u = GELU_C * (v + 0.044715 * v * v * v);
        let t = u.tanh();
        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
    });
    d.mul(g)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_vjp(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    x.map(|v| if v > 0.0 { 1.0 } else { 0.0 }).mul(g)
}

/// Mean next-token cross-entropy over rows of `logits` with integer targets.
/// Returns the loss and the row-wise softmax used by the VJP.
pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let rows = logits.rows();
    let c = logits.cols();
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "cross entropy: {rows} rows but {} targets",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Input(format!("target class {bad} out of range for {c} classes")));
    }
    let probs = softmax_rows(logits, 1.0)?;
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[t];
    }
    Ok((loss / rows as f64, probs))
}

/// VJP of [`cross_entropy_rows`] for an upstream scalar cotangent `g`.
pub fn cross_entropy_vjp(probs: &Tensor, targets: &[usize], g: f64) -> Tensor {
    let rows = probs.rows();
    let c = probs.cols();
    let mut out = probs.data().to_vec();
    for (r, &t) in targets.iter().enumerate() {
        out[r * c + t] -= 1.0;
    }
    let scale = g / rows as f64;
    for v in &mut out {
        *v *= scale;
    }
    Tensor::new(probs.shape().to_vec(), out).expect("shape preserved")
}
