//! Reverse-mode rules for the kernel primitives (64-bit only).

use crate::attn::AttnProbs;
use crate::error::{Error, Result};
use crate::kernel::{gelu_grad, layer_norm_stats, matmul_nt, matmul_tn, rms_inv, Tensor};

/// `y = x · w`: returns `(dx, dw)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((matmul_nt(dy, w)?, matmul_tn(x, dy)?))
}

/// `y = gamma ⊙ x / rms(x)` per row: returns `(dx, dgamma)`.
pub fn rms_norm_backward(x: &Tensor, gamma: &Tensor, dy: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    if x.shape() != dy.shape() || gamma.len() != x.last_dim() {
        return Err(Error::shape("rms_norm_backward", x.shape(), dy.shape()));
    }
    let d = x.last_dim();
    let g = gamma.data();
    let mut dx = Vec::with_capacity(x.len());
    let mut dgamma = vec![0.0; d];
    for (xr, dyr) in x.rows().zip(dy.rows()) {
        let r = rms_inv(xr, eps);
        let mut dot = 0.0;
        for i in 0..d {
            dgamma[i] += dyr[i] * xr[i] * r;
            dot += dyr[i] * g[i] * xr[i];
        }
        let c = r * r * r * dot / d as f64;
        dx.extend((0..d).map(|i| r * g[i] * dyr[i] - c * xr[i]));
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(&[d], dgamma)?))
}

/// LayerNorm with affine parameters: returns `(dx, dgamma, dbeta)`. The
/// mean and variance are differentiated through in full.
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    dy: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    if x.shape() != dy.shape() || gamma.len() != x.last_dim() {
        return Err(Error::shape("layer_norm_backward", x.shape(), dy.shape()));
    }
    let d = x.last_dim();
    let n = d as f64;
    let g = gamma.data();
    let mut dx = Vec::with_capacity(x.len());
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for (xr, dyr) in x.rows().zip(dy.rows()) {
        let (mean, inv) = layer_norm_stats(xr, eps);
        let (mut s1, mut s2) = (0.0, 0.0);
        for i in 0..d {
            xhat[i] = (xr[i] - mean) * inv;
            dxhat[i] = dyr[i] * g[i];
            dgamma[i] += dyr[i] * xhat[i];
            dbeta[i] += dyr[i];
            s1 += dxhat[i];
            s2 += dxhat[i] * xhat[i];
        }
        dx.extend((0..d).map(|i| inv / n * (n * dxhat[i] - s1 - xhat[i] * s2)));
    }
    Ok((Tensor::new(x.shape(), dx)?, Tensor::new(&[d], dgamma)?, Tensor::new(&[d], dbeta)?))
}

pub fn gelu_backward(h: &Tensor, dact: &Tensor) -> Result<Tensor> {
    h.zip_map(dact, "gelu_backward", |x, d| gelu_grad(x) * d)
}

/// Scatter-adds the rows of `dy` into a `vocab × d` table gradient.
pub fn embed_backward(ids: &[usize], dy: &Tensor, vocab: usize) -> Result<Tensor> {
    let d = dy.last_dim();
    let mut out = Tensor::zeros(&[vocab, d]);
    for (&id, row) in ids.iter().zip(dy.rows()) {
        if id >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        for (o, v) in out.row_mut(id).iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(out)
}

/// Gradient w.r.t. the unscaled scores of `p = softmax(scale · z)`.
pub fn softmax_backward(p: &[f64], dp: &[f64], scale: f64) -> Vec<f64> {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, di)| scale * pi * (di - inner)).collect()
}

/// Backpropagates `u[t,h] = Σ_s p[h,t,s] · value(h,s)` through the values
/// and the row softmax. `dvalue(h, s, p, du)` receives each value-gradient
/// contribution `p · du`; the returned buffer holds the score gradients in
/// the layout of `probs.data`.
pub fn attention_backward<'a>(
    probs: &AttnProbs<f64>,
    du: &Tensor,
    d_v: usize,
    scale: f64,
    value: impl Fn(usize, usize) -> &'a [f64],
    mut dvalue: impl FnMut(usize, usize, f64, &[f64]),
) -> Vec<f64> {
    let (nh, t_new, s_total) = (probs.n_head, probs.t, probs.s);
    let mut dscores = vec![0.0; probs.data.len()];
    for h in 0..nh {
        for t in 0..t_new {
            let du_row = &du.row(t)[h * d_v..(h + 1) * d_v];
            let p = probs.row(h, t);
            let dp: Vec<f64> = (0..p.len())
                .map(|s| value(h, s).iter().zip(du_row).map(|(a, b)| a * b).sum())
                .collect();
            for (s, &ps) in p.iter().enumerate() {
                dvalue(h, s, ps, du_row);
            }
            let off = (h * t_new + t) * s_total;
            dscores[off..off + p.len()].copy_from_slice(&softmax_backward(p, &dp, scale));
        }
    }
    dscores
}
