//! Cross-channel local response normalisation (AlexNet baseline only).
//!
//! `b = a · (k + α/n · Σ a²)^(−β)` with the sum over `n` neighbouring channels
//! centred on the current one.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrnParams {
    pub local_size: usize,
    pub alpha: f32,
    pub beta: f32,
    pub k: f32,
}

impl Default for LrnParams {
    fn default() -> Self {
        LrnParams { local_size: 5, alpha: 1e-4, beta: 0.75, k: 1.0 }
    }
}

fn dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.dims() {
        &[n, c, h, w] => Ok((n, c, h * w)),
        d => Err(Error::shape(format!("lrn expects (N,C,H,W), got {d:?}"))),
    }
}

fn scales(x: &Tensor, p: &LrnParams) -> Result<Vec<f32>> {
    let (n, c, hw) = dims(x)?;
    if p.local_size == 0 || p.local_size % 2 == 0 {
        return Err(Error::config("lrn local_size must be odd"));
    }
    let half = p.local_size / 2;
    let coef = p.alpha / p.local_size as f32;
    let xs = x.data();
    let mut scale = vec![0.0; xs.len()];
    for b in 0..n {
        for ch in 0..c {
            let lo = ch.saturating_sub(half);
            let hi = (ch + half).min(c - 1);
            for s in 0..hw {
                let mut acc = 0.0;
                for j in lo..=hi {
                    let v = xs[(b * c + j) * hw + s];
                    acc += v * v;
                }
                scale[(b * c + ch) * hw + s] = p.k + coef * acc;
            }
        }
    }
    Ok(scale)
}

pub fn lrn_forward(input: &Tensor, p: &LrnParams) -> Result<Tensor> {
    let scale = scales(input, p)?;
    let out = input.data().iter().zip(&scale).map(|(&a, &s)| a * s.powf(-p.beta)).collect();
    Tensor::from_vec(input.shape().clone(), out)
}

pub fn lrn_backward(grad_out: &Tensor, cached_in: &Tensor, p: &LrnParams) -> Result<Tensor> {
    if grad_out.shape() != cached_in.shape() {
        return Err(Error::shape("lrn gradient does not match cached input"));
    }
    let (n, c, hw) = dims(cached_in)?;
    let scale = scales(cached_in, p)?;
    let x = cached_in.data();
    let g = grad_out.data();
    // ratio_j = g_j · b_j / scale_j
    let ratio: Vec<f32> = (0..x.len()).map(|i| g[i] * x[i] * scale[i].powf(-p.beta) / scale[i]).collect();
    let half = p.local_size / 2;
    let coef = 2.0 * p.alpha * p.beta / p.local_size as f32;
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let lo = ch.saturating_sub(half);
            let hi = (ch + half).min(c - 1);
            for s in 0..hw {
                let i = (b * c + ch) * hw + s;
                let acc: f32 = (lo..=hi).map(|j| ratio[(b * c + j) * hw + s]).sum();
                out[i] = g[i] * scale[i].powf(-p.beta) - coef * x[i] * acc;
            }
        }
    }
    Tensor::from_vec(cached_in.shape().clone(), out)
}
