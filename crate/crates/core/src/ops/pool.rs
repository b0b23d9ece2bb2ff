use crate::error::{Error, Result};
use crate::tensor::{conv_out_extent, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: (usize, usize),
    pub stride: usize,
}

impl PoolSpec {
    pub fn new(kind: PoolKind, kernel: usize, stride: usize) -> Self {
        PoolSpec { kind, kernel: (kernel, kernel), stride }
    }
}

pub fn pool_shape(input: &Shape, spec: &PoolSpec) -> Result<Shape> {
    let &[c, h, w] = input.dims() else {
        return Err(Error::shape(format!("pooling expects (C,H,W) input, got {input}")));
    };
    let oh = conv_out_extent(h, spec.kernel.0, spec.stride, 0)?;
    let ow = conv_out_extent(w, spec.kernel.1, spec.stride, 0)?;
    Shape::new(vec![c, oh, ow])
}

/// What pooling backward needs from forward.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolCache {
    pub input_shape: Shape,
    /// Flat input offset of each output's maximum; empty for mean pooling.
    pub argmax: Vec<usize>,
}

/// Max pooling breaks ties by the first element in row-major window order.
pub fn pool_forward(input: &Tensor, spec: &PoolSpec) -> Result<(Tensor, PoolCache)> {
    let &[n, c, h, w] = input.dims() else {
        return Err(Error::shape(format!("pooling expects (N,C,H,W), got {}", input.shape())));
    };
    let out_shape = pool_shape(&Shape::new(vec![c, h, w])?, spec)?;
    let (oh, ow) = (out_shape.dims()[1], out_shape.dims()[2]);
    let (kh, kw) = spec.kernel;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::new();
    if spec.kind == PoolKind::Max {
        argmax.reserve(n * c * oh * ow);
    }
    let inv_area = 1.0 / (kh * kw) as f32;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (oy * spec.stride, ox * spec.stride);
                match spec.kind {
                    PoolKind::Max => {
                        let mut best = base + y0 * w + x0;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let i = base + (y0 + dy) * w + x0 + dx;
                                if x[i] > x[best] {
                                    best = i;
                                }
                            }
                        }
                        out.push(x[best]);
                        argmax.push(best);
                    }
                    PoolKind::Mean => {
                        let mut s = 0.0;
                        for dy in 0..kh {
                            let row = base + (y0 + dy) * w + x0;
                            s += x[row..row + kw].iter().sum::<f32>();
                        }
                        out.push(s * inv_area);
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(Shape::new(vec![n, c, oh, ow])?, out)?;
    Ok((out, PoolCache { input_shape: input.shape().clone(), argmax }))
}

pub fn pool_backward(grad_out: &Tensor, cache: &PoolCache, spec: &PoolSpec) -> Result<Tensor> {
    let &[n, c, h, w] = cache.input_shape.dims() else {
        return Err(Error::shape("pool cache holds a non-4D input shape"));
    };
    let expected = pool_shape(&Shape::new(vec![c, h, w])?, spec)?;
    let (oh, ow) = (expected.dims()[1], expected.dims()[2]);
    if grad_out.dims() != [n, c, oh, ow] {
        return Err(Error::shape(format!(
            "pool output gradient {} does not match ({n},{c},{oh},{ow})",
            grad_out.shape()
        )));
    }
    let mut grad_in = Tensor::zeros(cache.input_shape.clone());
    let gi = grad_in.data_mut();
    let g = grad_out.data();
    match spec.kind {
        PoolKind::Max => {
            if cache.argmax.len() != g.len() {
                return Err(Error::usage("max-pool backward requires the forward argmax cache"));
            }
            for (&src, &dst) in g.iter().zip(&cache.argmax) {
                gi[dst] += src;
            }
        }
        PoolKind::Mean => {
            let (kh, kw) = spec.kernel;
            let share = 1.0 / (kh * kw) as f32;
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let v = g[(plane * oh + oy) * ow + ox] * share;
                        for dy in 0..kh {
                            let row = base + (oy * spec.stride + dy) * w + ox * spec.stride;
                            gi[row..row + kw].iter_mut().for_each(|e| *e += v);
                        }
                    }
                }
            }
        }
    }
    Ok(grad_in)
}
