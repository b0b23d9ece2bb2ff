use crate::error::{Error, Result};
use crate::tensor::{col2im_add, im2col_into, sgemm, ConvGeometry, Shape, Tensor, Transpose};

/// Hyperparameters of a (possibly grouped) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub pad: usize,
    pub group: usize,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec { out_channels, kernel: (kernel, kernel), stride, pad, group: 1 }
    }

    pub fn with_group(mut self, group: usize) -> Self {
        self.group = group;
        self
    }

    pub fn weight_shape(&self, in_channels: usize) -> Result<Shape> {
        Shape::new(vec![self.out_channels, in_channels / self.group, self.kernel.0, self.kernel.1])
    }

    fn validate(&self, in_channels: usize) -> Result<()> {
        if self.out_channels == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return Err(Error::shape("conv output channels, kernel and stride must be positive"));
        }
        if self.group == 0 || in_channels % self.group != 0 || self.out_channels % self.group != 0 {
            return Err(Error::shape(format!(
                "group {} must divide input channels {in_channels} and output channels {}",
                self.group, self.out_channels
            )));
        }
        Ok(())
    }
}

/// Per-sample output shape for a `(C,H,W)` input.
pub fn conv_shape(input: &Shape, spec: &ConvSpec) -> Result<Shape> {
    let &[c, h, w] = input.dims() else {
        return Err(Error::shape(format!("convolution expects (C,H,W) input, got {input}")));
    };
    spec.validate(c)?;
    let g = ConvGeometry::new((c, h, w), spec.kernel, spec.stride, spec.pad)?;
    Shape::new(vec![spec.out_channels, g.out_h, g.out_w])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub spec: ConvSpec,
    /// `(out_channels, in_channels / group, kh, kw)`
    pub weights: Tensor,
    /// `(out_channels)`
    pub bias: Tensor,
}

impl ConvParams {
    pub fn new(spec: ConvSpec, weights: Tensor, bias: Tensor) -> Result<Self> {
        let &[co, _, kh, kw] = weights.dims() else {
            return Err(Error::shape(format!("conv weights must be rank 4, got {}", weights.shape())));
        };
        if co != spec.out_channels || (kh, kw) != spec.kernel {
            return Err(Error::shape(format!(
                "conv weights {} inconsistent with {} outputs of {}x{}",
                weights.shape(),
                spec.out_channels,
                spec.kernel.0,
                spec.kernel.1
            )));
        }
        if bias.dims() != [co] {
            return Err(Error::shape(format!("conv bias {} must be ({co})", bias.shape())));
        }
        Ok(ConvParams { spec, weights, bias })
    }

    fn in_channels(&self) -> usize {
        self.weights.dims()[1] * self.spec.group
    }

    fn geometry(&self, input: &Tensor) -> Result<(usize, ConvGeometry, ConvGeometry)> {
        let &[n, c, h, w] = input.dims() else {
            return Err(Error::shape(format!("convolution expects (N,C,H,W), got {}", input.shape())));
        };
        self.spec.validate(c)?;
        if c != self.in_channels() {
            return Err(Error::shape(format!(
                "input has {c} channels, weights expect {}",
                self.in_channels()
            )));
        }
        let full = ConvGeometry::new((c, h, w), self.spec.kernel, self.spec.stride, self.spec.pad)?;
        let per_group = ConvGeometry { channels: c / self.spec.group, ..full };
        Ok((n, full, per_group))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Cross-correlation plus per-channel bias, lowered through im2col + GEMM.
pub fn conv_forward(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (n, full, g) = p.geometry(input)?;
    let groups = p.spec.group;
    let co = p.spec.out_channels;
    let co_g = co / groups;
    let (k, hw) = (g.col_rows(), g.col_cols());
    let in_plane = g.channels * g.height * g.width;
    let mut out = vec![0.0; n * co * hw];
    let mut cols = vec![0.0; k * hw];
    for s in 0..n {
        let x = input.sample(s);
        let y = &mut out[s * co * hw..(s + 1) * co * hw];
        for gi in 0..groups {
            im2col_into(&x[gi * in_plane..(gi + 1) * in_plane], &g, &mut cols);
            let w = &p.weights.data()[gi * co_g * k..(gi + 1) * co_g * k];
            let yg = &mut y[gi * co_g * hw..(gi + 1) * co_g * hw];
            sgemm(Transpose::No, Transpose::No, co_g, hw, k, 1.0, w, &cols, 0.0, yg)?;
        }
        for (c, plane) in y.chunks_mut(hw).enumerate() {
            let b = p.bias.data()[c];
            plane.iter_mut().for_each(|v| *v += b);
        }
    }
    Tensor::from_vec(Shape::new(vec![n, co, full.out_h, full.out_w])?, out)
}

pub fn conv_backward(grad_out: &Tensor, cached_in: &Tensor, p: &ConvParams) -> Result<ConvGrads> {
    let (n, full, g) = p.geometry(cached_in)?;
    let groups = p.spec.group;
    let co = p.spec.out_channels;
    let co_g = co / groups;
    let (k, hw) = (g.col_rows(), g.col_cols());
    if grad_out.dims() != [n, co, full.out_h, full.out_w] {
        return Err(Error::shape(format!(
            "conv output gradient {} does not match forward output ({n},{co},{},{})",
            grad_out.shape(),
            full.out_h,
            full.out_w
        )));
    }
    let in_plane = g.channels * g.height * g.width;
    let mut grad_in = Tensor::zeros(cached_in.shape().clone());
    let mut grad_w = Tensor::zeros(p.weights.shape().clone());
    let mut grad_b = vec![0.0f32; co];
    let mut cols = vec![0.0; k * hw];
    let mut dcols = vec![0.0; k * hw];
    let in_stride = cached_in.len() / n;
    for s in 0..n {
        let x = cached_in.sample(s);
        let dy = grad_out.sample(s);
        for gi in 0..groups {
            let dyg = &dy[gi * co_g * hw..(gi + 1) * co_g * hw];
            im2col_into(&x[gi * in_plane..(gi + 1) * in_plane], &g, &mut cols);
            let dw = &mut grad_w.data_mut()[gi * co_g * k..(gi + 1) * co_g * k];
            sgemm(Transpose::No, Transpose::Yes, co_g, k, hw, 1.0, dyg, &cols, 1.0, dw)?;
            let w = &p.weights.data()[gi * co_g * k..(gi + 1) * co_g * k];
            sgemm(Transpose::Yes, Transpose::No, k, hw, co_g, 1.0, w, dyg, 0.0, &mut dcols)?;
            let dx = &mut grad_in.data_mut()[s * in_stride..(s + 1) * in_stride];
            col2im_add(&dcols, &g, &mut dx[gi * in_plane..(gi + 1) * in_plane]);
        }
        for (c, plane) in dy.chunks(hw).enumerate() {
            grad_b[c] += plane.iter().sum::<f32>();
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weights: grad_w,
        bias: Tensor::from_vec(Shape::new(vec![co])?, grad_b)?,
    })
}
