//! Lowering of 2-D cross-correlation to matrix multiplication.

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// `floor((input + 2·pad − kernel) / stride) + 1`, or a shape error when that
/// is not positive.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::shape("kernel and stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Geometry of one lowered convolution over a single `(C,H,W)` sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        (kernel_h, kernel_w): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let out_h = conv_out_extent(height, kernel_h, stride, pad)?;
        let out_w = conv_out_extent(width, kernel_w, stride, pad)?;
        Ok(ConvGeometry { channels, height, width, kernel_h, kernel_w, stride, pad, out_h, out_w })
    }

    /// Rows of the lowered matrix: `C·kh·kw`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// Columns of the lowered matrix: `Hout·Wout`.
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Writes the `(C·kh·kw) × (Hout·Wout)` lowering of `input` into `cols`.
pub fn im2col_into(input: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    debug_assert_eq!(input.len(), g.channels * g.height * g.width);
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let out_cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut cols[row * out_cols..(row + 1) * out_cols];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if y < 0 || y as usize >= g.height {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if x < 0 || x as usize >= g.width { 0.0 } else { src[x as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col_into`]: scatters-adds `cols` back into `input_grad`.
pub fn col2im_add(cols: &[f32], g: &ConvGeometry, input_grad: &mut [f32]) {
    let out_cols = g.col_cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &cols[row * out_cols..(row + 1) * out_cols];
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + ki) as isize - g.pad as isize;
                    if y < 0 || y as usize >= g.height {
                        continue;
                    }
                    let y = y as usize;
                    for ox in 0..g.out_w {
                        let x = (ox * g.stride + kj) as isize - g.pad as isize;
                        if x >= 0 && (x as usize) < g.width {
                            plane[y * g.width + x as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Tensor-level lowering of a `(C,H,W)` input.
pub fn im2col(input: &Tensor, kernel: (usize, usize), stride: usize, pad: usize) -> Result<Tensor> {
    let &[c, h, w] = input.dims() else {
        return Err(Error::shape(format!("im2col expects (C,H,W), got {}", input.shape())));
    };
    let g = ConvGeometry::new((c, h, w), kernel, stride, pad)?;
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    im2col_into(input.data(), &g, &mut cols);
    Tensor::from_vec(Shape::new(vec![g.col_rows(), g.col_cols()])?, cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_receptive_field() {
        let x = Tensor::from_dims(&[1, 2, 2], vec![1., 2., 3., 4.]);
        let cols = im2col(&x, (2, 2), 1, 0).unwrap();
        assert_eq!(cols.dims(), &[4, 1]);
        assert_eq!(cols.data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn pointwise_kernel_is_flattened_input() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|v| v as f32).collect();
        let x = Tensor::from_dims(&[2, 3, 4], data.clone());
        let cols = im2col(&x, (1, 1), 1, 0).unwrap();
        assert_eq!(cols.dims(), &[2, 12]);
        assert_eq!(cols.data(), &data[..]);
    }

    #[test]
    fn ones_3x3_kernel_2x2() {
        let x = Tensor::from_dims(&[1, 3, 3], vec![1.0; 9]);
        let cols = im2col(&x, (2, 2), 1, 0).unwrap();
        // Nested-loop enumeration: 4 kernel taps x 4 output positions, all inside.
        let mut expected = Vec::new();
        for ki in 0..2 {
            for kj in 0..2 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let (y, x_) = (oy + ki, ox + kj);
                        expected.push(if y < 3 && x_ < 3 { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        assert_eq!(cols.dims(), &[4, 4]);
        assert_eq!(cols.data(), &expected[..]);
    }

    #[test]
    fn padding_contributes_zero() {
        let x = Tensor::from_dims(&[1, 1, 1], vec![5.0]);
        let cols = im2col(&x, (3, 3), 1, 1).unwrap();
        assert_eq!(cols.dims(), &[9, 1]);
        let nonzero: Vec<_> = cols.data().iter().copied().filter(|&v| v != 0.0).collect();
        assert_eq!(nonzero, vec![5.0]);
        assert_eq!(cols.data()[4], 5.0);
    }

    #[test]
    fn non_positive_extent_is_shape_error() {
        let x = Tensor::from_dims(&[1, 2, 2], vec![0.0; 4]);
        assert!(matches!(im2col(&x, (3, 3), 1, 0), Err(Error::Shape(_))));
        assert_eq!(conv_out_extent(227, 9, 4, 0).unwrap(), 55);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeometry::new((2, 5, 4), (3, 2), 2, 1).unwrap();
        let x: Vec<f32> = (0..40).map(|v| ((v * 7) % 11) as f32 - 5.0).collect();
        let y: Vec<f32> = (0..g.col_rows() * g.col_cols()).map(|v| ((v * 3) % 7) as f32 - 3.0).collect();
        let mut cols = vec![0.0; y.len()];
        im2col_into(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, &g, &mut back);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
