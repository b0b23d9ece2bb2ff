use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutParams {
    pub ratio: f32,
}

impl DropoutParams {
    pub fn new(ratio: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::config(format!("dropout ratio {ratio} must lie in [0, 1)")));
        }
        Ok(DropoutParams { ratio })
    }
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (0 or `1/(1−ratio)`), which backward reapplies.
pub fn dropout_forward<R: Rng + ?Sized>(
    input: &Tensor,
    params: DropoutParams,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    DropoutParams::new(params.ratio)?;
    if mode == Mode::Test || params.ratio == 0.0 {
        return Ok((input.clone(), Tensor::filled(input.shape().clone(), 1.0)));
    }
    let keep = 1.0 / (1.0 - params.ratio);
    let mask_data: Vec<f32> = (0..input.len())
        .map(|_| if rng.random::<f32>() < params.ratio { 0.0 } else { keep })
        .collect();
    let mask = Tensor::from_vec(input.shape().clone(), mask_data)?;
    let out = input.data().iter().zip(mask.data()).map(|(x, m)| x * m).collect();
    Ok((Tensor::from_vec(input.shape().clone(), out)?, mask))
}

pub fn dropout_backward(grad_out: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != mask.shape() {
        return Err(Error::shape("dropout gradient and mask shapes differ"));
    }
    let data = grad_out.data().iter().zip(mask.data()).map(|(g, m)| g * m).collect();
    Tensor::from_vec(grad_out.shape().clone(), data)
}
