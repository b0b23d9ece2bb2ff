use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `grad_out` where the cached input is strictly positive.
pub fn relu_backward(grad_out: &Tensor, cached_in: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != cached_in.shape() {
        return Err(Error::shape(format!(
            "relu gradient {} does not match input {}",
            grad_out.shape(),
            cached_in.shape()
        )));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(cached_in.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(grad_out.shape().clone(), data)
}
