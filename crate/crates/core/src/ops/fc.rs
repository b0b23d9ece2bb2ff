use crate::error::{Error, Result};
use crate::tensor::{sgemm, Shape, Tensor, Transpose};

/// Inner-product parameters: `out = Wᵀx + b` with `W` stored `(n, m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl FcParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let &[_, m] = weights.dims() else {
            return Err(Error::shape(format!("fc weights must be (n, m), got {}", weights.shape())));
        };
        if bias.dims() != [m] {
            return Err(Error::shape(format!("fc bias {} must be ({m})", bias.shape())));
        }
        Ok(FcParams { weights, bias })
    }

    pub fn inputs(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weights.dims()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

fn batch_and_len(input: &Tensor, n_in: usize) -> Result<usize> {
    let batch = input.batch();
    let per = input.len() / batch;
    if per != n_in {
        return Err(Error::shape(format!(
            "fc input has {per} values per sample, weights expect {n_in}"
        )));
    }
    Ok(batch)
}

/// Input `(N, ...)` is flattened per sample; output is `(N, m)`.
pub fn fc_forward(input: &Tensor, p: &FcParams) -> Result<Tensor> {
    let (n_in, m) = (p.inputs(), p.outputs());
    let batch = batch_and_len(input, n_in)?;
    let mut out = Vec::with_capacity(batch * m);
    for _ in 0..batch {
        out.extend_from_slice(p.bias.data());
    }
    sgemm(Transpose::No, Transpose::No, batch, m, n_in, 1.0, input.data(), p.weights.data(), 1.0, &mut out)?;
    Tensor::from_vec(Shape::new(vec![batch, m])?, out)
}

pub fn fc_backward(grad_out: &Tensor, cached_in: &Tensor, p: &FcParams) -> Result<FcGrads> {
    let (n_in, m) = (p.inputs(), p.outputs());
    let batch = batch_and_len(cached_in, n_in)?;
    if grad_out.dims() != [batch, m] {
        return Err(Error::shape(format!(
            "fc output gradient {} does not match ({batch},{m})",
            grad_out.shape()
        )));
    }
    let mut grad_w = Tensor::zeros(p.weights.shape().clone());
    sgemm(Transpose::Yes, Transpose::No, n_in, m, batch, 1.0, cached_in.data(), grad_out.data(), 0.0, grad_w.data_mut())?;
    let mut grad_in = Tensor::zeros(cached_in.shape().clone());
    sgemm(Transpose::No, Transpose::Yes, batch, n_in, m, 1.0, grad_out.data(), p.weights.data(), 0.0, grad_in.data_mut())?;
    let mut grad_b = vec![0.0f32; m];
    for row in grad_out.data().chunks(m) {
        for (b, g) in grad_b.iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(FcGrads { input: grad_in, weights: grad_w, bias: Tensor::from_vec(Shape::new(vec![m])?, grad_b)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights() {
        let p = FcParams::new(
            Tensor::from_dims(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]),
            Tensor::from_dims(&[3], vec![0.0; 3]),
        )
        .unwrap();
        let x = Tensor::from_dims(&[1, 3], vec![0.25, -4.0, 9.0]);
        assert_eq!(fc_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn hand_matrix_vector() {
        // Wᵀx with W = [[1,2],[3,4]], x = (1,1): (1+3, 2+4) + b.
        let p = FcParams::new(
            Tensor::from_dims(&[2, 2], vec![1., 2., 3., 4.]),
            Tensor::from_dims(&[2], vec![0.5, -0.5]),
        )
        .unwrap();
        let y = fc_forward(&Tensor::from_dims(&[1, 2], vec![1.0, 1.0]), &p).unwrap();
        assert_eq!(y.data(), &[4.5, 5.5]);
    }

    #[test]
    fn length_mismatch() {
        let p = FcParams::new(Tensor::from_dims(&[2, 2], vec![0.0; 4]), Tensor::from_dims(&[2], vec![0.0; 2])).unwrap();
        assert!(matches!(fc_forward(&Tensor::from_dims(&[1, 3], vec![0.0; 3]), &p), Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&[2, 6], &mut rng);
        let p = FcParams::new(random_tensor(&[6, 4], &mut rng), random_tensor(&[4], &mut rng)).unwrap();
        let probe = random_tensor(&[2, 4], &mut rng);
        let loss = |x: &Tensor, p: &FcParams| -> f64 {
            let y = fc_forward(x, p).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let g = fc_backward(&probe, &x, &p).unwrap();
        assert!(check_gradient(&x, &g.input, 1e-3, |xx| loss(xx, &p)).max_rel_error < 1e-3);
        let r = check_gradient(&p.weights, &g.weights, 1e-3, |w| {
            loss(&x, &FcParams { weights: w.clone(), ..p.clone() })
        });
        assert!(r.max_rel_error < 1e-3);
        let r = check_gradient(&p.bias, &g.bias, 1e-3, |b| loss(&x, &FcParams { bias: b.clone(), ..p.clone() }));
        assert!(r.max_rel_error < 1e-3);
    }
}
