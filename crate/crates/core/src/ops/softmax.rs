use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-wise softmax of `(N, C)` logits with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let &[_, c] = logits.dims() else {
        return Err(Error::shape(format!("softmax expects (N, C) logits, got {}", logits.shape())));
    };
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        let inv = (1.0 / sum) as f32;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::from_vec(logits.shape().clone(), out)
}

fn check_labels(labels: &[usize], n: usize, c: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::data(format!("{} labels supplied for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::data(format!("label {bad} outside [0, {c})")));
    }
    Ok(())
}

/// Mean cross-entropy over the batch. Returns the loss and the softmax
/// probabilities, which backward consumes.
pub fn softmax_loss_forward(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let probs = softmax_rows(logits)?;
    let (n, c) = (logits.dims()[0], logits.dims()[1]);
    check_labels(labels, n, c)?;
    let mut total = 0.0f64;
    for (i, row) in logits.data().chunks(c).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[i]] as f64;
    }
    Ok(((total / n as f64) as f32, probs))
}

/// `(softmax − onehot) / N`, scaled by the upstream loss gradient.
pub fn softmax_loss_backward(probs: &Tensor, labels: &[usize], loss_grad: f32) -> Result<Tensor> {
    let &[n, c] = probs.dims() else {
        return Err(Error::shape("softmax cache must be (N, C)"));
    };
    check_labels(labels, n, c)?;
    let scale = loss_grad / n as f32;
    let mut g = probs.data().to_vec();
    for (i, row) in g.chunks_mut(c).enumerate() {
        row[labels[i]] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::from_vec(probs.shape().clone(), g)
}
