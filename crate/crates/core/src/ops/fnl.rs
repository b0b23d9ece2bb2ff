//! Batch normalisation without a learned scale/shift.
//!
//! Training normalises each node by its batch mean and biased batch variance
//! and folds those statistics into momentum-averaged running estimates;
//! inference normalises with the running estimates. `ε` is added to the
//! variance wherever it is divided by or square-rooted.
//!
//! The arithmetic is generic over the float type so the same code can be
//! gradient-checked in f64.

use num_traits::Float;

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FNL_DEFAULT_MOMENTUM: f32 = 0.99;
pub const FNL_DEFAULT_EPS: f32 = 1e-5;

/// Which values share one set of statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Granularity {
    /// Per channel over batch and spatial positions (per node for `(N, F)`).
    #[default]
    PerChannel,
    /// Every `(c, h, w)` position gets its own statistics.
    PerNode,
}

/// Index map: element `(b, node, s)` lives at `b·nodes·inner + node·inner + s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FnlLayout {
    pub batch: usize,
    pub nodes: usize,
    pub inner: usize,
}

impl FnlLayout {
    pub fn for_dims(dims: &[usize], granularity: Granularity) -> Result<Self> {
        match (dims, granularity) {
            ([n, f], _) => Ok(FnlLayout { batch: *n, nodes: *f, inner: 1 }),
            ([n, c, rest @ ..], Granularity::PerChannel) if !rest.is_empty() => {
                Ok(FnlLayout { batch: *n, nodes: *c, inner: rest.iter().product() })
            }
            ([n, rest @ ..], Granularity::PerNode) if rest.len() >= 2 => {
                Ok(FnlLayout { batch: *n, nodes: rest.iter().product(), inner: 1 })
            }
            _ => Err(Error::shape(format!("normalisation expects (N,F) or (N,C,H,W), got {dims:?}"))),
        }
    }

    /// Samples contributing to each node's statistics.
    pub fn count(&self) -> usize {
        self.batch * self.inner
    }

    fn len(&self) -> usize {
        self.batch * self.nodes * self.inner
    }

    fn for_each_in_node(&self, node: usize, mut f: impl FnMut(usize)) {
        for b in 0..self.batch {
            let base = (b * self.nodes + node) * self.inner;
            for i in base..base + self.inner {
                f(i);
            }
        }
    }
}

/// Batch statistics and normalised output: returns `(out, mean, var)`.
pub fn fnl_normalize_slice<T: Float>(x: &[T], layout: FnlLayout, eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    debug_assert_eq!(x.len(), layout.len());
    let count = layout.count() as f64;
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(layout.nodes);
    let mut vars = Vec::with_capacity(layout.nodes);
    for node in 0..layout.nodes {
        let mut sum = 0.0f64;
        layout.for_each_in_node(node, |i| sum += x[i].to_f64().unwrap());
        let mean = T::from(sum / count).unwrap();
        let mut sq = 0.0f64;
        layout.for_each_in_node(node, |i| {
            let d = (x[i] - mean).to_f64().unwrap();
            sq += d * d;
        });
        let var = T::from(sq / count).unwrap();
        let inv_std = (var + eps).sqrt().recip();
        layout.for_each_in_node(node, |i| out[i] = (x[i] - mean) * inv_std);
        means.push(mean);
        vars.push(var);
    }
    (out, means, vars)
}

/// Chain-rule backward through batch mean and variance:
///
/// ```text
/// dL/dσ  = −½ Σᵢ gᵢ (xᵢ−μ) (σ+ε)^(−3/2)
/// dL/dμ  = Σᵢ gᵢ · (−1/√(σ+ε)) + dL/dσ · (−2 Σᵢ (xᵢ−μ) / N)
/// dL/dxᵢ = gᵢ/√(σ+ε) + dL/dσ · 2(xᵢ−μ)/N + dL/dμ / N
/// ```
pub fn fnl_backward_slice<T: Float>(
    grad_out: &[T],
    x: &[T],
    mean: &[T],
    var: &[T],
    layout: FnlLayout,
    eps: T,
) -> Vec<T> {
    let count = T::from(layout.count()).unwrap();
    let two = T::from(2.0).unwrap();
    let half = T::from(0.5).unwrap();
    let mut grad_in = vec![T::zero(); x.len()];
    for node in 0..layout.nodes {
        let (mu, v) = (mean[node], var[node] + eps);
        let inv_std = v.sqrt().recip();
        let inv_std3 = inv_std * inv_std * inv_std;

        let (mut g_dev, mut g_sum, mut dev_sum) = (T::zero(), T::zero(), T::zero());
        layout.for_each_in_node(node, |i| {
            let dev = x[i] - mu;
            g_dev = g_dev + grad_out[i] * dev;
            g_sum = g_sum + grad_out[i];
            dev_sum = dev_sum + dev;
        });
        let d_var = -half * g_dev * inv_std3;
        let d_mean = -g_sum * inv_std + d_var * (-two * dev_sum / count);
        layout.for_each_in_node(node, |i| {
            grad_in[i] = grad_out[i] * inv_std + d_var * two * (x[i] - mu) / count + d_mean / count;
        });
    }
    grad_in
}

/// Batch statistics retained from the last training forward.
#[derive(Clone, Debug, PartialEq)]
pub struct FnlCache {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub input: Tensor,
    pub layout: FnlLayout,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FnlState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
    pub granularity: Granularity,
    pub cache: Option<FnlCache>,
}

impl FnlState {
    /// Fresh state with mean 0, variance 1.
    pub fn new(nodes: usize, granularity: Granularity) -> Self {
        FnlState {
            running_mean: vec![0.0; nodes],
            running_var: vec![1.0; nodes],
            momentum: FNL_DEFAULT_MOMENTUM,
            eps: FNL_DEFAULT_EPS,
            granularity,
            cache: None,
        }
    }

    pub fn with_momentum(mut self, momentum: f32) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn with_eps(mut self, eps: f32) -> Self {
        self.eps = eps;
        self
    }

    pub fn nodes(&self) -> usize {
        self.running_mean.len()
    }

    fn layout(&self, batch: &Tensor) -> Result<FnlLayout> {
        let layout = FnlLayout::for_dims(batch.dims(), self.granularity)?;
        if layout.nodes != self.nodes() {
            return Err(Error::shape(format!(
                "normalisation state tracks {} nodes, batch {} has {}",
                self.nodes(),
                batch.shape(),
                layout.nodes
            )));
        }
        Ok(layout)
    }
}

pub fn fnl_forward(batch: &Tensor, state: &mut FnlState, mode: Mode) -> Result<Tensor> {
    let layout = state.layout(batch)?;
    match mode {
        Mode::Train => {
            if layout.count() < 2 {
                return Err(Error::BatchSize(format!(
                    "training normalisation needs at least 2 samples per node, got {}",
                    layout.count()
                )));
            }
            let (out, mean, var) = fnl_normalize_slice(batch.data(), layout, state.eps);
            let w = state.momentum;
            for (rm, &m) in state.running_mean.iter_mut().zip(&mean) {
                *rm = w * *rm + (1.0 - w) * m;
            }
            for (rv, &v) in state.running_var.iter_mut().zip(&var) {
                *rv = w * *rv + (1.0 - w) * v;
            }
            state.cache = Some(FnlCache { mean, var, input: batch.clone(), layout });
            Tensor::from_vec(batch.shape().clone(), out)
        }
        Mode::Test => fnl_infer(batch, state),
    }
}

/// Inference-time normalisation with the running statistics.
pub fn fnl_infer(batch: &Tensor, state: &FnlState) -> Result<Tensor> {
    let layout = state.layout(batch)?;
    if let Some(node) = state.running_var.iter().position(|&v| !(v >= 0.0)) {
        return Err(Error::StateCorruption(format!(
            "running variance of node {node} is {}",
            state.running_var[node]
        )));
    }
    let x = batch.data();
    let mut out = vec![0.0; x.len()];
    for node in 0..layout.nodes {
        let mu = state.running_mean[node];
        let inv_std = 1.0 / (state.running_var[node] + state.eps).sqrt();
        layout.for_each_in_node(node, |i| out[i] = (x[i] - mu) * inv_std);
    }
    Tensor::from_vec(batch.shape().clone(), out)
}

pub fn fnl_backward(grad_out: &Tensor, state: &FnlState) -> Result<Tensor> {
    let cache = state
        .cache
        .as_ref()
        .ok_or_else(|| Error::usage("normalisation backward called without a training forward"))?;
    if grad_out.shape() != cache.input.shape() {
        return Err(Error::shape(format!(
            "normalisation gradient {} does not match cached input {}",
            grad_out.shape(),
            cache.input.shape()
        )));
    }
    let g = fnl_backward_slice(grad_out.data(), cache.input.data(), &cache.mean, &cache.var, cache.layout, state.eps);
    Tensor::from_vec(grad_out.shape().clone(), g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient_f64, random_tensor};
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn column(v: &[f32]) -> Tensor {
        Tensor::from_dims(&[v.len(), 1], v.to_vec())
    }

    #[test]
    fn batch_of_three() {
        let mut st = FnlState::new(1, Granularity::PerNode).with_eps(0.0);
        let y = fnl_forward(&column(&[1.0, 2.0, 3.0]), &mut st, Mode::Train).unwrap();
        // μ = 2, σ = 2/3, (x−μ)/√σ = ±√1.5
        let e = 1.5f32.sqrt();
        for (got, want) in y.data().iter().zip([-e, 0.0, e]) {
            assert!((got - want).abs() < 1e-6);
        }
        assert!((-1.22474 - y.data()[0]).abs() < 1e-5);
        let cache = st.cache.as_ref().unwrap();
        assert_eq!(cache.mean, vec![2.0]);
        assert!((cache.var[0] - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn running_update() {
        let mut st = FnlState::new(1, Granularity::PerNode);
        fnl_forward(&column(&[1.0, 2.0, 3.0]), &mut st, Mode::Train).unwrap();
        // 0.99·0 + 0.01·2 and 0.99·1 + 0.01·(2/3)
        assert!((st.running_mean[0] - 0.02).abs() < 1e-7);
        assert!((st.running_var[0] - 0.996_666_7).abs() < 1e-6);
    }

    #[test]
    fn constant_batch_is_zero() {
        let mut st = FnlState::new(1, Granularity::PerNode);
        let y = fnl_forward(&column(&[5.0, 5.0, 5.0]), &mut st, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_sample_rejected_in_training() {
        let mut st = FnlState::new(3, Granularity::PerNode);
        let r = fnl_forward(&Tensor::from_dims(&[1, 3], vec![1.0, 2.0, 3.0]), &mut st, Mode::Train);
        assert!(matches!(r, Err(Error::BatchSize(_))));
        assert!(fnl_forward(&Tensor::from_dims(&[1, 3], vec![1.0, 2.0, 3.0]), &mut st, Mode::Test).is_ok());
    }

    #[test]
    fn corrupted_variance_rejected() {
        let mut st = FnlState::new(1, Granularity::PerNode);
        st.running_var[0] = -0.5;
        let r = fnl_forward(&column(&[1.0, 2.0]), &mut st, Mode::Test);
        assert!(matches!(r, Err(Error::StateCorruption(_))));
    }

    #[test]
    fn test_mode_uses_running_statistics() {
        let mut st = FnlState::new(1, Granularity::PerNode);
        st.running_mean[0] = 1.0;
        st.running_var[0] = 4.0;
        let y = fnl_forward(&column(&[3.0]), &mut st, Mode::Test).unwrap();
        assert!((y.data()[0] - 2.0 / (4.0f32 + 1e-5).sqrt()).abs() < 1e-7);
        assert!(st.cache.is_none());
    }

    #[test]
    fn backward_without_forward() {
        let st = FnlState::new(1, Granularity::PerNode);
        assert!(matches!(fnl_backward(&column(&[1.0, 2.0]), &st), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut st = FnlState::new(1, Granularity::PerNode);
        fnl_forward(&column(&[1.0, 4.0, -2.0]), &mut st, Mode::Train).unwrap();
        let g = fnl_backward(&column(&[0.0; 3]), &st).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_channel_statistics_span_batch_and_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_tensor(&[3, 2, 4, 4], &mut rng).map(|v| 3.0 * v + 1.0);
        let mut st = FnlState::new(2, Granularity::PerChannel);
        let y = fnl_forward(&x, &mut st, Mode::Train).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|n| y.sample(n)[c * 16..(c + 1) * 16].iter().map(|&v| v as f64).collect::<Vec<_>>())
                .collect();
            let mean = vals.iter().sum::<f64>() / 48.0;
            assert!(mean.abs() < 1e-5);
        }
        let mut node = FnlState::new(32, Granularity::PerNode);
        fnl_forward(&x, &mut node, Mode::Train).unwrap();
        assert_eq!(node.cache.unwrap().mean.len(), 32);
    }

    #[test]
    fn running_mean_converges_geometrically() {
        let mut st = FnlState::new(1, Granularity::PerNode);
        let batch = column(&[1.0, 2.0, 3.0]);
        let mut prev_gap = 2.0f64;
        for _ in 0..20 {
            fnl_forward(&batch, &mut st, Mode::Train).unwrap();
            let gap = 2.0 - st.running_mean[0] as f64;
            assert!((gap / prev_gap - 0.99).abs() < 1e-4);
            prev_gap = gap;
        }
    }

    #[test]
    fn quadratic_loss_gradient_f64() {
        // L = Σ ôᵢ² / 2 on the batch (1,2,3), checked in f64.
        let x = [1.0f64, 2.0, 3.0];
        let layout = FnlLayout { batch: 3, nodes: 1, inner: 1 };
        let eps = 1e-5;
        let loss = |v: &[f64]| -> f64 {
            let (o, _, _) = fnl_normalize_slice(v, layout, eps);
            o.iter().map(|o| o * o / 2.0).sum()
        };
        let (o, m, s) = fnl_normalize_slice(&x, layout, eps);
        let g = fnl_backward_slice(&o, &x, &m, &s, layout, eps);
        let r = check_gradient_f64(&x, &g, 1e-4, loss);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn random_batches_gradient_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for n in [2usize, 5, 8] {
            let layout = FnlLayout { batch: n, nodes: 3, inner: 1 };
            let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let probe: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |v: &[f64]| -> f64 {
                let (o, _, _) = fnl_normalize_slice(v, layout, 1e-5);
                o.iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            let (_, m, s) = fnl_normalize_slice(&x, layout, 1e-5);
            let g = fnl_backward_slice(&probe, &x, &m, &s, layout, 1e-5);
            let r = check_gradient_f64(&x, &g, 1e-4, loss);
            assert!(r.max_rel_error < 1e-4, "n={n} {r:?}");
            let fd_sum: f64 = r.numeric.iter().sum();
            let an_sum: f64 = g.iter().sum();
            assert!((fd_sum - an_sum).abs() < 1e-4);
        }
        let _ = Shape::new(vec![1]).unwrap();
    }
}
