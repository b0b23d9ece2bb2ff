//! Central finite-difference checks for every backward kernel.
//!
//! The relative error of one component is `|a − n| / max(1, |a|, |n|)`: a plain
//! relative error for large gradients, an absolute one near zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{parse_descriptor, Network};
use crate::ops::{self, ConvParams, ConvSpec, FcParams, Granularity, Mode, PoolKind, PoolSpec};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub numeric: Vec<f64>,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn summarize(analytic: impl Iterator<Item = f64>, numeric: Vec<f64>) -> GradCheckReport {
    let mut report = GradCheckReport { max_abs_error: 0.0, max_rel_error: 0.0, worst_index: 0, numeric };
    for (i, a) in analytic.enumerate() {
        let n = report.numeric[i];
        let abs = (a - n).abs();
        let rel = rel_error(a, n);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_index = i;
        }
    }
    report
}

/// Compares `analytic` with central differences of `loss` around `x`.
///
/// Perturbed points are rounded to f32, and the actual f32 step is used as the
/// denominator.
pub fn check_gradient(
    x: &Tensor,
    analytic: &Tensor,
    h: f32,
    mut loss: impl FnMut(&Tensor) -> f64,
) -> GradCheckReport {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape must match input");
    let mut probe = x.clone();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let (up, down) = (orig + h, orig - h);
        probe.data_mut()[i] = up;
        let lp = loss(&probe);
        probe.data_mut()[i] = down;
        let lm = loss(&probe);
        probe.data_mut()[i] = orig;
        numeric.push((lp - lm) / (up as f64 - down as f64));
    }
    summarize(analytic.data().iter().map(|&v| v as f64), numeric)
}

pub fn check_gradient_f64(
    x: &[f64],
    analytic: &[f64],
    h: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        probe[i] = orig + h;
        let lp = loss(&probe);
        probe[i] = orig - h;
        let lm = loss(&probe);
        probe[i] = orig;
        numeric.push((lp - lm) / (2.0 * h));
    }
    summarize(analytic.iter().copied(), numeric)
}

/// Uniform entries in `[−1, 1)`.
pub fn random_tensor<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Tensor {
    let shape = Shape::new(dims.to_vec()).expect("positive dims");
    let data = (0..shape.count()).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Tensor::from_vec(shape, data).expect("length matches")
}

fn dot(y: &Tensor, probe: &Tensor) -> f64 {
    y.data().iter().zip(probe.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
}

/// Outcome of one named check in [`run_suite`].
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Flips the sign of the normalisation backward before comparing; a
    /// mutation check that the suite can fail.
    pub inject_fnl_sign_error: bool,
}

fn worst(reports: &[GradCheckReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

/// Finite-difference checks of every backward kernel plus an end-to-end network.
pub fn run_suite(opts: SuiteOptions) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = 1e-3;
    let tol = 1e-3;
    let mut out = Vec::new();

    // conv
    {
        let x = random_tensor(&[1, 2, 5, 5], &mut rng);
        let p = ConvParams::new(
            ConvSpec::new(3, 3, 1, 0),
            random_tensor(&[3, 2, 3, 3], &mut rng),
            random_tensor(&[3], &mut rng),
        )?;
        let probe = random_tensor(&[1, 3, 3, 3], &mut rng);
        let g = ops::conv_backward(&probe, &x, &p)?;
        let loss = |x: &Tensor, p: &ConvParams| dot(&ops::conv_forward(x, p).unwrap(), &probe);
        let reports = [
            check_gradient(&x, &g.input, h, |v| loss(v, &p)),
            check_gradient(&p.weights, &g.weights, h, |w| loss(&x, &ConvParams { weights: w.clone(), ..p.clone() })),
            check_gradient(&p.bias, &g.bias, h, |b| loss(&x, &ConvParams { bias: b.clone(), ..p.clone() })),
        ];
        out.push(OpCheck { name: "conv", max_rel_error: worst(&reports), tolerance: tol });
    }

    // relu, away from the kink
    {
        let x = random_tensor(&[2, 8], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        let probe = random_tensor(&[2, 8], &mut rng);
        let g = ops::relu_backward(&probe, &x)?;
        let r = check_gradient(&x, &g, h, |v| dot(&ops::relu_forward(v), &probe));
        out.push(OpCheck { name: "relu", max_rel_error: r.max_rel_error, tolerance: tol });
    }

    // pooling on tie-free inputs
    for (name, kind) in [("pool_max", PoolKind::Max), ("pool_mean", PoolKind::Mean)] {
        let spec = PoolSpec::new(kind, 3, 2);
        let mut vals: Vec<f32> = (0..25).map(|v| v as f32 * 0.1 - 1.2).collect();
        for i in (1..vals.len()).rev() {
            let j = rng.random_range(0..=i);
            vals.swap(i, j);
        }
        let x = Tensor::from_dims(&[1, 1, 5, 5], vals);
        let probe = random_tensor(&[1, 1, 2, 2], &mut rng);
        let (_, cache) = ops::pool_forward(&x, &spec)?;
        let g = ops::pool_backward(&probe, &cache, &spec)?;
        let r = check_gradient(&x, &g, h, |v| dot(&ops::pool_forward(v, &spec).unwrap().0, &probe));
        out.push(OpCheck { name, max_rel_error: r.max_rel_error, tolerance: tol });
    }

    // fc
    {
        let x = random_tensor(&[2, 6], &mut rng);
        let p = FcParams::new(random_tensor(&[6, 4], &mut rng), random_tensor(&[4], &mut rng))?;
        let probe = random_tensor(&[2, 4], &mut rng);
        let g = ops::fc_backward(&probe, &x, &p)?;
        let loss = |x: &Tensor, p: &FcParams| dot(&ops::fc_forward(x, p).unwrap(), &probe);
        let reports = [
            check_gradient(&x, &g.input, h, |v| loss(v, &p)),
            check_gradient(&p.weights, &g.weights, h, |w| loss(&x, &FcParams { weights: w.clone(), ..p.clone() })),
            check_gradient(&p.bias, &g.bias, h, |b| loss(&x, &FcParams { bias: b.clone(), ..p.clone() })),
        ];
        out.push(OpCheck { name: "fc", max_rel_error: worst(&reports), tolerance: tol });
    }

    // dropout with its mask held fixed
    {
        let x = random_tensor(&[4, 5], &mut rng);
        let params = ops::DropoutParams::new(0.5)?;
        let (_, mask) = ops::dropout_forward(&x, params, Mode::Train, &mut rng)?;
        let probe = random_tensor(&[4, 5], &mut rng);
        let g = ops::dropout_backward(&probe, &mask)?;
        let r = check_gradient(&x, &g, h, |v| {
            let y: Vec<f32> = v.data().iter().zip(mask.data()).map(|(a, m)| a * m).collect();
            dot(&Tensor::from_vec(v.shape().clone(), y).unwrap(), &probe)
        });
        out.push(OpCheck { name: "dropout", max_rel_error: r.max_rel_error, tolerance: tol });
    }

    // lrn
    {
        let p = ops::LrnParams { local_size: 3, alpha: 0.5, beta: 0.75, k: 1.0 };
        let x = random_tensor(&[1, 4, 2, 2], &mut rng).map(|v| 2.0 * v);
        let probe = random_tensor(&[1, 4, 2, 2], &mut rng);
        let g = ops::lrn_backward(&probe, &x, &p)?;
        let r = check_gradient(&x, &g, h, |v| dot(&ops::lrn_forward(v, &p).unwrap(), &probe));
        out.push(OpCheck { name: "lrn", max_rel_error: r.max_rel_error, tolerance: tol });
    }

    // normalisation: f32 path through the layer API, then f64 shadow arithmetic
    {
        let sign: f32 = if opts.inject_fnl_sign_error { -1.0 } else { 1.0 };
        let x = random_tensor(&[8, 6], &mut rng).map(|v| 2.0 * v + 0.5);
        let probe = random_tensor(&[8, 6], &mut rng);
        let mut st = ops::FnlState::new(6, Granularity::PerChannel);
        ops::fnl_forward(&x, &mut st, Mode::Train)?;
        let g = ops::fnl_backward(&probe, &st)?.map(|v| sign * v);
        let r32 = check_gradient(&x, &g, h, |v| {
            let mut s = ops::FnlState::new(6, Granularity::PerChannel);
            dot(&ops::fnl_forward(v, &mut s, Mode::Train).unwrap(), &probe)
        });
        out.push(OpCheck { name: "fnl", max_rel_error: r32.max_rel_error, tolerance: tol });

        let layout = ops::FnlLayout { batch: 8, nodes: 6, inner: 1 };
        let x64: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let p64: Vec<f64> = probe.data().iter().map(|&v| v as f64).collect();
        let eps = ops::FNL_DEFAULT_EPS as f64;
        let (_, m, s) = ops::fnl_normalize_slice(&x64, layout, eps);
        let g64: Vec<f64> =
            ops::fnl_backward_slice(&p64, &x64, &m, &s, layout, eps).iter().map(|v| sign as f64 * v).collect();
        let r64 = check_gradient_f64(&x64, &g64, 1e-4, |v| {
            let (o, _, _) = ops::fnl_normalize_slice(v, layout, eps);
            o.iter().zip(&p64).map(|(a, b)| a * b).sum()
        });
        out.push(OpCheck { name: "fnl_f64", max_rel_error: r64.max_rel_error, tolerance: 1e-4 });
    }

    // softmax loss
    {
        let logits = random_tensor(&[3, 5], &mut rng);
        let labels: Vec<usize> = (0..3).map(|_| rng.random_range(0..5)).collect();
        let (_, probs) = ops::softmax_loss_forward(&logits, &labels)?;
        let g = ops::softmax_loss_backward(&probs, &labels, 1.0)?;
        let r = check_gradient(&logits, &g, h, |l| ops::softmax_loss_forward(l, &labels).unwrap().0 as f64);
        out.push(OpCheck { name: "softmax_loss", max_rel_error: r.max_rel_error, tolerance: tol });
    }

    out.push(OpCheck { name: "network", max_rel_error: network_check(&mut rng)?, tolerance: tol });
    Ok(out)
}

const TWO_LAYER: &str = "\
layer data input shape=5 out=data
layer fc1 fc num_output=4 in=data out=fc1
layer fc2 fc num_output=3 in=fc1 out=fc2
layer loss softmax_loss in=fc2 out=loss
";

/// End-to-end gradient of a two-layer fc network with softmax loss, with
/// respect to every parameter.
fn network_check(rng: &mut ChaCha8Rng) -> Result<f64> {
    let desc = parse_descriptor(TWO_LAYER)?;
    let mut net = Network::new(desc, rng.random())?;
    let x = random_tensor(&[3, 5], rng);
    let labels = [0usize, 2, 1];
    net.forward(&x, Mode::Train, Some(&labels))?;
    let grads = net.backward_from_loss()?;
    let mut worst_err = 0.0f64;
    for name in net.param_names() {
        let analytic = grads.params.get(&name).expect("gradient for every parameter").clone();
        let base = net.param(&name).expect("parameter").clone();
        let r = check_gradient(&base, &analytic, 1e-3, |w| {
            let mut probe = net.clone();
            *probe.param_mut(&name).unwrap() = w.clone();
            probe.loss(&x, &labels).unwrap() as f64
        });
        worst_err = worst_err.max(r.max_rel_error);
    }
    Ok(worst_err)
}
