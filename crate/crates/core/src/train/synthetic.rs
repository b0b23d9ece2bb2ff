//! The 10-class 8×8 synthetic task and the convergence-speed experiment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Dataset, SolverConfig, Trainer, BASE_LR, BASE_LR_FNL};
use crate::error::Result;
use crate::graph::{parse_descriptor, with_fnl, Network, NetworkDescriptor};
use crate::tensor::Tensor;

pub const CLASSES: usize = 10;
pub const SIDE: usize = 8;
pub const CONTRAST: f32 = 0.1;
pub const NOISE: f32 = 0.2;
pub const PER_CLASS: usize = 50;

/// Intensities on [0,1]: `0.5 + contrast*prototype + noise*z` with unit
/// Gaussian prototypes and noise. `per_class` samples of each class,
/// interleaved by class.
pub fn synthetic_task(seed: u64, per_class: usize, contrast: f32, noise: f32) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = SIDE * SIDE;
    let protos: Vec<Vec<f32>> =
        (0..CLASSES).map(|_| (0..px).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let mut data = Dataset::default();
    for _ in 0..per_class {
        for (label, p) in protos.iter().enumerate() {
            let img = p
                .iter()
                .map(|&v| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    0.5 + contrast * v + noise * z
                })
                .collect();
            data.images.push(Tensor::from_dims(&[1, SIDE, SIDE], img));
            data.labels.push(label);
        }
    }
    data
}

/// conv(relu) → flatten → fc → softmax loss; with `fnl` the conv is followed
/// by normalisation before its ReLU.
pub fn tiny_descriptor(fnl: bool) -> NetworkDescriptor {
    let text = format!(
        "layer data input shape=1,{SIDE},{SIDE} out=data\n\
         layer conv1 conv num_output=8 kernel=3 pad=1 relu=true in=data out=conv1\n\
         layer flatten flatten in=conv1 out=flatten\n\
         layer fc1 fc num_output={CLASSES} in=flatten out=fc1\n\
         layer loss softmax_loss in=fc1 out=loss\n\
         feature conv1\n"
    );
    let d = parse_descriptor(&text).expect("valid descriptor");
    if fnl {
        with_fnl(&d).expect("valid descriptor")
    } else {
        d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRun {
    /// First evaluated iteration count at which training accuracy exceeded the target.
    pub iterations: Option<usize>,
    pub final_accuracy: f64,
}

/// Trains the tiny network (with or without normalisation, at its regime's
/// base learning rate) and reports when training accuracy first exceeds `target`.
pub fn iterations_to_accuracy(
    fnl: bool,
    seed: u64,
    data: &Dataset,
    target: f64,
    max_iter: usize,
    eval_every: usize,
) -> Result<ConvergenceRun> {
    let net = Network::new(tiny_descriptor(fnl), seed)?;
    let cfg = SolverConfig {
        base_lr: if fnl { BASE_LR_FNL } else { BASE_LR },
        max_iter,
        batch_size: 20,
        rng_seed: seed,
        crop_size: SIDE,
        flip_prob: 0.0,
        ..Default::default()
    };
    let mean = crate::dataio::mean_image(data.images.iter().map(|t| ("", t)))?;
    let mut tr = Trainer::new(net, cfg, Some(mean))?;
    let mut hit = None;
    let mut last = 0.0;
    tr.train(data, |e, t| {
        let done = e.iter + 1;
        if done % eval_every == 0 {
            last = t.accuracy(data)?;
            if last > target {
                hit = Some(done);
                return Ok(false);
            }
        }
        Ok(true)
    })?;
    Ok(ConvergenceRun { iterations: hit, final_accuracy: last })
}
