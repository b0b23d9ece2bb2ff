//! SGD training: initialisation, schedule, update rule, augmentation and the loop.

mod synthetic;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Gradients, LayerParams, Network};
use crate::ops::Mode;
use crate::tensor::{Shape, Tensor};

pub use synthetic::{iterations_to_accuracy, synthetic_task, tiny_descriptor, ConvergenceRun, CLASSES, CONTRAST, NOISE, PER_CLASS, SIDE};

/// Zero-mean Gaussian with variance `2 / fan_in`.
pub fn msra_init<R: Rng + ?Sized>(shape: Shape, fan_in: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::config("msra_init needs fan_in >= 1"));
    }
    let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
    let data = (0..shape.count()).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(shape, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub base_lr: f32,
    pub lr_power: f32,
    pub max_iter: usize,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub rng_seed: u64,
    pub crop_size: usize,
    pub flip_prob: f32,
}

pub const BASE_LR: f32 = 0.01;
pub const BASE_LR_FNL: f32 = 0.04;

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            base_lr: BASE_LR,
            lr_power: 0.5,
            max_iter: 1000,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 32,
            rng_seed: 0,
            crop_size: 227,
            flip_prob: 0.5,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return bad("base_lr must be a finite value >= 0");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        if self.max_iter == 0 || self.batch_size == 0 || self.crop_size == 0 {
            return bad("max_iter, batch_size and crop_size must be positive");
        }
        Ok(())
    }
}

/// `base_lr * (1 - iter/max_iter)^lr_power`.
pub fn poly_lr(cfg: &SolverConfig, iter: usize) -> Result<f32> {
    if iter > cfg.max_iter {
        return Err(Error::config(format!("iteration {iter} exceeds max_iter {}", cfg.max_iter)));
    }
    let progress = 1.0 - iter as f64 / cfg.max_iter as f64;
    Ok((cfg.base_lr as f64 * progress.powf(cfg.lr_power as f64)) as f32)
}

/// Iteration counter and one velocity per parameter, in `Network::params` order.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub iter: usize,
    pub velocity: Vec<(String, Tensor)>,
}

impl SolverState {
    pub fn new(net: &Network) -> Self {
        let velocity = net.params().into_iter().map(|(n, t)| (n, Tensor::zeros(t.shape().clone()))).collect();
        SolverState { iter: 0, velocity }
    }
}

/// `v = momentum*v - lr*(g + wd*w); w += v`, elementwise.
pub fn sgd_update(w: &mut Tensor, g: &Tensor, v: &mut Tensor, lr: f32, momentum: f32, weight_decay: f32) -> Result<()> {
    if w.shape() != g.shape() || w.shape() != v.shape() {
        return Err(Error::shape(format!(
            "sgd shapes disagree: weight {}, gradient {}, velocity {}",
            w.shape(),
            g.shape(),
            v.shape()
        )));
    }
    for ((w, &g), v) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
        *v = momentum * *v - lr * (g + weight_decay * *w);
        *w += *v;
    }
    Ok(())
}

/// Applies [`sgd_update`] to every network parameter.
pub fn sgd_step(net: &mut Network, grads: &Gradients, state: &mut SolverState, lr: f32, cfg: &SolverConfig) -> Result<()> {
    let params = net.params_mut();
    if params.len() != state.velocity.len() {
        return Err(Error::shape("solver state does not match network parameters"));
    }
    for ((name, w), (vname, v)) in params.into_iter().zip(&mut state.velocity) {
        if &name != vname {
            return Err(Error::shape(format!("velocity `{vname}` does not match parameter `{name}`")));
        }
        let g = grads.params.get(&name).ok_or_else(|| Error::usage(format!("no gradient for `{name}`")))?;
        sgd_update(w, g, v, lr, cfg.momentum, cfg.weight_decay).map_err(|e| e.in_layer(&name))?;
    }
    state.iter += 1;
    Ok(())
}

/// Crop window and mirror decision for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

fn crop_bounds(dims: &[usize], crop: usize) -> Result<(usize, usize)> {
    let (h, w) = (dims[1], dims[2]);
    if crop > h || crop > w {
        return Err(Error::config(format!("crop {crop} larger than source {h}x{w}")));
    }
    Ok((h - crop, w - crop))
}

pub fn sample_augmentation<R: Rng + ?Sized>(dims: &[usize], cfg: &SolverConfig, mode: Mode, rng: &mut R) -> Result<Augmentation> {
    let (dh, dw) = crop_bounds(dims, cfg.crop_size)?;
    Ok(match mode {
        Mode::Train => Augmentation {
            top: rng.random_range(0..=dh),
            left: rng.random_range(0..=dw),
            flip: cfg.flip_prob > 0.0 && rng.random::<f32>() < cfg.flip_prob,
        },
        Mode::Test => Augmentation { top: dh / 2, left: dw / 2, flip: false },
    })
}

/// Mean subtraction, then the crop and optional mirror.
pub fn apply_augmentation(image: &Tensor, mean: Option<&Tensor>, crop: usize, aug: Augmentation) -> Result<Tensor> {
    if image.dims().len() != 3 {
        return Err(Error::shape(format!("expected a (C,H,W) image, got {}", image.shape())));
    }
    if let Some(m) = mean {
        if m.shape() != image.shape() {
            return Err(Error::shape(format!("mean image {} does not match image {}", m.shape(), image.shape())));
        }
    }
    let (c, h, w) = (image.dims()[0], image.dims()[1], image.dims()[2]);
    crop_bounds(image.dims(), crop)?;
    if aug.top + crop > h || aug.left + crop > w {
        return Err(Error::config("crop window outside the image"));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * crop * crop);
    for ch in 0..c {
        for y in 0..crop {
            let row = (ch * h + aug.top + y) * w + aug.left;
            for x in 0..crop {
                let sx = if aug.flip { crop - 1 - x } else { x };
                let v = src[row + sx] - mean.map_or(0.0, |m| m.data()[row + sx]);
                out.push(v);
            }
        }
    }
    Tensor::from_vec(Shape::new(vec![c, crop, crop])?, out)
}

/// Train mode: random crop, random mirror. Test mode: centre crop.
pub fn augment<R: Rng + ?Sized>(
    image: &Tensor,
    mean: Option<&Tensor>,
    cfg: &SolverConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    if image.dims().len() != 3 {
        return Err(Error::shape(format!("expected a (C,H,W) image, got {}", image.shape())));
    }
    let aug = sample_augmentation(image.dims(), cfg, mode, rng)?;
    apply_augmentation(image, mean, cfg.crop_size, aug)
}

/// In-memory labelled images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub iter: usize,
    pub lr: f32,
    pub loss: f32,
}

impl LogEntry {
    /// `iter,lr,loss`
    pub fn line(&self) -> String {
        format!("{},{},{}", self.iter, self.lr, self.loss)
    }
}

/// Name of the edge feeding the (single) loss layer; its argmax is the prediction.
pub fn logits_edge(net: &Network) -> Result<String> {
    let mut losses = net.descriptor().layers.iter().filter(|l| matches!(l.params, LayerParams::SoftmaxLoss));
    match (losses.next(), losses.next()) {
        (Some(l), None) => Ok(l.inputs[0].clone()),
        _ => Err(Error::usage("training needs exactly one softmax_loss layer")),
    }
}

pub struct Trainer {
    pub net: Network,
    pub cfg: SolverConfig,
    pub state: SolverState,
    pub mean: Option<Tensor>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    classes: usize,
}

impl Trainer {
    pub fn new(net: Network, cfg: SolverConfig, mean: Option<Tensor>) -> Result<Self> {
        cfg.validate()?;
        let edge = logits_edge(&net)?;
        let classes = net.edge_shapes()[&edge].count();
        let input = net.descriptor().input_shape.dims().to_vec();
        if input.len() == 3 && (input[1] != cfg.crop_size || input[2] != cfg.crop_size) {
            return Err(Error::config(format!(
                "crop_size {} does not match network input {}",
                cfg.crop_size,
                net.descriptor().input_shape
            )));
        }
        let state = SolverState::new(&net);
        let rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        Ok(Trainer { net, cfg, state, mean, rng, order: Vec::new(), cursor: 0, classes })
    }

    fn check(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::data("empty dataset"));
        }
        if data.images.len() != data.labels.len() {
            return Err(Error::data("image and label counts differ"));
        }
        if let Some(&l) = data.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::data(format!("label {l} outside the {} network outputs", self.classes)));
        }
        Ok(())
    }

    fn next_batch(&mut self, data: &Dataset) -> Result<(Tensor, Vec<usize>)> {
        let mut samples = Vec::with_capacity(self.cfg.batch_size);
        let mut labels = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            if self.cursor == self.order.len() {
                self.order = (0..data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let i = self.order[self.cursor];
            self.cursor += 1;
            let img = &data.images[i];
            let x = if img.dims().len() == 3 {
                augment(img, self.mean.as_ref(), &self.cfg, Mode::Train, &mut self.rng)?
            } else {
                img.clone()
            };
            samples.push(x);
            labels.push(data.labels[i]);
        }
        Ok((stack(&samples)?, labels))
    }

    /// One forward/backward/update at the current iteration's learning rate.
    pub fn step(&mut self, data: &Dataset) -> Result<LogEntry> {
        self.check(data)?;
        let iter = self.state.iter;
        let lr = poly_lr(&self.cfg, iter)?;
        let (x, labels) = self.next_batch(data)?;
        let loss = self.net.loss(&x, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss became {loss} at iteration {iter}")));
        }
        let grads = self.net.backward_from_loss()?;
        sgd_step(&mut self.net, &grads, &mut self.state, lr, &self.cfg)?;
        Ok(LogEntry { iter, lr, loss })
    }

    /// Runs until `max_iter`, or until `on_iter` returns false.
    pub fn train(&mut self, data: &Dataset, mut on_iter: impl FnMut(&LogEntry, &Trainer) -> Result<bool>) -> Result<Vec<LogEntry>> {
        self.check(data)?;
        let mut log = Vec::new();
        while self.state.iter < self.cfg.max_iter {
            let e = self.step(data)?;
            log.push(e);
            if !on_iter(&e, self)? {
                break;
            }
        }
        Ok(log)
    }

    /// Fraction of `data` classified correctly in test mode.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        accuracy(&self.net, data, self.mean.as_ref(), &self.cfg)
    }
}

pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::data("empty batch"))?;
    let mut data = Vec::with_capacity(first.len() * samples.len());
    for s in samples {
        if s.shape() != first.shape() {
            return Err(Error::shape(format!("batch mixes shapes {} and {}", first.shape(), s.shape())));
        }
        data.extend_from_slice(s.data());
    }
    Tensor::from_vec(first.shape().batched(samples.len()), data)
}

pub fn accuracy(net: &Network, data: &Dataset, mean: Option<&Tensor>, cfg: &SolverConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::data("empty dataset"));
    }
    let edge = logits_edge(net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut correct = 0usize;
    for (chunk, labels) in data.images.chunks(256).zip(data.labels.chunks(256)) {
        let xs = chunk
            .iter()
            .map(|img| if img.dims().len() == 3 { augment(img, mean, cfg, Mode::Test, &mut rng) } else { Ok(img.clone()) })
            .collect::<Result<Vec<_>>>()?;
        let out = net.infer(&stack(&xs)?)?;
        let logits = &out[&edge];
        for (i, &l) in labels.iter().enumerate() {
            let row = logits.sample(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            correct += (best == l) as usize;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::parse_descriptor;

    #[test]
    fn msra_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = msra_init(Shape::new(vec![100_000]).unwrap(), 8, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((0.225..=0.275).contains(&var), "{var}");
        assert!(mean.abs() <= 0.01 * 0.5, "{mean}");
        assert!(matches!(msra_init(Shape::new(vec![3]).unwrap(), 0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn poly_schedule() {
        let cfg = SolverConfig { base_lr: 0.04, max_iter: 1000, ..Default::default() };
        assert_eq!(poly_lr(&cfg, 0).unwrap(), 0.04);
        assert_eq!(poly_lr(&cfg, 1000).unwrap(), 0.0);
        assert!((poly_lr(&cfg, 500).unwrap() - 0.028284).abs() < 1e-6);
        assert!(poly_lr(&cfg, 1001).is_err());
    }

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_dims(&[v.len()], v.to_vec())
    }

    #[test]
    fn update_rule_examples() {
        let mut w = t(&[1.0, -2.0]);
        let mut v = t(&[0.0, 0.0]);
        sgd_update(&mut w, &t(&[0.5, 1.0]), &mut v, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(w.data(), &[0.5, -3.0]);

        let mut w = t(&[1.0]);
        let mut v = t(&[0.0]);
        sgd_update(&mut w, &t(&[0.0]), &mut v, 1.0, 0.0, 0.0005).unwrap();
        assert_eq!(w.data(), &[0.9995]);

        let mut w = t(&[0.0]);
        let mut v = t(&[0.0]);
        sgd_update(&mut w, &t(&[1.0]), &mut v, 1.0, 0.9, 0.0).unwrap();
        assert_eq!(w.data(), &[-1.0]);
        sgd_update(&mut w, &t(&[1.0]), &mut v, 1.0, 0.9, 0.0).unwrap();
        assert!((w.data()[0] + 2.9).abs() < 1e-6);

        assert!(matches!(sgd_update(&mut w, &t(&[1.0, 2.0]), &mut v, 1.0, 0.9, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_gradient_keeps_velocity_zero() {
        let mut w = t(&[1.0, 2.0, 3.0]);
        let mut v = t(&[0.0; 3]);
        for _ in 0..10 {
            sgd_update(&mut w, &t(&[0.0; 3]), &mut v, 0.1, 0.9, 0.0).unwrap();
        }
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert_eq!(w.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn quadratic_descent() {
        // loss = 0.5*|w|^2, gradient w
        let mut w = t(&[3.0, -1.0]);
        let mut v = t(&[0.0, 0.0]);
        let loss = |w: &Tensor| w.data().iter().map(|x| 0.5 * x * x).sum::<f32>();
        let before = loss(&w);
        let g = w.clone();
        sgd_update(&mut w, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!(loss(&w) < before);
    }

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_dims(&[c, h, w], (0..c * h * w).map(|v| v as f32).collect())
    }

    #[test]
    fn augment_degenerate_and_flip() {
        let img = ramp(2, 4, 4);
        let mean = Tensor::filled(img.shape().clone(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = SolverConfig { crop_size: 4, flip_prob: 0.0, ..Default::default() };
        let out = augment(&img, Some(&mean), &cfg, Mode::Train, &mut rng).unwrap();
        assert_eq!(out.data(), img.map(|v| v - 1.0).data());

        let cfg = SolverConfig { crop_size: 4, flip_prob: 1.0, ..Default::default() };
        let out = augment(&img, None, &cfg, Mode::Train, &mut rng).unwrap();
        assert_eq!(&out.data()[..4], &[3.0, 2.0, 1.0, 0.0]);

        let cfg = SolverConfig { crop_size: 2, flip_prob: 1.0, ..Default::default() };
        let out = augment(&img, None, &cfg, Mode::Test, &mut rng).unwrap();
        assert_eq!(out.data(), &[5.0, 6.0, 9.0, 10.0, 21.0, 22.0, 25.0, 26.0]);

        let cfg = SolverConfig { crop_size: 5, ..Default::default() };
        assert!(matches!(augment(&img, None, &cfg, Mode::Train, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn flip_fraction() {
        let cfg = SolverConfig { crop_size: 6, flip_prob: 0.5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let flips = (0..10_000)
            .filter(|_| sample_augmentation(&[1, 8, 8], &cfg, Mode::Train, &mut rng).unwrap().flip)
            .count();
        assert!((4700..=5300).contains(&flips), "{flips}");
    }

    #[test]
    fn crop_offsets_cover_range() {
        let cfg = SolverConfig { crop_size: 6, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen = [[false; 3]; 3];
        for _ in 0..500 {
            let a = sample_augmentation(&[1, 8, 8], &cfg, Mode::Train, &mut rng).unwrap();
            seen[a.top][a.left] = true;
        }
        assert!(seen.iter().flatten().all(|&s| s));
    }

    const TINY: &str = "layer in input shape=4 out=x\n\
                        layer f fc num_output=3 in=x out=o\n\
                        layer loss softmax_loss in=o out=loss\n";

    fn toy() -> Dataset {
        let images = (0..6).map(|i| t(&[i as f32 * 0.1, 1.0, -0.5, (i % 3) as f32])).collect();
        Dataset { images, labels: (0..6).map(|i| i % 3).collect() }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let net = Network::new(parse_descriptor(TINY).unwrap(), 1).unwrap();
        let before = net.clone();
        let cfg = SolverConfig { base_lr: 0.0, max_iter: 20, batch_size: 2, crop_size: 1, ..Default::default() };
        let mut tr = Trainer::new(net, cfg, None).unwrap();
        tr.train(&toy(), |_, _| Ok(true)).unwrap();
        for ((_, a), (_, b)) in tr.net.params().into_iter().zip(before.params()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_errors() {
        let net = Network::new(parse_descriptor(TINY).unwrap(), 1).unwrap();
        let cfg = SolverConfig { max_iter: 5, batch_size: 2, crop_size: 1, ..Default::default() };
        let mut tr = Trainer::new(net, cfg, None).unwrap();
        assert!(matches!(tr.step(&Dataset::default()), Err(Error::Data(_))));
        let mut d = toy();
        d.labels[0] = 3;
        assert!(matches!(tr.step(&d), Err(Error::Data(_))));
    }

    #[test]
    fn seeded_runs_identical() {
        let run = || {
            let net = Network::new(parse_descriptor(TINY).unwrap(), 9).unwrap();
            let cfg = SolverConfig { max_iter: 30, batch_size: 4, crop_size: 1, rng_seed: 5, ..Default::default() };
            let mut tr = Trainer::new(net, cfg, None).unwrap();
            let log = tr.train(&toy(), |_, _| Ok(true)).unwrap();
            (log, crate::graph::encode_model(&tr.net))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn log_line_format() {
        let e = LogEntry { iter: 3, lr: 0.5, loss: 1.25 };
        assert_eq!(e.line(), "3,0.5,1.25");
    }
}
