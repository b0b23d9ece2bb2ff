//! A descriptor bound to parameters, with forward and backward execution.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::descriptor::{fan_in, fnl_nodes, param_shapes, EdgeShapes, LayerDef, LayerParams, NetworkDescriptor};
use super::topo::topo_order;
use crate::error::{Error, Result};
use crate::ops::{self, ConvParams, DropoutParams, FcParams, FnlState, Mode, PoolCache};
use crate::tensor::{Shape, Tensor};
use crate::train::msra_init;

/// Suffix of the extra output recorded for layers with a fused ReLU.
pub const PRE_ACTIVATION_SUFFIX: &str = ":pre";

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Weights {
    Conv(ConvParams),
    Fc(FcParams),
}

impl Weights {
    fn tensors(&self) -> [&Tensor; 2] {
        match self {
            Weights::Conv(p) => [&p.weights, &p.bias],
            Weights::Fc(p) => [&p.weights, &p.bias],
        }
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        match self {
            Weights::Conv(p) => [&mut p.weights, &mut p.bias],
            Weights::Fc(p) => [&mut p.weights, &mut p.bias],
        }
    }
}

#[derive(Clone, Debug)]
enum Cache {
    Input(Tensor),
    Fused { input: Tensor, pre: Tensor },
    Pool(PoolCache),
    Mask(Tensor),
    Softmax { probs: Tensor, labels: Vec<usize> },
    Reshape(Shape),
    Fnl,
    Sum,
}

#[derive(Clone, Debug, Default)]
pub(crate) struct LayerState {
    pub(crate) weights: Option<Weights>,
    pub(crate) fnl: Option<FnlState>,
    cache: Option<Cache>,
}

/// Parameter and edge gradients from one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    /// Keyed `"<layer>.weight"` / `"<layer>.bias"`; every parameter is present.
    pub params: HashMap<String, Tensor>,
    /// Accumulated gradient of every edge reached by the backward sweep.
    pub edges: HashMap<String, Tensor>,
}

#[derive(Clone, Debug)]
pub struct Network {
    desc: NetworkDescriptor,
    order: Vec<usize>,
    shapes: EdgeShapes,
    pub(crate) layers: Vec<LayerState>,
    rng: ChaCha8Rng,
    cached: bool,
    input_mean: Option<Tensor>,
}

pub(crate) fn param_key(layer: &str, slot: usize) -> String {
    format!("{layer}.{}", if slot == 0 { "weight" } else { "bias" })
}

struct Step {
    out: Tensor,
    pre: Option<Tensor>,
    cache: Option<Cache>,
}

impl Network {
    /// Zero weights, fresh normalisation statistics.
    pub fn zeroed(desc: NetworkDescriptor) -> Result<Self> {
        let order = topo_order(&desc)?;
        let shapes = desc.edge_shapes()?;
        let mut layers = Vec::with_capacity(desc.layers.len());
        for l in &desc.layers {
            let mut st = LayerState::default();
            let ps = param_shapes(l, &shapes)?;
            match &l.params {
                LayerParams::Conv { spec, .. } => {
                    let [w, b] = [Tensor::zeros(ps[0].clone()), Tensor::zeros(ps[1].clone())];
                    st.weights = Some(Weights::Conv(ConvParams::new(*spec, w, b)?));
                }
                LayerParams::Fc { .. } => {
                    let [w, b] = [Tensor::zeros(ps[0].clone()), Tensor::zeros(ps[1].clone())];
                    st.weights = Some(Weights::Fc(FcParams::new(w, b)?));
                }
                LayerParams::Fnl { momentum, eps, .. } => {
                    let (nodes, granularity) = fnl_nodes(l, &shapes).expect("fnl layer");
                    st.fnl = Some(FnlState::new(nodes, granularity).with_momentum(*momentum).with_eps(*eps));
                }
                _ => {}
            }
            layers.push(st);
        }
        Ok(Network { desc, order, shapes, layers, rng: ChaCha8Rng::seed_from_u64(0), cached: false, input_mean: None })
    }

    /// He/MSRA-initialised weights and zero biases; `seed` also drives dropout.
    pub fn new(desc: NetworkDescriptor, seed: u64) -> Result<Self> {
        let mut net = Network::zeroed(desc)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, st) in net.desc.layers.iter().zip(&mut net.layers) {
            if let Some(w) = &mut st.weights {
                let [weight, _] = w.tensors_mut();
                *weight = msra_init(weight.shape().clone(), fan_in(l, &net.shapes), &mut rng)?;
            }
        }
        net.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        Ok(net)
    }

    pub fn descriptor(&self) -> &NetworkDescriptor {
        &self.desc
    }

    /// Per-sample edge shapes.
    pub fn edge_shapes(&self) -> &EdgeShapes {
        &self.shapes
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Training mean image stored with the model, subtracted before cropping.
    pub fn input_mean(&self) -> Option<&Tensor> {
        self.input_mean.as_ref()
    }

    pub fn set_input_mean(&mut self, mean: Option<Tensor>) {
        self.input_mean = mean;
    }

    /// Name of the input layer.
    pub fn input_name(&self) -> &str {
        let l = self.desc.layers.iter().find(|l| matches!(l.params, LayerParams::Input { .. }));
        &l.expect("descriptor has an input layer").name
    }

    /// Parameter names in declaration order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, st) in self.desc.layers.iter().zip(&self.layers) {
            if st.weights.is_some() {
                names.push(param_key(&l.name, 0));
                names.push(param_key(&l.name, 1));
            }
        }
        names
    }

    fn locate(&self, key: &str) -> Option<(usize, usize)> {
        let (layer, slot) = key.rsplit_once('.')?;
        let slot = match slot {
            "weight" => 0,
            "bias" => 1,
            _ => return None,
        };
        let idx = self.desc.layers.iter().position(|l| l.name == layer)?;
        self.layers[idx].weights.as_ref().map(|_| (idx, slot))
    }

    pub fn param(&self, key: &str) -> Option<&Tensor> {
        let (idx, slot) = self.locate(key)?;
        Some(self.layers[idx].weights.as_ref()?.tensors()[slot])
    }

    pub fn param_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        let (idx, slot) = self.locate(key)?;
        let [w, b] = self.layers[idx].weights.as_mut()?.tensors_mut();
        Some(if slot == 0 { w } else { b })
    }

    /// All parameters in declaration order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, st) in self.desc.layers.iter().zip(&self.layers) {
            if let Some(w) = &st.weights {
                for (slot, t) in w.tensors().into_iter().enumerate() {
                    out.push((param_key(&l.name, slot), t));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, st) in self.desc.layers.iter().zip(&mut self.layers) {
            if let Some(w) = &mut st.weights {
                for (slot, t) in w.tensors_mut().into_iter().enumerate() {
                    out.push((param_key(&l.name, slot), t));
                }
            }
        }
        out
    }

    /// Normalisation states keyed by layer name, in declaration order.
    pub fn fnl_states(&self) -> Vec<(&str, &FnlState)> {
        self.desc
            .layers
            .iter()
            .zip(&self.layers)
            .filter_map(|(l, st)| st.fnl.as_ref().map(|f| (l.name.as_str(), f)))
            .collect()
    }

    pub fn fnl_state_mut(&mut self, layer: &str) -> Option<&mut FnlState> {
        let idx = self.desc.layers.iter().position(|l| l.name == layer)?;
        self.layers[idx].fnl.as_mut()
    }

    fn batched_input(&self, input: &Tensor) -> Result<Tensor> {
        let want = &self.desc.input_shape;
        if input.shape() == want {
            return input.clone().reshape(want.batched(1));
        }
        if input.dims().len() == want.rank() + 1 && &input.dims()[1..] == want.dims() {
            return Ok(input.clone());
        }
        Err(Error::shape(format!("input {} does not match network input {want}", input.shape())))
    }

    /// Test-mode forward with no caching; safe to call concurrently. Loss
    /// layers are skipped.
    pub fn infer(&self, input: &Tensor) -> Result<HashMap<String, Tensor>> {
        let x = self.batched_input(input)?;
        let mut edges = HashMap::new();
        for &idx in &self.order {
            let def = &self.desc.layers[idx];
            if matches!(def.params, LayerParams::SoftmaxLoss) {
                continue;
            }
            let st = &self.layers[idx];
            let step = {
                let ins: Vec<&Tensor> = def.inputs.iter().map(|e| &edges[e]).collect();
                run_layer(def, st.weights.as_ref(), FnlRef::Shared(st.fnl.as_ref()), &ins, &x, Mode::Test, None, None, false)
                    .map_err(|e| e.in_layer(&def.name))?
            };
            store(&mut edges, def, step);
        }
        Ok(edges)
    }

    /// Runs every layer in topological order and returns all edge values.
    ///
    /// Train mode uses batch statistics, applies dropout, updates running
    /// statistics and keeps what backward needs. `labels` feed any
    /// softmax_loss layer.
    pub fn forward(&mut self, input: &Tensor, mode: Mode, labels: Option<&[usize]>) -> Result<HashMap<String, Tensor>> {
        if mode == Mode::Test && labels.is_none() {
            self.clear_cache();
            return self.infer(input);
        }
        let x = self.batched_input(input)?;
        self.cached = false;
        let mut edges = HashMap::new();
        for &idx in &self.order {
            let def = &self.desc.layers[idx];
            let st = &mut self.layers[idx];
            if labels.is_none() && matches!(def.params, LayerParams::SoftmaxLoss) {
                st.cache = None;
                continue;
            }
            let step = {
                let ins: Vec<&Tensor> = def.inputs.iter().map(|e| &edges[e]).collect();
                run_layer(
                    def,
                    st.weights.as_ref(),
                    FnlRef::Mut(st.fnl.as_mut()),
                    &ins,
                    &x,
                    mode,
                    labels,
                    Some(&mut self.rng),
                    mode == Mode::Train,
                )
                .map_err(|e| e.in_layer(&def.name))?
            };
            st.cache = None;
            if mode == Mode::Train {
                st.cache = step.cache.clone();
            }
            store(&mut edges, def, step);
        }
        self.cached = mode == Mode::Train;
        Ok(edges)
    }

    fn clear_cache(&mut self) {
        self.cached = false;
        for st in &mut self.layers {
            st.cache = None;
            if let Some(f) = &mut st.fnl {
                f.cache = None;
            }
        }
    }

    /// Total of all loss edges after a train-mode forward.
    pub fn loss(&mut self, input: &Tensor, labels: &[usize]) -> Result<f32> {
        let edges = self.forward(input, Mode::Train, Some(labels))?;
        let mut total = 0.0;
        for l in self.desc.layers.iter().filter(|l| matches!(l.params, LayerParams::SoftmaxLoss)) {
            total += edges[l.output()].data()[0];
        }
        Ok(total)
    }

    /// Seeds every softmax_loss output with gradient 1 and runs backward.
    pub fn backward_from_loss(&mut self) -> Result<Gradients> {
        let seeds: HashMap<String, Tensor> = self
            .desc
            .layers
            .iter()
            .filter(|l| matches!(l.params, LayerParams::SoftmaxLoss))
            .map(|l| (l.output().to_string(), Tensor::from_dims(&[1], vec![1.0])))
            .collect();
        if seeds.is_empty() {
            return Err(Error::usage("network has no softmax_loss layer to seed backward from"));
        }
        self.backward(seeds)
    }

    /// Reverse sweep from the given edge gradients. Gradients reaching an
    /// edge from several consumers are summed.
    pub fn backward(&mut self, seeds: HashMap<String, Tensor>) -> Result<Gradients> {
        if !self.cached {
            return Err(Error::usage("backward requires a preceding train-mode forward"));
        }
        for e in seeds.keys() {
            if self.desc.producer(e).is_none() {
                return Err(Error::usage(format!("gradient supplied for unknown edge `{e}`")));
            }
        }
        let mut grads = Gradients { params: HashMap::new(), edges: seeds };
        for &idx in self.order.iter().rev() {
            let def = &self.desc.layers[idx];
            let Some(g) = grads.edges.get(def.output()) else {
                continue;
            };
            let st = &self.layers[idx];
            let (input_grads, param_grads) =
                backward_layer(def, st, g).map_err(|e| e.in_layer(&def.name))?;
            for (slot, t) in param_grads.into_iter().enumerate() {
                grads.params.insert(param_key(&def.name, slot), t);
            }
            for (edge, t) in def.inputs.iter().zip(input_grads) {
                match grads.edges.get_mut(edge) {
                    Some(acc) => acc.add_assign(&t).map_err(|e| e.in_layer(&def.name))?,
                    None => {
                        grads.edges.insert(edge.clone(), t);
                    }
                }
            }
        }
        for (name, t) in self.params() {
            grads.params.entry(name).or_insert_with(|| Tensor::zeros(t.shape().clone()));
        }
        Ok(grads)
    }
}

enum FnlRef<'a> {
    Shared(Option<&'a FnlState>),
    Mut(Option<&'a mut FnlState>),
}

fn store(edges: &mut HashMap<String, Tensor>, def: &LayerDef, step: Step) {
    if let Some(pre) = step.pre {
        edges.insert(format!("{}{PRE_ACTIVATION_SUFFIX}", def.output()), pre);
    }
    edges.insert(def.output().to_string(), step.out);
}

#[allow(clippy::too_many_arguments)]
fn run_layer(
    def: &LayerDef,
    weights: Option<&Weights>,
    fnl: FnlRef,
    ins: &[&Tensor],
    net_input: &Tensor,
    mode: Mode,
    labels: Option<&[usize]>,
    rng: Option<&mut ChaCha8Rng>,
    keep: bool,
) -> Result<Step> {
    let keep_input = |t: &Tensor| if keep { Some(Cache::Input(t.clone())) } else { None };
    let step = |out: Tensor, cache: Option<Cache>| Step { out, pre: None, cache };
    match &def.params {
        LayerParams::Input { .. } => Ok(step(net_input.clone(), None)),
        LayerParams::Conv { relu, .. } | LayerParams::Fc { relu, .. } => {
            let x = ins[0];
            let pre = match weights {
                Some(Weights::Conv(p)) => ops::conv_forward(x, p)?,
                Some(Weights::Fc(p)) => ops::fc_forward(x, p)?,
                None => return Err(Error::usage("layer has no bound weights")),
            };
            if *relu {
                let out = ops::relu_forward(&pre);
                let cache = keep.then(|| Cache::Fused { input: x.clone(), pre: pre.clone() });
                Ok(Step { out, pre: Some(pre), cache })
            } else {
                Ok(step(pre, keep_input(x)))
            }
        }
        LayerParams::Relu => Ok(step(ops::relu_forward(ins[0]), keep_input(ins[0]))),
        LayerParams::Lrn(p) => Ok(step(ops::lrn_forward(ins[0], p)?, keep_input(ins[0]))),
        LayerParams::Pool(spec) => {
            let (out, cache) = ops::pool_forward(ins[0], spec)?;
            Ok(step(out, keep.then_some(Cache::Pool(cache))))
        }
        LayerParams::Dropout { ratio } => {
            let params = DropoutParams::new(*ratio)?;
            match (mode, rng) {
                (Mode::Train, Some(rng)) => {
                    let (out, mask) = ops::dropout_forward(ins[0], params, mode, rng)?;
                    Ok(step(out, keep.then_some(Cache::Mask(mask))))
                }
                _ => Ok(step(ins[0].clone(), keep.then(|| Cache::Mask(Tensor::filled(ins[0].shape().clone(), 1.0))))),
            }
        }
        LayerParams::Fnl { .. } => {
            let out = match (fnl, mode) {
                (FnlRef::Mut(Some(st)), Mode::Train) => ops::fnl_forward(ins[0], st, Mode::Train)?,
                (FnlRef::Mut(Some(st)), Mode::Test) => ops::fnl_infer(ins[0], st)?,
                (FnlRef::Shared(Some(st)), Mode::Test) => ops::fnl_infer(ins[0], st)?,
                _ => return Err(Error::usage("normalisation state unavailable")),
            };
            Ok(step(out, keep.then_some(Cache::Fnl)))
        }
        LayerParams::SoftmaxLoss => {
            let labels = labels.ok_or_else(|| Error::usage("softmax_loss needs labels"))?;
            let (loss, probs) = ops::softmax_loss_forward(ins[0], labels)?;
            let cache = keep.then(|| Cache::Softmax { probs, labels: labels.to_vec() });
            Ok(step(Tensor::from_dims(&[1], vec![loss]), cache))
        }
        LayerParams::Flatten => {
            let x = ins[0];
            let n = x.batch();
            let out = x.clone().reshape(Shape::new(vec![n, x.len() / n])?)?;
            Ok(step(out, keep.then(|| Cache::Reshape(x.shape().clone()))))
        }
        LayerParams::Sum => {
            let mut out = ins[0].clone();
            for t in &ins[1..] {
                out.add_assign(t)?;
            }
            Ok(step(out, keep.then_some(Cache::Sum)))
        }
    }
}

fn backward_layer(def: &LayerDef, st: &LayerState, g: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    if matches!(def.params, LayerParams::Input { .. }) {
        return Ok((vec![], vec![]));
    }
    let cache = st.cache.as_ref().ok_or_else(|| Error::usage("no forward cache for backward"))?;
    match (&def.params, cache) {
        (LayerParams::Conv { .. } | LayerParams::Fc { .. }, Cache::Input(x) | Cache::Fused { input: x, .. }) => {
            let gated;
            let g = match cache {
                Cache::Fused { pre, .. } => {
                    gated = ops::relu_backward(g, pre)?;
                    &gated
                }
                _ => g,
            };
            match &st.weights {
                Some(Weights::Conv(p)) => {
                    let r = ops::conv_backward(g, x, p)?;
                    Ok((vec![r.input], vec![r.weights, r.bias]))
                }
                Some(Weights::Fc(p)) => {
                    let r = ops::fc_backward(g, x, p)?;
                    Ok((vec![r.input], vec![r.weights, r.bias]))
                }
                None => Err(Error::usage("layer has no bound weights")),
            }
        }
        (LayerParams::Relu, Cache::Input(x)) => Ok((vec![ops::relu_backward(g, x)?], vec![])),
        (LayerParams::Lrn(p), Cache::Input(x)) => Ok((vec![ops::lrn_backward(g, x, p)?], vec![])),
        (LayerParams::Pool(spec), Cache::Pool(pc)) => Ok((vec![ops::pool_backward(g, pc, spec)?], vec![])),
        (LayerParams::Dropout { .. }, Cache::Mask(m)) => Ok((vec![ops::dropout_backward(g, m)?], vec![])),
        (LayerParams::Fnl { .. }, Cache::Fnl) => {
            let fnl = st.fnl.as_ref().ok_or_else(|| Error::usage("normalisation state missing"))?;
            Ok((vec![ops::fnl_backward(g, fnl)?], vec![]))
        }
        (LayerParams::SoftmaxLoss, Cache::Softmax { probs, labels }) => {
            if g.len() != 1 {
                return Err(Error::shape("loss gradient must be a scalar"));
            }
            Ok((vec![ops::softmax_loss_backward(probs, labels, g.data()[0])?], vec![]))
        }
        (LayerParams::Flatten, Cache::Reshape(shape)) => Ok((vec![g.clone().reshape(shape.clone())?], vec![])),
        (LayerParams::Sum, Cache::Sum) => Ok((vec![g.clone(); def.inputs.len()], vec![])),
        _ => Err(Error::usage("forward cache does not match layer kind")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, random_tensor};
    use crate::graph::{builtin, parse_descriptor};

    fn net(text: &str, seed: u64) -> Network {
        Network::new(parse_descriptor(text).unwrap(), seed).unwrap()
    }

    #[test]
    fn identity_micro_net() {
        let n = net("layer in input shape=2,3 out=x\nlayer r relu in=x out=y\n", 1);
        let x = Tensor::from_dims(&[2, 3], vec![0.0, 1.0, 2.0, 3.5, 0.25, 9.0]);
        let out = n.infer(&x).unwrap();
        assert_eq!(out["y"].data(), x.data());
    }

    #[test]
    fn zero_ratio_dropout_train_equals_test() {
        let mut n = net("layer in input shape=5 out=x\nlayer d dropout ratio=0 in=x out=y\n", 2);
        let x = Tensor::from_dims(&[2, 5], (0..10).map(|v| v as f32).collect());
        let a = n.forward(&x, Mode::Train, None).unwrap()["y"].clone();
        let b = n.forward(&x, Mode::Test, None).unwrap()["y"].clone();
        assert_eq!(a, b);
    }

    #[test]
    fn input_shape_mismatch() {
        let n = net("layer in input shape=5 out=x\nlayer r relu in=x out=y\n", 0);
        assert!(matches!(n.infer(&Tensor::from_dims(&[4], vec![0.0; 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_before_forward() {
        let mut n = net("layer in input shape=3 out=x\nlayer f fc num_output=2 in=x out=f\n", 0);
        let seeds = HashMap::from([("f".to_string(), Tensor::from_dims(&[1, 2], vec![1.0, 1.0]))]);
        assert!(matches!(n.backward(seeds), Err(Error::Usage(_))));
    }

    const TWO_FC: &str = "layer in input shape=4 out=x\n\
                          layer fc1 fc num_output=5 relu=true in=x out=h\n\
                          layer fc2 fc num_output=3 in=h out=o\n\
                          layer loss softmax_loss in=o out=loss\n";

    #[test]
    fn two_layer_end_to_end_gradient() {
        let mut n = net(TWO_FC, 3);
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(4);
        let x = random_tensor(&[3, 4], &mut rng);
        let labels = [2, 0, 1];
        n.forward(&x, Mode::Train, Some(&labels)).unwrap();
        let g = n.backward_from_loss().unwrap();
        for name in n.param_names() {
            let base = n.param(&name).unwrap().clone();
            let r = check_gradient(&base, &g.params[&name], 1e-3, |w| {
                let mut p = n.clone();
                *p.param_mut(&name).unwrap() = w.clone();
                p.loss(&x, &labels).unwrap() as f64
            });
            assert!(r.max_rel_error < 1e-3, "{name} {r:?}");
        }
        let r = check_gradient(&x, &g.edges["x"], 1e-3, |xx| n.clone().loss(xx, &labels).unwrap() as f64);
        assert!(r.max_rel_error < 1e-3, "input {r:?}");
    }

    #[test]
    fn zero_seed_gives_zero_param_grads() {
        let mut n = net(TWO_FC, 5);
        let x = Tensor::from_dims(&[2, 4], vec![0.5; 8]);
        n.forward(&x, Mode::Train, Some(&[0, 1])).unwrap();
        let seeds = HashMap::from([("loss".to_string(), Tensor::from_dims(&[1], vec![0.0]))]);
        let g = n.backward(seeds).unwrap();
        assert_eq!(g.params.len(), 4);
        for t in g.params.values() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fan_out_gradients_sum() {
        let text = "layer in input shape=4 out=x\n\
                    layer a fc num_output=3 in=x out=a\n\
                    layer b fc num_output=2 in=x out=b\n";
        let mut n = net(text, 6);
        let mut rng = <ChaCha8Rng as SeedableRng>::seed_from_u64(7);
        let x = random_tensor(&[2, 4], &mut rng);
        let ga = random_tensor(&[2, 3], &mut rng);
        let gb = random_tensor(&[2, 2], &mut rng);
        n.forward(&x, Mode::Train, None).unwrap();
        let both = n
            .backward(HashMap::from([("a".to_string(), ga.clone()), ("b".to_string(), gb.clone())]))
            .unwrap();
        // Independent per-branch gradients, added.
        let pa = FcParams::new(n.param("a.weight").unwrap().clone(), n.param("a.bias").unwrap().clone()).unwrap();
        let pb = FcParams::new(n.param("b.weight").unwrap().clone(), n.param("b.bias").unwrap().clone()).unwrap();
        let mut expected = ops::fc_backward(&ga, &x, &pa).unwrap().input;
        expected.add_assign(&ops::fc_backward(&gb, &x, &pb).unwrap().input).unwrap();
        assert_eq!(both.edges["x"], expected);
    }

    #[test]
    fn viplfacenet_shape_chain() {
        let d = builtin("viplfacenet").unwrap();
        let s = d.edge_shapes().unwrap();
        let chain: Vec<usize> = [
            "conv1", "pool1", "conv2", "conv3", "pool2", "conv4", "conv5", "conv6", "conv7", "pool3",
        ]
        .iter()
        .map(|e| s[*e].dims()[1])
        .collect();
        assert_eq!(chain, [55, 27, 27, 27, 13, 13, 13, 13, 13, 6]);
        assert_eq!(s["pool3"].dims(), &[128, 6, 6]);
        assert_eq!(s["flatten"].dims(), &[4608]);
        assert_eq!(s["fc2"].dims(), &[2048]);
    }

    #[test]
    fn execution_order_never_reads_unproduced_edge() {
        let text = "layer m sum in=a,b out=m\n\
                    layer b relu in=x out=b\n\
                    layer a relu in=x out=a\n\
                    layer in input shape=3 out=x\n\
                    layer t relu in=m out=t\n";
        let n = net(text, 0);
        let mut produced = std::collections::HashSet::new();
        for &i in n.order() {
            let l = &n.descriptor().layers[i];
            assert!(l.inputs.iter().all(|e| produced.contains(e)));
            produced.insert(l.output().to_string());
        }
        let out = n.infer(&Tensor::from_dims(&[3], vec![1.0, -1.0, 2.0])).unwrap();
        assert_eq!(out["t"].data(), &[2.0, 0.0, 4.0]);
    }

    #[test]
    fn fused_relu_records_pre_activation() {
        let n = net("layer in input shape=2 out=x\nlayer f fc num_output=3 relu=true in=x out=f\n", 9);
        let out = n.infer(&Tensor::from_dims(&[2], vec![1.0, -2.0])).unwrap();
        let pre = &out["f:pre"];
        assert_eq!(out["f"], ops::relu_forward(pre));
    }
}
