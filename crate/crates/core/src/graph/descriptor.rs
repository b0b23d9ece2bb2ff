use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};

use super::topo::topo_order;
use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec, Granularity, LrnParams, PoolKind, PoolSpec};
use crate::tensor::Shape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Input,
    Conv,
    Relu,
    Lrn,
    PoolMax,
    PoolMean,
    Fc,
    Dropout,
    Fnl,
    SoftmaxLoss,
    Flatten,
    Sum,
}

impl LayerKind {
    pub const ALL: [LayerKind; 12] = [
        LayerKind::Input,
        LayerKind::Conv,
        LayerKind::Relu,
        LayerKind::Lrn,
        LayerKind::PoolMax,
        LayerKind::PoolMean,
        LayerKind::Fc,
        LayerKind::Dropout,
        LayerKind::Fnl,
        LayerKind::SoftmaxLoss,
        LayerKind::Flatten,
        LayerKind::Sum,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Lrn => "lrn",
            LayerKind::PoolMax => "pool_max",
            LayerKind::PoolMean => "pool_mean",
            LayerKind::Fc => "fc",
            LayerKind::Dropout => "dropout",
            LayerKind::Fnl => "fnl",
            LayerKind::SoftmaxLoss => "softmax_loss",
            LayerKind::Flatten => "flatten",
            LayerKind::Sum => "sum",
        }
    }

    pub fn parse(s: &str) -> Option<LayerKind> {
        LayerKind::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn has_weights(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Fc)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Kind-specific parameters. Conv and fc may carry a fused ReLU.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Input { shape: Shape },
    Conv { spec: ConvSpec, relu: bool },
    Relu,
    Lrn(LrnParams),
    Pool(PoolSpec),
    Fc { num_output: usize, relu: bool },
    Dropout { ratio: f32 },
    Fnl { momentum: f32, eps: f32, granularity: Granularity },
    SoftmaxLoss,
    Flatten,
    Sum,
}

impl LayerParams {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerParams::Input { .. } => LayerKind::Input,
            LayerParams::Conv { .. } => LayerKind::Conv,
            LayerParams::Relu => LayerKind::Relu,
            LayerParams::Lrn(_) => LayerKind::Lrn,
            LayerParams::Pool(p) if p.kind == PoolKind::Max => LayerKind::PoolMax,
            LayerParams::Pool(_) => LayerKind::PoolMean,
            LayerParams::Fc { .. } => LayerKind::Fc,
            LayerParams::Dropout { .. } => LayerKind::Dropout,
            LayerParams::Fnl { .. } => LayerKind::Fnl,
            LayerParams::SoftmaxLoss => LayerKind::SoftmaxLoss,
            LayerParams::Flatten => LayerKind::Flatten,
            LayerParams::Sum => LayerKind::Sum,
        }
    }

    pub fn fused_relu(&self) -> bool {
        matches!(self, LayerParams::Conv { relu: true, .. } | LayerParams::Fc { relu: true, .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDef {
    pub name: String,
    pub params: LayerParams,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl LayerDef {
    pub fn kind(&self) -> LayerKind {
        self.params.kind()
    }

    pub fn output(&self) -> &str {
        &self.outputs[0]
    }
}

/// A validated layer DAG.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkDescriptor {
    pub layers: Vec<LayerDef>,
    pub input_shape: Shape,
    pub feature: Option<String>,
}

/// Element shapes per sample; the loss edge is the scalar `(1)`.
pub type EdgeShapes = HashMap<String, Shape>;

pub(crate) fn valid_ident(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.' | '/'))
}

impl NetworkDescriptor {
    /// Validates structure and shapes.
    pub fn new(layers: Vec<LayerDef>, feature: Option<String>) -> Result<Self> {
        let mut names = HashSet::new();
        let mut producers: HashMap<&str, &str> = HashMap::new();
        let mut input_shape = None;
        for l in &layers {
            if !valid_ident(&l.name) {
                return Err(Error::data(format!("invalid layer name `{}`", l.name)));
            }
            if !names.insert(l.name.as_str()) {
                return Err(Error::data(format!("duplicate layer name `{}`", l.name)));
            }
            if l.outputs.len() != 1 {
                return Err(Error::data(format!("layer `{}` must declare exactly one output edge", l.name)));
            }
            let want_inputs = match l.kind() {
                LayerKind::Input => 0..=0,
                LayerKind::Sum => 1..=usize::MAX,
                _ => 1..=1,
            };
            if !want_inputs.contains(&l.inputs.len()) {
                return Err(Error::data(format!(
                    "layer `{}` ({}) takes {} input edge(s), got {}",
                    l.name,
                    l.kind(),
                    if l.kind() == LayerKind::Input { "0" } else if l.kind() == LayerKind::Sum { "1+" } else { "1" },
                    l.inputs.len()
                )));
            }
            for e in l.inputs.iter().chain(&l.outputs) {
                if !valid_ident(e) {
                    return Err(Error::data(format!("invalid edge name `{e}` in layer `{}`", l.name)));
                }
            }
            if let Some(prev) = producers.insert(l.output(), &l.name) {
                return Err(Error::data(format!(
                    "edge `{}` produced by both `{prev}` and `{}`",
                    l.output(),
                    l.name
                )));
            }
            if let LayerParams::Input { shape } = &l.params {
                if input_shape.replace(shape.clone()).is_some() {
                    return Err(Error::data("descriptor declares more than one input layer"));
                }
            }
        }
        for l in &layers {
            for e in &l.inputs {
                if !producers.contains_key(e.as_str()) {
                    return Err(Error::data(format!("layer `{}` consumes dangling edge `{e}`", l.name)));
                }
            }
        }
        let input_shape = input_shape.ok_or_else(|| Error::data("descriptor has no input layer"))?;
        if let Some(f) = &feature {
            if !producers.contains_key(f.as_str()) {
                return Err(Error::data(format!("feature edge `{f}` is not produced by any layer")));
            }
        }
        let desc = NetworkDescriptor { layers, input_shape, feature };
        topo_order(&desc)?;
        desc.edge_shapes()?;
        Ok(desc)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerDef> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn producer(&self, edge: &str) -> Option<&LayerDef> {
        self.layers.iter().find(|l| l.output() == edge)
    }

    /// Propagates per-sample shapes from the input layer.
    pub fn edge_shapes(&self) -> Result<EdgeShapes> {
        self.edge_shapes_for(&self.input_shape)
    }

    pub fn edge_shapes_for(&self, input: &Shape) -> Result<EdgeShapes> {
        let mut shapes = EdgeShapes::new();
        for idx in topo_order(self)? {
            let l = &self.layers[idx];
            let ins: Vec<&Shape> = l.inputs.iter().map(|e| &shapes[e]).collect();
            let out = layer_output_shape(l, &ins, input).map_err(|e| e.in_layer(&l.name))?;
            shapes.insert(l.output().to_string(), out);
        }
        Ok(shapes)
    }

    /// Weight plus bias element count of a layer, given propagated shapes.
    pub fn param_count(&self, l: &LayerDef, shapes: &EdgeShapes) -> Result<usize> {
        Ok(param_shapes(l, shapes)?.iter().map(Shape::count).sum())
    }

    /// Canonical text; reparses to an equal descriptor.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            write!(s, "layer {} {}", l.name, l.kind()).unwrap();
            for (k, v) in param_pairs(&l.params) {
                write!(s, " {k}={v}").unwrap();
            }
            if !l.inputs.is_empty() {
                write!(s, " in={}", l.inputs.join(",")).unwrap();
            }
            writeln!(s, " out={}", l.outputs.join(",")).unwrap();
        }
        if let Some(f) = &self.feature {
            writeln!(s, "feature {f}").unwrap();
        }
        s
    }
}

fn fmt_f32(v: f32) -> String {
    format!("{v:?}")
}

pub(crate) fn param_pairs(p: &LayerParams) -> Vec<(&'static str, String)> {
    match p {
        LayerParams::Input { shape } => {
            let dims: Vec<String> = shape.dims().iter().map(|d| d.to_string()).collect();
            vec![("shape", dims.join(","))]
        }
        LayerParams::Conv { spec, relu } => vec![
            ("num_output", spec.out_channels.to_string()),
            ("kernel", format!("{}x{}", spec.kernel.0, spec.kernel.1)),
            ("stride", spec.stride.to_string()),
            ("pad", spec.pad.to_string()),
            ("group", spec.group.to_string()),
            ("relu", relu.to_string()),
        ],
        LayerParams::Lrn(p) => vec![
            ("local_size", p.local_size.to_string()),
            ("alpha", fmt_f32(p.alpha)),
            ("beta", fmt_f32(p.beta)),
            ("k", fmt_f32(p.k)),
        ],
        LayerParams::Pool(p) => vec![
            ("kernel", format!("{}x{}", p.kernel.0, p.kernel.1)),
            ("stride", p.stride.to_string()),
        ],
        LayerParams::Fc { num_output, relu } => {
            vec![("num_output", num_output.to_string()), ("relu", relu.to_string())]
        }
        LayerParams::Dropout { ratio } => vec![("ratio", fmt_f32(*ratio))],
        LayerParams::Fnl { momentum, eps, granularity } => vec![
            ("momentum", fmt_f32(*momentum)),
            ("eps", fmt_f32(*eps)),
            (
                "granularity",
                match granularity {
                    Granularity::PerChannel => "channel".to_string(),
                    Granularity::PerNode => "node".to_string(),
                },
            ),
        ],
        LayerParams::Relu | LayerParams::SoftmaxLoss | LayerParams::Flatten | LayerParams::Sum => vec![],
    }
}

fn layer_output_shape(l: &LayerDef, ins: &[&Shape], input: &Shape) -> Result<Shape> {
    let first = || ins[0];
    match &l.params {
        LayerParams::Input { .. } => Ok(input.clone()),
        LayerParams::Conv { spec, .. } => ops::conv_shape(first(), spec),
        LayerParams::Pool(spec) => ops::pool_shape(first(), spec),
        LayerParams::Lrn(p) => {
            if first().rank() != 3 {
                return Err(Error::shape(format!("lrn expects (C,H,W), got {}", first())));
            }
            if p.local_size % 2 == 0 {
                return Err(Error::config("lrn local_size must be odd"));
            }
            Ok(first().clone())
        }
        LayerParams::Fc { num_output, .. } => {
            if first().rank() != 1 {
                return Err(Error::shape(format!(
                    "fc expects a flattened input, got {}; insert a flatten layer",
                    first()
                )));
            }
            Shape::new(vec![*num_output])
        }
        LayerParams::Flatten => Shape::new(vec![first().count()]),
        LayerParams::Dropout { ratio } => {
            ops::DropoutParams::new(*ratio)?;
            Ok(first().clone())
        }
        LayerParams::Fnl { momentum, .. } => {
            if !(*momentum > 0.0 && *momentum < 1.0) {
                return Err(Error::config(format!("fnl momentum {momentum} must lie in (0, 1)")));
            }
            Ok(first().clone())
        }
        LayerParams::Relu => Ok(first().clone()),
        LayerParams::SoftmaxLoss => {
            if first().rank() != 1 {
                return Err(Error::shape(format!("softmax_loss expects (C) logits, got {}", first())));
            }
            Shape::new(vec![1])
        }
        LayerParams::Sum => {
            if let Some(bad) = ins.iter().find(|s| **s != ins[0]) {
                return Err(Error::shape(format!("sum inputs disagree: {} vs {bad}", ins[0])));
            }
            Ok(first().clone())
        }
    }
}

/// Parameter tensor shapes for a weight-bearing layer: `[weight, bias]`.
pub(crate) fn param_shapes(l: &LayerDef, shapes: &EdgeShapes) -> Result<Vec<Shape>> {
    match &l.params {
        LayerParams::Conv { spec, .. } => {
            let in_c = shapes[&l.inputs[0]].dims()[0];
            Ok(vec![spec.weight_shape(in_c)?, Shape::new(vec![spec.out_channels])?])
        }
        LayerParams::Fc { num_output, .. } => {
            let n = shapes[&l.inputs[0]].count();
            Ok(vec![Shape::new(vec![n, *num_output])?, Shape::new(vec![*num_output])?])
        }
        _ => Ok(vec![]),
    }
}

/// Fan-in used for weight initialisation.
pub(crate) fn fan_in(l: &LayerDef, shapes: &EdgeShapes) -> usize {
    match &l.params {
        LayerParams::Conv { spec, .. } => {
            shapes[&l.inputs[0]].dims()[0] / spec.group * spec.kernel.0 * spec.kernel.1
        }
        LayerParams::Fc { .. } => shapes[&l.inputs[0]].count(),
        _ => 0,
    }
}

/// Number of normalised nodes for an fnl layer.
pub(crate) fn fnl_nodes(l: &LayerDef, shapes: &EdgeShapes) -> Option<(usize, Granularity)> {
    let LayerParams::Fnl { granularity, .. } = &l.params else {
        return None;
    };
    let s = &shapes[&l.inputs[0]];
    let nodes = match (s.rank(), granularity) {
        (1, _) => s.count(),
        (_, Granularity::PerChannel) => s.dims()[0],
        (_, Granularity::PerNode) => s.count(),
    };
    Some((nodes, *granularity))
}
