//! Line-oriented network descriptor grammar.
//!
//! ```text
//! # comment
//! layer <name> <kind> key=value ... [in=<edge>,...] out=<edge>
//! feature <edge>
//! ```
//!
//! Kernels are written `k` or `khxkw`. Unknown keys are errors.

use std::collections::HashMap;

use super::descriptor::{valid_ident, LayerDef, LayerKind, LayerParams, NetworkDescriptor};
use crate::error::{Error, Result};
use crate::ops::{ConvSpec, Granularity, LrnParams, PoolKind, PoolSpec, FNL_DEFAULT_EPS, FNL_DEFAULT_MOMENTUM};
use crate::tensor::Shape;

struct Fields<'a> {
    line: usize,
    values: HashMap<&'a str, &'a str>,
}

impl<'a> Fields<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { line: self.line, message: msg.into() }
    }

    fn take(&mut self, key: &str) -> Option<&'a str> {
        self.values.remove(key)
    }

    fn usize_or(&mut self, key: &str, default: Option<usize>) -> Result<usize> {
        match self.take(key) {
            Some(v) => v.parse().map_err(|_| self.err(format!("`{key}` expects an integer, got `{v}`"))),
            None => default.ok_or_else(|| self.err(format!("missing required key `{key}`"))),
        }
    }

    fn f32_or(&mut self, key: &str, default: f32) -> Result<f32> {
        match self.take(key) {
            Some(v) => v.parse().map_err(|_| self.err(format!("`{key}` expects a number, got `{v}`"))),
            None => Ok(default),
        }
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(self.err(format!("`{key}` expects true or false, got `{v}`"))),
            None => Ok(default),
        }
    }

    fn kernel(&mut self) -> Result<(usize, usize)> {
        let v = self.take("kernel").ok_or_else(|| self.err("missing required key `kernel`"))?;
        let parse = |s: &str| s.parse::<usize>().ok().filter(|&k| k > 0);
        let k = match v.split_once('x') {
            Some((h, w)) => parse(h).zip(parse(w)),
            None => parse(v).map(|k| (k, k)),
        };
        k.ok_or_else(|| self.err(format!("bad kernel `{v}`")))
    }

    fn finish(self) -> Result<()> {
        match self.values.keys().min() {
            Some(k) => Err(self.err(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn parse_params(kind: LayerKind, f: &mut Fields) -> Result<LayerParams> {
    Ok(match kind {
        LayerKind::Input => {
            let v = f.take("shape").ok_or_else(|| f.err("input layer needs `shape=`"))?;
            let dims: Option<Vec<usize>> = v.split(',').map(|d| d.parse().ok()).collect();
            let dims = dims.ok_or_else(|| f.err(format!("bad shape `{v}`")))?;
            LayerParams::Input { shape: Shape::new(dims).map_err(|e| f.err(e.to_string()))? }
        }
        LayerKind::Conv => {
            let out_channels = f.usize_or("num_output", None)?;
            let kernel = f.kernel()?;
            let stride = f.usize_or("stride", Some(1))?;
            let pad = f.usize_or("pad", Some(0))?;
            let group = f.usize_or("group", Some(1))?;
            let relu = f.bool_or("relu", false)?;
            if out_channels == 0 || stride == 0 || group == 0 {
                return Err(f.err("num_output, stride and group must be positive"));
            }
            LayerParams::Conv { spec: ConvSpec { out_channels, kernel, stride, pad, group }, relu }
        }
        LayerKind::PoolMax | LayerKind::PoolMean => {
            let kernel = f.kernel()?;
            let stride = f.usize_or("stride", Some(1))?;
            if stride == 0 {
                return Err(f.err("stride must be positive"));
            }
            let kind = if kind == LayerKind::PoolMax { PoolKind::Max } else { PoolKind::Mean };
            LayerParams::Pool(PoolSpec { kind, kernel, stride })
        }
        LayerKind::Fc => {
            let num_output = f.usize_or("num_output", None)?;
            if num_output == 0 {
                return Err(f.err("num_output must be positive"));
            }
            LayerParams::Fc { num_output, relu: f.bool_or("relu", false)? }
        }
        LayerKind::Dropout => LayerParams::Dropout { ratio: f.f32_or("ratio", 0.5)? },
        LayerKind::Fnl => {
            let momentum = f.f32_or("momentum", FNL_DEFAULT_MOMENTUM)?;
            let eps = f.f32_or("eps", FNL_DEFAULT_EPS)?;
            let granularity = match f.take("granularity") {
                None | Some("channel") => Granularity::PerChannel,
                Some("node") => Granularity::PerNode,
                Some(v) => return Err(f.err(format!("granularity must be channel or node, got `{v}`"))),
            };
            if !(eps > 0.0) {
                return Err(f.err("eps must be positive"));
            }
            LayerParams::Fnl { momentum, eps, granularity }
        }
        LayerKind::Lrn => {
            let d = LrnParams::default();
            LayerParams::Lrn(LrnParams {
                local_size: f.usize_or("local_size", Some(d.local_size))?,
                alpha: f.f32_or("alpha", d.alpha)?,
                beta: f.f32_or("beta", d.beta)?,
                k: f.f32_or("k", d.k)?,
            })
        }
        LayerKind::Relu => LayerParams::Relu,
        LayerKind::SoftmaxLoss => LayerParams::SoftmaxLoss,
        LayerKind::Flatten => LayerParams::Flatten,
        LayerKind::Sum => LayerParams::Sum,
    })
}

fn edge_list(f: &Fields, v: &str) -> Result<Vec<String>> {
    let edges: Vec<String> = v.split(',').map(str::to_string).collect();
    if let Some(bad) = edges.iter().find(|e| !valid_ident(e)) {
        return Err(f.err(format!("invalid edge name `{bad}`")));
    }
    Ok(edges)
}

/// Parses and validates a descriptor.
pub fn parse_descriptor(text: &str) -> Result<NetworkDescriptor> {
    let mut layers = Vec::new();
    let mut feature = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let err = |m: String| Error::Parse { line, message: m };
        match tokens.next() {
            Some("feature") => {
                let edge = tokens.next().ok_or_else(|| err("`feature` needs an edge name".into()))?;
                if tokens.next().is_some() {
                    return Err(err("trailing tokens after feature edge".into()));
                }
                if feature.replace(edge.to_string()).is_some() {
                    return Err(err("feature edge declared twice".into()));
                }
            }
            Some("layer") => {
                let name = tokens.next().ok_or_else(|| err("missing layer name".into()))?;
                if !valid_ident(name) {
                    return Err(err(format!("invalid layer name `{name}`")));
                }
                let kind_str = tokens.next().ok_or_else(|| err("missing layer kind".into()))?;
                let kind = LayerKind::parse(kind_str).ok_or_else(|| err(format!("unknown layer kind `{kind_str}`")))?;
                let mut values = HashMap::new();
                for tok in tokens {
                    let (k, v) = tok
                        .split_once('=')
                        .ok_or_else(|| err(format!("expected key=value, got `{tok}`")))?;
                    if values.insert(k, v).is_some() {
                        return Err(err(format!("key `{k}` given twice")));
                    }
                }
                let mut fields = Fields { line, values };
                let inputs = match fields.take("in") {
                    Some(v) => edge_list(&fields, v)?,
                    None => Vec::new(),
                };
                let outputs = match fields.take("out") {
                    Some(v) => edge_list(&fields, v)?,
                    None => return Err(err(format!("layer `{name}` has no `out=`"))),
                };
                let params = parse_params(kind, &mut fields)?;
                fields.finish()?;
                layers.push(LayerDef { name: name.to_string(), params, inputs, outputs });
            }
            Some(other) => return Err(err(format!("expected `layer` or `feature`, got `{other}`"))),
            None => unreachable!(),
        }
    }
    NetworkDescriptor::new(layers, feature)
}
