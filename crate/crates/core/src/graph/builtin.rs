//! The three reference architectures, built as descriptor text.
//!
//! ReLUs are fused into their conv/fc layers. Each network ends at a
//! 10,575-way `fc3`; the declared feature edge is `fc2`.

use std::fmt::Write as _;

use super::descriptor::{LayerDef, LayerParams, NetworkDescriptor};
use super::parser::parse_descriptor;
use crate::error::{Error, Result};
use crate::ops::{FNL_DEFAULT_EPS, FNL_DEFAULT_MOMENTUM, Granularity};

pub const BUILTIN_NAMES: [&str; 3] = ["alexnet", "viplfacenet_full", "viplfacenet"];
pub const DEFAULT_CROP: usize = 227;
pub const IDENTITIES: usize = 10_575;

enum Row {
    Conv { n: usize, k: usize, s: usize, p: usize, g: usize },
    Lrn,
    Pool,
}

fn conv(n: usize, k: usize, s: usize, p: usize) -> Row {
    Row::Conv { n, k, s, p, g: 1 }
}

fn grouped(n: usize, k: usize, p: usize) -> Row {
    Row::Conv { n, k, s: 1, p, g: 2 }
}

fn rows(name: &str) -> Option<(Vec<Row>, usize)> {
    use Row::{Lrn, Pool};
    match name {
        "alexnet" => Some((
            vec![
                conv(96, 11, 4, 0),
                Lrn,
                Pool,
                grouped(256, 5, 2),
                Lrn,
                Pool,
                conv(384, 3, 1, 1),
                grouped(384, 3, 1),
                grouped(256, 3, 1),
                Pool,
            ],
            4096,
        )),
        "viplfacenet_full" => Some((
            vec![
                conv(96, 9, 4, 0),
                Pool,
                conv(192, 3, 1, 1),
                conv(192, 3, 1, 1),
                Pool,
                conv(384, 3, 1, 1),
                conv(256, 3, 1, 1),
                conv(256, 3, 1, 1),
                conv(192, 3, 1, 1),
                Pool,
            ],
            2048,
        )),
        "viplfacenet" => Some((
            vec![
                conv(48, 9, 4, 0),
                Pool,
                conv(128, 3, 1, 1),
                conv(128, 3, 1, 1),
                Pool,
                conv(256, 3, 1, 1),
                conv(192, 3, 1, 1),
                conv(192, 3, 1, 1),
                conv(128, 3, 1, 1),
                Pool,
            ],
            2048,
        )),
        _ => None,
    }
}

/// Descriptor text for a built-in at the given crop size.
pub fn builtin_text(name: &str, crop: usize) -> Result<String> {
    let (body, fc2) = rows(name).ok_or_else(|| {
        Error::usage(format!("unknown builtin `{name}` (expected one of {})", BUILTIN_NAMES.join(", ")))
    })?;
    let mut t = String::new();
    writeln!(t, "# {name}").unwrap();
    writeln!(t, "layer data input shape=3,{crop},{crop} out=data").unwrap();
    let (mut prev, mut nconv, mut nlrn, mut npool) = ("data".to_string(), 0, 0, 0);
    for row in body {
        let name = match row {
            Row::Conv { n, k, s, p, g } => {
                nconv += 1;
                let name = format!("conv{nconv}");
                writeln!(
                    t,
                    "layer {name} conv num_output={n} kernel={k} stride={s} pad={p} group={g} relu=true in={prev} out={name}"
                )
                .unwrap();
                name
            }
            Row::Lrn => {
                nlrn += 1;
                let name = format!("lrn{nlrn}");
                writeln!(t, "layer {name} lrn local_size=5 alpha=0.0001 beta=0.75 k=1 in={prev} out={name}").unwrap();
                name
            }
            Row::Pool => {
                npool += 1;
                let name = format!("pool{npool}");
                writeln!(t, "layer {name} pool_max kernel=3 stride=2 in={prev} out={name}").unwrap();
                name
            }
        };
        prev = name;
    }
    writeln!(t, "layer flatten flatten in={prev} out=flatten").unwrap();
    writeln!(t, "layer fc1 fc num_output=4096 relu=true in=flatten out=fc1").unwrap();
    writeln!(t, "layer dropout1 dropout ratio=0.5 in=fc1 out=dropout1").unwrap();
    writeln!(t, "layer fc2 fc num_output={fc2} relu=true in=dropout1 out=fc2").unwrap();
    writeln!(t, "layer dropout2 dropout ratio=0.5 in=fc2 out=dropout2").unwrap();
    writeln!(t, "layer fc3 fc num_output={IDENTITIES} in=dropout2 out=fc3").unwrap();
    writeln!(t, "feature fc2").unwrap();
    Ok(t)
}

pub fn builtin(name: &str) -> Result<NetworkDescriptor> {
    builtin_with_crop(name, DEFAULT_CROP)
}

pub fn builtin_with_crop(name: &str, crop: usize) -> Result<NetworkDescriptor> {
    parse_descriptor(&builtin_text(name, crop)?)
}

/// Splits every fused-ReLU layer into `layer → fnl → relu`, keeping the
/// original output edge name on the ReLU so downstream wiring is unchanged.
pub fn with_fnl(desc: &NetworkDescriptor) -> Result<NetworkDescriptor> {
    let mut layers = Vec::with_capacity(desc.layers.len() * 2);
    for l in &desc.layers {
        if !l.params.fused_relu() {
            layers.push(l.clone());
            continue;
        }
        let out = l.output().to_string();
        let (raw, norm) = (format!("{out}_raw"), format!("{out}_norm"));
        let mut base = l.clone();
        match &mut base.params {
            LayerParams::Conv { relu, .. } | LayerParams::Fc { relu, .. } => *relu = false,
            _ => unreachable!(),
        }
        base.outputs = vec![raw.clone()];
        layers.push(base);
        layers.push(LayerDef {
            name: format!("{}_fnl", l.name),
            params: LayerParams::Fnl {
                momentum: FNL_DEFAULT_MOMENTUM,
                eps: FNL_DEFAULT_EPS,
                granularity: Granularity::PerChannel,
            },
            inputs: vec![raw],
            outputs: vec![norm.clone()],
        });
        layers.push(LayerDef {
            name: format!("{}_relu", l.name),
            params: LayerParams::Relu,
            inputs: vec![norm],
            outputs: vec![out],
        });
    }
    NetworkDescriptor::new(layers, desc.feature.clone())
}

/// Same network with a different input shape.
pub fn with_input_shape(desc: &NetworkDescriptor, shape: crate::tensor::Shape) -> Result<NetworkDescriptor> {
    let mut layers = desc.layers.clone();
    for l in &mut layers {
        if let LayerParams::Input { shape: s } = &mut l.params {
            *s = shape.clone();
        }
    }
    NetworkDescriptor::new(layers, desc.feature.clone())
}
