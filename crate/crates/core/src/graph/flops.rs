//! Multiply-accumulate counts.
//!
//! The headline total covers conv (`Cout·Cin/g·kh·kw·Hout·Wout`) and fc
//! (`n·m`) layers only. Other layers get a rough per-element count reported
//! separately.

use super::descriptor::{LayerParams, NetworkDescriptor};
use crate::error::Result;
use crate::tensor::Shape;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub name: String,
    pub kind: &'static str,
    pub macs: u64,
    /// Whether `macs` is part of the headline total.
    pub headline: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
    pub total: u64,
    pub other: u64,
}

pub fn count_flops(desc: &NetworkDescriptor, input_shape: &Shape) -> Result<FlopReport> {
    let shapes = desc.edge_shapes_for(input_shape)?;
    let mut layers = Vec::with_capacity(desc.layers.len());
    let (mut total, mut other) = (0u64, 0u64);
    for l in &desc.layers {
        let out = &shapes[l.output()];
        let in_count = l.inputs.first().map(|e| shapes[e].count() as u64).unwrap_or(0);
        let (macs, headline) = match &l.params {
            LayerParams::Conv { spec, .. } => {
                let cin = shapes[&l.inputs[0]].dims()[0];
                let d = out.dims();
                let macs = spec.out_channels * (cin / spec.group) * spec.kernel.0 * spec.kernel.1 * d[1] * d[2];
                (macs as u64, true)
            }
            LayerParams::Fc { num_output, .. } => (in_count * *num_output as u64, true),
            LayerParams::Pool(p) => ((out.count() * p.kernel.0 * p.kernel.1) as u64, false),
            LayerParams::Lrn(p) => (in_count * p.local_size as u64, false),
            LayerParams::Fnl { .. } => (2 * in_count, false),
            LayerParams::Relu | LayerParams::Dropout { .. } | LayerParams::SoftmaxLoss => (in_count, false),
            LayerParams::Sum => (out.count() as u64 * l.inputs.len() as u64, false),
            LayerParams::Input { .. } | LayerParams::Flatten => (0, false),
        };
        if headline {
            total += macs;
        } else {
            other += macs;
        }
        layers.push(LayerFlops { name: l.name.clone(), kind: l.kind().as_str(), macs, headline });
    }
    Ok(FlopReport { layers, total, other })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{builtin, parse_descriptor};

    #[test]
    fn conv_example() {
        // Cin=3, Cout=2, 3x3, output 4x4 → 2·3·3·3·4·4
        let d = parse_descriptor("layer in input shape=3,6,6 out=x\nlayer c conv num_output=2 kernel=3 in=x out=c\n").unwrap();
        let r = count_flops(&d, &d.input_shape).unwrap();
        assert_eq!(r.total, 864);
        assert_eq!(r.total, 2 * 3 * 3 * 3 * 4 * 4);
    }

    #[test]
    fn fc_example() {
        let d = parse_descriptor("layer in input shape=10 out=x\nlayer f fc num_output=5 in=x out=f\n").unwrap();
        assert_eq!(count_flops(&d, &d.input_shape).unwrap().total, 50);
    }

    #[test]
    fn builtin_totals() {
        // Hand-chained per-layer products at crop 227.
        let vipl: u64 = 48 * 3 * 81 * 55 * 55
            + 128 * 48 * 9 * 27 * 27
            + 128 * 128 * 9 * 27 * 27
            + 256 * 128 * 9 * 13 * 13
            + 192 * 256 * 9 * 13 * 13
            + 192 * 192 * 9 * 13 * 13
            + 128 * 192 * 9 * 13 * 13
            + 4608 * 4096
            + 4096 * 2048
            + 2048 * 10575;
        let alex: u64 = 96 * 3 * 121 * 55 * 55
            + 256 * 48 * 25 * 27 * 27
            + 384 * 256 * 9 * 13 * 13
            + 384 * 192 * 9 * 13 * 13
            + 256 * 192 * 9 * 13 * 13
            + 9216 * 4096
            + 4096 * 4096
            + 4096 * 10575;
        for (name, want) in [("viplfacenet", vipl), ("alexnet", alex)] {
            let d = builtin(name).unwrap();
            assert_eq!(count_flops(&d, &d.input_shape).unwrap().total, want, "{name}");
        }
    }
}
