//! Network descriptors, execution, built-in architectures and the model container.

mod builtin;
mod descriptor;
mod flops;
mod model;
mod network;
mod parser;
mod topo;

pub use builtin::{
    builtin, builtin_text, builtin_with_crop, with_fnl, with_input_shape, BUILTIN_NAMES, DEFAULT_CROP, IDENTITIES,
};
pub use descriptor::{EdgeShapes, LayerDef, LayerKind, LayerParams, NetworkDescriptor};
pub use flops::{count_flops, FlopReport, LayerFlops};
pub use model::{
    decode_model, encode_model, fnv1a64, load_model, read_block, save_model, write_atomic, write_block, Reader,
    FORMAT_VERSION, MAGIC,
};
pub use network::{Gradients, Network, PRE_ACTIVATION_SUFFIX};
pub use parser::parse_descriptor;
pub use topo::topo_order;
