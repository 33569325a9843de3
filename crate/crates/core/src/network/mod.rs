//! AddressNet and Enhanced AddressNet.

mod model;
mod spec;

pub use model::{argmax_rows, AddressModule, BnMode, ConvUnit, Network};
pub use spec::{
    build_network, InputShape, ModuleConfig, ModuleShape, ModuleVariant, NetworkSpec, Shortcut, Stage, StemConfig,
    NETWORK_NAMES,
};
