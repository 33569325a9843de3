//! Zero-copy shift primitives for compact CNNs.
//!
//! Tensors are views into guarded buffers ([`TensorView`]). Address shift is
//! an offset change, channel shift copies half a group into spare space
//! behind each image, and shortcut concatenation writes producers straight
//! into a pre-allocated arena. [`conv::fused_enhanced_gconv`] embeds channel
//! and address shifts in a grouped 1x1 convolution.

pub mod analyzer;
pub mod autodiff;
pub mod bench;
pub mod conv;
pub mod error;
pub mod io;
pub mod network;
pub mod shift;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Buffer, Dims, Element, TensorView};
