//! Sparse feature aggregation for deep convolutional networks.
//!
//! Layer `l` of a block reads the outputs of layers `l - c^i` for every
//! power `c^i <= l`, giving each layer a logarithmic number of inputs while
//! keeping short gradient paths to every earlier layer. The crate covers the
//! graph itself ([`topology`]), architecture planning and cost accounting
//! ([`architecture`]), a small CPU tensor library with reverse-mode
//! differentiation ([`tensor`]), executable networks ([`model`]), a training
//! harness ([`train`]) and weight introspection ([`introspect`]).

/// Version of this crate, recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod architecture;
pub mod introspect;
pub mod model;
pub mod tensor;
pub mod topology;
pub mod train;
