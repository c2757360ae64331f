//! Bottom-up instance segmentation of thin, mutually crossing curvilinear
//! structures (catheters, tubes, wires) from per-pixel associative embeddings.
//!
//! The pipeline stages are:
//!
//! 1. **embednet** – a small convolutional trunk with a segmentation head and a
//!    3-d embedding head, trained with Dice + discriminative loss.
//! 2. **cluster** – foreground extraction, coordinate augmentation to 5-d and
//!    flat-kernel mean shift.
//! 3. **resolve** – intersection resolution: pixels whose embedding sits
//!    between cluster centers are assigned to every involved instance.
//!
//! Supporting modules provide synthetic crossing-curve scenes ([`synthgen`]),
//! grid primitives and augmentation ([`imagecore`]), metrics and the
//! connected-components baseline ([`evalx`]), inference orchestration
//! ([`pipeline`]) and file formats ([`io`]).

pub mod cluster;
pub mod embednet;
pub mod error;
pub mod evalx;
pub mod imagecore;
pub mod io;
pub mod pipeline;
pub mod render;
pub mod resolve;
pub mod synthgen;

pub use error::{Error, Result};
pub use imagecore::{EmbeddingField, ImageGrid, InstanceSet, LabelMap, Mask};

/// Derive an independent per-item seed from a base seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
