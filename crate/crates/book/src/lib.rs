//! The guide's chapters as doc comments, so `cargo test` runs every listing.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/path_search.md")]
pub mod path_search {}
#[doc = include_str!("../../../book/src/visual_reasoning.md")]
pub mod visual_reasoning {}
#[doc = include_str!("../../../book/src/fusion_decoding.md")]
pub mod fusion_decoding {}
#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
