//! Prior-guided adaptive sub-sampling of range-azimuth radar frames.
//!
//! Frames are cut into equal blocks, each block is compressed with its own
//! random measurement matrix, and a small linear program decides how many
//! measurements every block gets from camera detections, CFAR hits or
//! tracked boxes. Reconstruction solves basis pursuit in a 2-D DCT basis.

pub mod allocator;
pub mod geometry;
pub mod sensing;
pub mod cfar;
pub mod tracking;
pub mod detection;
pub mod evaluation;
pub mod scene;
pub mod io;
pub mod pipeline;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/frames.md")]
    mod frames {}
    #[doc = include_str!("../../../book/src/sensing.md")]
    mod sensing {}
    #[doc = include_str!("../../../book/src/allocation.md")]
    mod allocation {}
    #[doc = include_str!("../../../book/src/priors.md")]
    mod priors {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
