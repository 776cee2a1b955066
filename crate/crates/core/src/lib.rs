//! Video token compression driven by information uniqueness.
//!
//! A video arrives as per-frame token features (`T` frames of `N` tokens).
//! Compression runs in three stages:
//!
//! 1. [`fgf`] merges runs of near-identical frames into groups and fuses
//!    each group into one representative frame;
//! 2. [`alloc`] splits the total token budget across groups in proportion
//!    to how unique each group is relative to the rest;
//! 3. [`sdc`] greedily keeps the most unique tokens of each group and fuses
//!    their redundant neighbours into them.
//!
//! [`pipeline`] wires the stages together, [`math`] holds the shared
//! kernels and the reconstruction-error bound, and [`io`] the on-disk
//! formats.

pub mod alloc;
pub mod baselines;
pub mod bench;
pub mod error;
pub mod fgf;
pub mod io;
pub mod math;
pub mod pipeline;
pub mod sdc;
pub mod synth;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use pipeline::{analyze, compress, CompressedVideo, CompressionConfig, CompressionReport, Mode};
pub use sdc::{CompressedFrame, EmitOrder, SdcParams};
pub use tensor::{TokenMatrix, VideoTensor};
