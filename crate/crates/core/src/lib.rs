//! Weakly supervised object detection with a two-stream multiple instance
//! detection network and online instance classifier refinement.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: boxes, IoU and NMS.
//! * [`synthdata`]: synthetic weakly labelled scenes and their file format.
//! * [`netcore`]: dense layers, softmaxes, initialization, SGD, checkpoints.
//! * [`midn`]: the two-stream MIL head and its image-level loss.
//! * [`oicr`]: refinement branches, supervision generation and the combined
//!   loss with analytic gradients.
//! * [`trainer`]: the SGD loop.
//! * [`eval`]: detection, AP/mAP, CorLoc and pseudo ground truth export.
//! * [`ablation`]: training/evaluation grids over K, loss weighting and the
//!   IoU threshold.

pub mod ablation;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io_util;
pub mod midn;
pub mod netcore;
pub mod oicr;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
