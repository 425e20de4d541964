//! Hierarchical inter-level attention for vision transformers.
//!
//! Each HILA block lets a coarse stage and the stage below it exchange
//! information through local 4×4 windows: a bottom-up update where every
//! coarse location attends to its window of fine features, and a top-down
//! update where every fine location attends to the (at most four) coarse
//! windows covering it.
//!
//! The crate is layered: [`tensor`] holds the dense kernels, [`autograd`]
//! differentiates them, [`interlevel`] and [`encoder`] build the model,
//! [`hierarchy`] composes attention maps for visualisation, and [`metrics`]
//! and [`data`] support toy-scale training and evaluation.

pub mod autograd;
pub mod check;
pub mod data;
pub mod encoder;
pub mod error;
pub mod hierarchy;
pub mod interlevel;
pub mod layers;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
