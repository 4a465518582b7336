//! Multi-level 3D neural cellular automata for volumetric segmentation, with
//! an ensemble-variance quality score.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod inference;
pub mod io;
pub mod loss;
pub mod nca;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod quality;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
