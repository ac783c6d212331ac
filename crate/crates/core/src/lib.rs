//! Sign-language translation and sign-subtitle alignment from skeletal
//! keypoints and lip features, at desk scale.

pub mod backbones;
pub mod dataio;
pub mod decoder;
pub mod error;
pub mod islr;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perceiver;
pub mod pipeline;
pub mod ssa;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
