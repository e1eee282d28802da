//! All-to-all multimodal geospatial contrastive learning at desk scale.

pub mod contrastive;
pub mod coord;
pub mod error;
pub mod eval;
pub mod geo;
pub mod io;
pub mod modality;
pub mod model;
pub mod sampler;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
