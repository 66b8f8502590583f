//! Image matching and metric learning with transformer encoders and a
//! hard-attention similarity decoder, plus the training and evaluation
//! machinery around it.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod encoder;
pub mod error;
pub mod matcher;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod trainkit;
pub mod variants;

pub use config::{BackboneConfig, ModelConfig, Variant};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Precision, Tape, Var};
pub use tensor::Tensor;
