//! Carrier-network watermarking for small convolutional models: training,
//! keyed embedding, verification, restoration after functionality-preserving
//! attacks, and the attacks themselves.

pub mod attacks;
pub mod audit;
pub mod datasets;
pub mod error;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod restore;
pub mod watermark;

pub use error::{Error, FormatError, Result};
