//! Versatile convolution filters.
//!
//! A small set of stored *primary* filters is expanded into many *secondary*
//! filters by binary masks: nested centered squares (spatial), sliding
//! channel windows (channel), or masks learned jointly with the filters
//! through a clipped agent variable and a straight-through estimator.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense arrays, im2col and the reference convolution every
//!   other path is checked against.
//! * [`masks`]: bit-packed mask sets, mask construction, the orthogonality
//!   regulariser and the agent-variable update.
//! * [`vconv`]: forward and backward passes for every filter variant.
//! * [`fastinfer`]: the cached-product inference kernel and its op counts.
//! * [`accounting`]: network-level parameter / multiplication accounting.
//! * [`train`]: models, losses, SGD with straight-through mask updates and
//!   checkpoints.
//! * [`data`]: IDX dataset ingestion.

pub mod accounting;
pub mod data;
pub mod error;
pub mod fastinfer;
pub mod masks;
pub mod tensor;
pub mod train;
pub mod vconv;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
