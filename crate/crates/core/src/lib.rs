//! Zero-shot classification in a shared image–text embedding space.
//!
//! The pipeline retrieves the class descriptions that best match the image
//! collection, turns them into text proxies, refines those into pseudo-labels
//! by entropic optimal transport, and finally learns multimodal proxies by
//! minimizing the KL divergence to those pseudo-labels.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fixtures;
pub mod io;
pub mod numerics;
pub mod ot;
pub mod pipeline;
pub mod proxy;
pub mod retrieval;

pub use error::{Error, ErrorKind, Result};
pub use numerics::Matrix;
