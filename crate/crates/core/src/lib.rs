//! YOLOv8-style single-stage detector with residual CBAM attention in the neck.
//!
//! The crate is self-contained: a small tensor library with reverse-mode
//! differentiation ([`tensor`]), the attention blocks ([`attention`]), the
//! detector itself ([`model`]), its training losses ([`loss`]), the data
//! pipeline ([`data`]), COCO-style evaluation ([`metrics`]), a finite-difference
//! gradient checker ([`gradcheck`]) and the training loop ([`train`]).

pub mod attention;
pub mod boxes;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod real;
pub mod tensor;
pub mod train;

pub use boxes::DetBox;
pub use error::{Error, Result};
pub use real::Real;
