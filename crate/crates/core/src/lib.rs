//! Pruning-at-initialization laboratory.
//!
//! A masked MLP engine with exact gradients and Hessian-vector products,
//! baseline saliency criteria, iterative rewind pruning that labels every
//! parameter with the fraction of rounds it survives, and a learned scorer
//! that predicts those labels from initial weights and gradients.

pub mod config;
pub mod criteria;
pub mod data;
pub mod error;
pub mod experiment;
pub mod irp;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod scorer;
pub mod seeds;
pub mod store;

pub use error::{Error, ErrorClass, Result};
