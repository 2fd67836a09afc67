//! Node-edge co-disentangled variational auto-encoding for attributed
//! graphs: factor-controlled synthetic corpora, a three-encoder /
//! two-decoder model family with its objective variants, disentanglement
//! metrics, and latent-traversal reports.

pub mod adam;
pub mod gradcheck;
pub mod graphdata;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod param;
pub mod runconfig;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod traversal;

pub use tensor::{Scalar, Tensor};
