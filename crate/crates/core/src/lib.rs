//! Encoding models that transfer from slow to fast brain responses.
//!
//! A feature network is tuned with low-rank adapters to predict slow
//! (fMRI-like, 0.5 Hz) responses and then evaluated by how well its features
//! predict fast (ECoG high-gamma-like, 20 Hz) responses. The crate carries
//! every piece of numerics this needs: tensor I/O, resampling and spectral
//! estimation, delay embedding, cross-validated ridge regression, the
//! trainable network with exact gradients, a synthetic cross-modality data
//! generator, the evaluation statistics, and the end-to-end pipeline.

pub mod analysis;
pub mod embed;
pub mod error;
pub mod netft;
pub mod pipeline;
pub mod rng;
pub mod ridge;
pub mod series;
pub mod signal;
pub mod synthgen;
pub mod tensor_io;

pub use error::{Error, ErrorKind, Result, TensorError};
pub use series::TimeSeries;
