//! Dependency-aware autoregressive latent diffusion for imputing sparse
//! abundance matrices.
//!
//! The pipeline: ingest and normalize an abundance matrix
//! ([`data`]), infer a binary dependency structure among features
//! ([`depnet`]), derive blockwise attention masks over autoregressive token
//! splits ([`mask`]), embed samples with a pretrainable VAE ([`vae`]),
//! train a masked-attention denoiser under a cosine diffusion schedule
//! ([`diffusion`], [`dat`]) conditioned on observed data and encoded
//! metadata ([`meta`]), and score imputations against held-out entries
//! ([`eval`]).

pub mod data;
pub mod dat;
pub mod depnet;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod io;
pub mod mask;
pub mod meta;
pub mod nn;
pub mod vae;

pub use error::{Error, Result};
