//! Inverse autoregressive flows for variational inference.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`tape`], [`params`]: dense `f64` tensors and a
//!   define-by-run reverse-mode autodiff tape.
//! - [`made`]: masked autoregressive networks.
//! - [`flows`]: flow steps with exact log-determinants, IAF chains, planar and
//!   linear-IAF baselines, and the sequential autoregressive sampler.
//! - [`objectives`]: likelihoods, the ELBO, free bits, importance sampling.
//! - [`nn`], [`model`], [`train`]: weight-normalized VAEs and their training.
//! - [`data`], [`csv`], [`checkpoint`]: datasets and file formats.
//! - [`oracle`]: brute-force verifiers that share no code with the above.

pub mod checkpoint;
pub mod csv;
pub mod data;
pub mod error;
pub mod flows;
pub mod made;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use rng::Prng;
pub use tape::{Tape, UnaryKind, Var};
pub use tensor::Tensor;
