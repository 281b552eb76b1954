//! Bayesian hierarchical space-wavelength regression for curve-valued field
//! data.
//!
//! The model treats each spectrum as a functional response observed on a
//! shared wavelength grid at a georeferenced site, and decomposes it into
//! genus intercepts, spatially correlated site intercepts, a functional
//! regression on site covariates, smooth wavelength effects, a
//! space-wavelength interaction surface, and heteroscedastic noise:
//!
//! ```text
//! Y_k(t) = a_g + a_g(s) + x(s)' beta(t) + gamma_g(t) + eta(s, t) + eps_k(t)
//! ```
//!
//! Every curve-valued term is a kernel-convolution expansion over a knot
//! grid; `eta` carries latent spatial factor processes. Inference is a
//! blocked Gibbs sampler with Metropolis steps for kernel bandwidths and
//! spatial decays.
//!
//! Crate layout:
//!
//! - [`data`]: dataset model, CSV ingestion, the design index.
//! - [`config`]: model/prior/sampler configuration, JSON (de)serialization.
//! - [`kernels`]: kernel-convolution bases and the log-variance basis.
//! - [`spatial`]: distances, exponential correlation, Cholesky utilities,
//!   Gaussian-process conditioning, latent factor covariance.
//! - [`model`]: the fit context — mean surface, likelihood, initialization.
//! - [`state`]: the sampler state vector.
//! - [`synth`]: synthetic data generation and benchmark fixtures.
//! - [`mcmc`]: the sampler, posterior storage, checkpoints, fit summaries.
//! - [`predict`]: held-out prediction, scoring, cross-validation.
//! - [`ortho`]: confounding diagnostics and variance decomposition.

pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod mcmc;
pub mod model;
pub mod ortho;
pub mod predict;
pub mod spatial;
pub mod state;
pub mod stats;
pub mod synth;

pub use config::ModelConfig;
pub use data::{LoadOptions, SpectraDataset};
pub use error::{Error, Result};
pub use model::FitContext;
pub use state::ChainState;
