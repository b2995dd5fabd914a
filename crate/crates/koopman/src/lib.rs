//! Reduced-order surrogate modeling of dissipative PDEs with stochastic
//! latent dynamics.
//!
//! The pipeline: reference solvers generate snapshot corpora
//! ([`solvers`], [`corpus`]); a convolutional encoder compresses each
//! snapshot to a diagonal Gaussian latent state that a learned operator
//! pair advances in time ([`latent`], [`networks`]); training couples
//! reconstruction, prediction, distribution-matching, smoothness, and
//! optional adversarial objectives ([`losses`], [`trainer`]); trained
//! models are rolled out far beyond the training horizon and compared
//! against held-out reference trajectories ([`evaluate`]). The `koopman`
//! binary wires these stages into a CLI ([`cli`]).

pub mod cli;
pub mod corpus;
pub mod error;
pub mod evaluate;
pub mod latent;
pub mod losses;
pub mod networks;
pub mod solvers;
pub mod trainer;

pub use error::{KoopmanError, Result};
