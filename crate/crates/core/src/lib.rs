//! Causally-aware Bayesian meta-learning.
//!
//! Task-specific priors are centred at `θ + W z_t`, where `z_t` is a causal
//! embedding of the task. Source tasks come with embeddings; the embedding of
//! a new target task is inferred from pairwise "which source is closer"
//! answers of a domain expert, chosen by BALD and fit with SVI.
//!
//! Modules, bottom-up:
//!
//! - [`taskgen`]: seeded synthetic SCM task families with controllable shift.
//! - [`embedding`]: embedding geometry, corruption, correlation embeddings.
//! - [`bayes`]: diagonal Gaussians, KL, the Bayesian logistic predictor, ELBO gradients.
//! - [`metalearn`]: meta-training, adaptation, and the baselines.
//! - [`expert`]: probit comparison model, BALD, SVI, the elicitation loop.
//! - [`eval`]: AUROC, log loss, negative transfer, and theory checks.
//! - [`experiments`]: configuration and the experiment runners.

pub mod bayes;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod expert;
pub mod json;
pub mod metalearn;
pub mod optim;
pub mod rng;
pub mod special;
pub mod taskgen;

pub use error::{Error, Result};
pub use taskgen::{TaskDataset, TaskEmbedding};
