//! Reward-conditioned generation with diffusion models on data supported on
//! an unknown low-dimensional linear subspace.
//!
//! The pipeline fits a ridge estimate of the reward from a small labeled set,
//! pseudo-labels a large unlabeled pool, trains a conditional score in the
//! encoder-decoder class `(V psi(Vᵀx, y, t) - x)/h(t)` by denoising score
//! matching, and generates conditioned samples with a discretized backward
//! SDE. Under a Gaussian latent law every learned object has a closed form
//! ([`oracle`]) that the tests use as ground truth.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod ridge;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod validation;
pub mod world;

pub use error::{Error, Result};
pub use metrics::MetricsReport;
pub use oracle::GaussianDesignOracle;
pub use ridge::{PseudoLabeledDataset, RidgeEstimate};
pub use sampler::SampleBatch;
pub use schedule::DiffusionSchedule;
pub use score::{EncoderDecoderScore, ScoreFunction, TrainConfig};
pub use world::{LabeledDataset, SubspaceWorld, UnlabeledDataset, WorldConfig};
