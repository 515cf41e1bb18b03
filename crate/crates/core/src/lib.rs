//! Structure Consolidation Latent Variable Model (SCLVM).
//!
//! A Gaussian-process latent variable model whose latent space is split into a
//! block shared by every category and a block that is private to each
//! category. The private kernel is gated on label equality, so points of
//! different categories never share private covariance. Training maximizes a
//! collapsed sparse variational lower bound computed in closed form from the
//! kernel expectations (psi statistics) under a diagonal Gaussian posterior.
//!
//! Module map:
//!
//! * [`kernels`]: shared, private and composite exponentiated-quadratic kernels.
//! * [`psi`]: closed-form psi statistics plus a Monte-Carlo estimator.
//! * [`bound`]: the evidence lower bound, KL term and analytic gradients.
//! * [`trainer`]: initialization, fitting, test-time inference, classification
//!   and sampling.
//! * [`dataio`]: CSV/binary ingestion, standardization, splits and synthetic data.
//! * [`persist`]: the `SCLVM1` model container.
//! * [`metrics`]: precision/recall/F1 and two-sample tests.

pub mod bound;
pub mod dataio;
pub mod error;
pub mod kernels;
mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod persist;
pub mod psi;
pub mod trainer;

pub use bound::{elbo, elbo_gradient, f_tilde, kl_to_prior, BoundReport, ElboGradient};
pub use dataio::{Dataset, Standardization};
pub use error::{Result, SclvmError};
pub use kernels::{CategoryLabel, EqKernelParams, JitterPolicy, KernelParams, LatentPoint};
pub use model::{FittedModel, LatentConfig, ModelState};
pub use psi::{InducingSet, PsiStats, VariationalPosterior};
pub use trainer::{
    classify, fit, generate, infer_test_latent, initialize, ClassScore, FitOptions, FitOutcome, InferOptions,
    OptimizerKind, Predictor, Termination, TestInference,
};
