//! Projection-constrained fine-tuning.
//!
//! The crate provides a dense `f64` matrix type, a small MLP with analytic
//! gradients, row-wise MARS-ball projection, the trainable-projection
//! optimizer ([`ftp`]), comparison methods ([`baselines`]), a learning-rate
//! hyper-optimizer ([`hyper`]) and a Lipschitz robustness auditor
//! ([`audit`]).

pub mod audit;
pub mod baselines;
pub mod error;
pub mod ftp;
pub mod hyper;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod projection;
pub mod rng;

pub use error::{Error, Result};
pub use ftp::{ExcludeSet, Ftp, GammaState, ManagedParam};
pub use matrix::{mars_norm, row_l1_distances, DenseMatrix};
pub use model::{Activation, Batch, LossKind, MlpSpec, NamedParams, Targets};
pub use optim::{AdamW, BaseConfig, BaseKind, BaseOpt, BaseOptimizer, Sgd};
pub use rng::SeededRng;
