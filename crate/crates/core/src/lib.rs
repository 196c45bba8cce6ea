//! Personalized federated learning with hypernetwork-predicted variational
//! dropout.
//!
//! A shared network `theta` is modulated per client by Gaussian weight
//! noise on one hidden layer. The noise variances come from a server-side
//! hypernetwork fed with a learned client embedding. Clients adapt
//! `(theta, log alpha)` on a variational objective, and the server merges
//! their posteriors by precision weighting.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod hypernet;
pub mod kernel;
pub mod metavd;
pub mod rng;

pub use data::{Dataset, PartitionPlan};
pub use engine::{AlgoConfig, ClientRegistry, ClientUpdate, Method, ServerState, VdMode};
pub use error::{Error, Result};
pub use eval::{EvalConfig, EvalReport};
pub use hypernet::HypernetState;
pub use kernel::{GradBundle, MlpSpec, ModelParams, Tensor};
pub use metavd::{DropoutVector, ElboConfig};
