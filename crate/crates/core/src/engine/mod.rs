//! Federated rounds: client sampling, local adaptation, posterior
//! aggregation and the server-side updates of `theta`, `psi` and the
//! client embeddings.

mod aggregate;
mod local;
mod server;

pub use aggregate::{aggregate_fedavg, aggregate_metavd, data_weights, precision_weights, product_mode_weights};
pub use local::{
    hessian_free_outer, local_adapt, local_adapt_maml, local_adapt_perfedavg, local_adapt_reptile, personalize_for_eval,
    LocalContext, LocalResult,
};
pub use server::{run_training, sample_clients, server_round, RoundMetrics, ServerState, TrainingHistory, VdState};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PartitionPlan};
use crate::error::{Error, Result};
use crate::kernel::ModelParams;
use crate::metavd::{DropoutVector, KlScaling};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(rename = "fedavg")]
    FedAvg,
    #[default]
    Reptile,
    Maml,
    #[serde(rename = "perfedavg")]
    PerFedAvg,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VdMode {
    Off,
    #[default]
    #[serde(rename = "metavd")]
    MetaVd,
    GlobalVd,
    EnsembleVd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationScale {
    #[default]
    Normalized,
    /// Extra `1/M` on the dropout layer, as the aggregation formula is printed.
    #[serde(rename = "paper_1_over_m")]
    OneOverM,
}

/// Hyperparameters of the federated loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgoConfig {
    pub method: Method,
    pub metavd: VdMode,
    pub rounds: usize,
    /// Local steps `E`.
    pub local_steps: usize,
    /// Inner steps `I` (MAML / PerFedAvg).
    pub inner_steps: usize,
    /// Server learning rate.
    pub eta: f64,
    /// Step size of the hypernetwork update; unset uses `eta`.
    pub hyper_lr: Option<f64>,
    /// Step size of the client-embedding update; unset uses `hyper_lr`.
    pub embedding_lr: Option<f64>,
    /// Client learning rate.
    pub gamma: f64,
    /// Inner learning rate `l`.
    pub inner_lr: f64,
    /// KL weight.
    pub beta: f64,
    pub kl_scaling: KlScaling,
    /// Probe step of the Hessian-free correction.
    pub hf_delta: f64,
    pub clients_per_round: usize,
    pub batch_size: usize,
    /// Rescale each client step so that the joint gradient norm over
    /// `theta` and `log alpha` is at most this. Off when unset.
    pub grad_clip: Option<f64>,
    pub aggregation_scale: AggregationScale,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            method: Method::Reptile,
            metavd: VdMode::MetaVd,
            rounds: 1000,
            local_steps: 5,
            inner_steps: 1,
            eta: 1.0,
            hyper_lr: None,
            embedding_lr: None,
            gamma: 0.02,
            inner_lr: 0.05,
            beta: 5.0,
            kl_scaling: KlScaling::PerSample,
            hf_delta: 1e-3,
            clients_per_round: 10,
            batch_size: 64,
            grad_clip: None,
            aggregation_scale: AggregationScale::Normalized,
        }
    }
}

impl AlgoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.local_steps == 0 {
            return bad("local_steps must be >= 1".into());
        }
        if matches!(self.method, Method::Maml | Method::PerFedAvg) && self.inner_steps == 0 {
            return bad("inner_steps must be >= 1 for maml and perfedavg".into());
        }
        for (name, v) in [
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("inner_lr", self.inner_lr),
            ("hyper_lr", self.hyper_lr()),
            ("embedding_lr", self.embedding_lr()),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative rate, got {v}"));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.method == Method::PerFedAvg && !(self.hf_delta > 0.0 && self.hf_delta.is_finite()) {
            return bad(format!("hf_delta must be > 0, got {}", self.hf_delta));
        }
        if self.clients_per_round == 0 {
            return bad("clients_per_round must be >= 1".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        Ok(())
    }

    pub fn hyper_lr(&self) -> f64 {
        self.hyper_lr.unwrap_or(self.eta)
    }

    pub fn embedding_lr(&self) -> f64 {
        self.embedding_lr.unwrap_or_else(|| self.hyper_lr())
    }
}

/// What a client sends back after local adaptation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub theta_star: ModelParams,
    pub log_alpha_star: Option<DropoutVector>,
    pub data_size: usize,
}

/// In-process access to every client's data.
#[derive(Clone, Copy, Debug)]
pub struct ClientRegistry<'a> {
    pub data: &'a Dataset,
    pub plan: &'a PartitionPlan,
}

impl<'a> ClientRegistry<'a> {
    pub fn new(data: &'a Dataset, plan: &'a PartitionPlan) -> Self {
        Self { data, plan }
    }

    pub fn train_indices(&self, client: usize) -> Result<&'a [usize]> {
        self.plan
            .train
            .get(client)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownClient(client))
    }

    pub fn test_indices(&self, client: usize) -> Result<&'a [usize]> {
        self.plan
            .test
            .get(client)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownClient(client))
    }
}
