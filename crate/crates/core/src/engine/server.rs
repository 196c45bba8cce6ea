use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::hypernet::{HypernetState, INITIAL_LOG_ALPHA};
use crate::kernel::{MlpSpec, ModelParams, Tensor};
use crate::metavd::DropoutVector;
use crate::rng::{rng_for, stream};

use super::aggregate::{aggregate_fedavg, aggregate_metavd, data_weights};
use super::local::{local_adapt, LocalContext};
use super::{AlgoConfig, ClientRegistry, ClientUpdate, VdMode};

/// Where each client's dropout variables come from.
#[derive(Clone, Debug, PartialEq)]
pub enum VdState {
    Off,
    MetaVd(HypernetState),
    /// One vector shared by every client.
    Global(DropoutVector),
    /// An independent vector per client.
    Ensemble(Vec<DropoutVector>),
}

impl VdState {
    pub fn mode(&self) -> VdMode {
        match self {
            VdState::Off => VdMode::Off,
            VdState::MetaVd(_) => VdMode::MetaVd,
            VdState::Global(_) => VdMode::GlobalVd,
            VdState::Ensemble(_) => VdMode::EnsembleVd,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub spec: MlpSpec,
    pub theta: ModelParams,
    pub vd: VdState,
    pub round: u64,
    pub rng_seed: u64,
}

impl ServerState {
    pub fn init(spec: MlpSpec, mode: VdMode, num_clients: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let theta = ModelParams::init(&spec, &mut rng_for(seed, &[stream::INIT_MODEL]));
        let target = || -> Result<Vec<usize>> {
            let layer = spec
                .metavd_layer
                .ok_or_else(|| Error::InvalidSpec(format!("{mode:?} needs a dropout layer")))?;
            Ok(spec.layer_shape(layer).to_vec())
        };
        let vd = match mode {
            VdMode::Off => VdState::Off,
            VdMode::MetaVd => VdState::MetaVd(HypernetState::init(
                num_clients,
                &target()?,
                &mut rng_for(seed, &[stream::INIT_HYPER]),
            )?),
            VdMode::GlobalVd => VdState::Global(DropoutVector::constant(&target()?, INITIAL_LOG_ALPHA)),
            VdMode::EnsembleVd => {
                VdState::Ensemble(vec![DropoutVector::constant(&target()?, INITIAL_LOG_ALPHA); num_clients])
            }
        };
        Ok(Self {
            spec,
            theta,
            vd,
            round: 0,
            rng_seed: seed,
        })
    }

    /// Dropout variables sent to a participating client.
    pub fn dropout_for(&self, client: usize) -> Result<Option<DropoutVector>> {
        Ok(match &self.vd {
            VdState::Off => None,
            VdState::MetaVd(h) => Some(h.predict_log_alpha(client)?),
            VdState::Global(dv) => Some(dv.clone()),
            VdState::Ensemble(table) => Some(table.get(client).cloned().ok_or(Error::UnknownClient(client))?),
        })
    }

    /// Dropout variables for a client that never trained: the hypernetwork
    /// at the mean embedding of `trained`, or the mean of their stored
    /// vectors.
    pub fn dropout_for_unseen(&self, trained: &[usize]) -> Result<Option<DropoutVector>> {
        Ok(match &self.vd {
            VdState::Off => None,
            VdState::MetaVd(h) => {
                let e = if trained.is_empty() {
                    h.mean_embedding()
                } else {
                    h.mean_embedding_of(trained.iter().copied())
                };
                Some(h.predict_from_embedding(&e)?)
            }
            VdState::Global(dv) => Some(dv.clone()),
            VdState::Ensemble(table) => {
                let members: Vec<&DropoutVector> = if trained.is_empty() {
                    table.iter().collect()
                } else {
                    trained.iter().filter_map(|&c| table.get(c)).collect()
                };
                let first = members.first().ok_or(Error::InvalidArgument("empty dropout table".into()))?;
                let mut mean = vec![0.0; first.len()];
                for dv in &members {
                    for (m, v) in mean.iter_mut().zip(dv.log_alpha().data()) {
                        *m += v / members.len() as f64;
                    }
                }
                Some(DropoutVector::new(Tensor::new(
                    first.log_alpha().shape().to_vec(),
                    mean,
                )?)?)
            }
        })
    }
}

/// Uniform sample without replacement, ascending, keyed by `(seed, round)`.
pub fn sample_clients(pool: &[usize], count: usize, seed: u64, round: u64) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("training pool is empty".into()));
    }
    if count > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {count} clients from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = rng_for(seed, &[stream::CLIENT_SAMPLING, round]);
    let mut out: Vec<usize> = index::sample(&mut rng, pool.len(), count)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub clients: Vec<usize>,
    /// Data-weighted mean of the clients' final local losses.
    pub mean_loss: f64,
    /// Mean returned `log alpha`, when dropout variables exist.
    pub mean_log_alpha: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub rounds: Vec<RoundMetrics>,
    pub evals: Vec<EvalReport>,
}

/// One federated round: sample, adapt locally in parallel, aggregate and
/// update the server state.
pub fn server_round(state: &mut ServerState, cfg: &AlgoConfig, registry: &ClientRegistry<'_>) -> Result<RoundMetrics> {
    let started = Instant::now();
    if state.vd.mode() != cfg.metavd {
        return Err(Error::Config(format!(
            "server state holds {:?} dropout but the config asks for {:?}",
            state.vd.mode(),
            cfg.metavd
        )));
    }
    let pool = registry.plan.training_pool();
    let clients = sample_clients(&pool, cfg.clients_per_round, state.rng_seed, state.round)?;
    let round = state.round;

    let sent: Vec<Option<DropoutVector>> = clients
        .iter()
        .map(|&c| state.dropout_for(c))
        .collect::<Result<_>>()?;

    let spec = &state.spec;
    let theta = &state.theta;
    let seed = state.rng_seed;
    let results: Vec<(ClientUpdate, f64)> = clients
        .par_iter()
        .zip(sent.par_iter())
        .map(|(&client, dv)| {
            let wrap = |e: Error| Error::Client {
                client,
                round,
                source: Box::new(e),
            };
            let indices = registry.train_indices(client).map_err(wrap)?;
            let ctx = LocalContext {
                spec,
                cfg,
                data: registry.data,
                indices,
                client,
                round,
                seed,
            };
            let r = local_adapt(&ctx, theta.clone(), dv.clone()).map_err(wrap)?;
            Ok((
                ClientUpdate {
                    client_id: client,
                    theta_star: r.theta,
                    log_alpha_star: r.log_alpha,
                    data_size: indices.len(),
                },
                r.loss,
            ))
        })
        .collect::<Result<_>>()?;
    let (updates, losses): (Vec<ClientUpdate>, Vec<f64>) = results.into_iter().unzip();

    let aggregated = match cfg.metavd {
        VdMode::Off => aggregate_fedavg(&updates)?,
        _ => aggregate_metavd(&updates, &state.theta, &state.spec, cfg.aggregation_scale)?,
    };
    // (1 - eta) theta + eta agg: exact at eta = 0 and eta = 1.
    let mut next = state.theta.clone();
    for (t, a) in next.tensors_mut().zip(aggregated.tensors()) {
        for (v, &g) in t.data_mut().iter_mut().zip(a.data()) {
            *v = (1.0 - cfg.eta) * *v + cfg.eta * g;
        }
    }
    if !next.is_finite() {
        return Err(Error::NonFinite(format!("global parameters after round {round}")));
    }
    state.theta = next;

    let refs: Vec<&ClientUpdate> = updates.iter().collect();
    let g = data_weights(&refs)?;
    let deltas = || -> Result<Vec<(usize, Tensor, f64)>> {
        updates
            .iter()
            .zip(&sent)
            .zip(&g)
            .map(|((u, before), &gm)| {
                let after = u.log_alpha_star.as_ref().expect("dropout mode returns log alpha");
                let before = before.as_ref().expect("dropout mode sends log alpha");
                Ok((u.client_id, after.log_alpha().zip_map(before.log_alpha(), |a, b| a - b)?, gm))
            })
            .collect()
    };
    match &mut state.vd {
        VdState::Off => {}
        VdState::MetaVd(h) => {
            let contributions = deltas()?;
            h.update_psi(&contributions, cfg.hyper_lr())?;
            for (client, delta, _) in &contributions {
                h.update_embedding(*client, delta, cfg.embedding_lr())?;
            }
        }
        VdState::Global(dv) => {
            let mut mean = vec![0.0; dv.len()];
            for (u, &gm) in updates.iter().zip(&g) {
                let la = u.log_alpha_star.as_ref().expect("dropout mode returns log alpha");
                for (m, v) in mean.iter_mut().zip(la.log_alpha().data()) {
                    *m += gm * v;
                }
            }
            let blended: Vec<f64> = dv
                .log_alpha()
                .data()
                .iter()
                .zip(&mean)
                .map(|(&old, &avg)| (1.0 - cfg.eta) * old + cfg.eta * avg)
                .collect();
            *dv = DropoutVector::new(Tensor::new(dv.log_alpha().shape().to_vec(), blended)?)?;
        }
        VdState::Ensemble(table) => {
            for u in &updates {
                let la = u.log_alpha_star.clone().expect("dropout mode returns log alpha");
                *table.get_mut(u.client_id).ok_or(Error::UnknownClient(u.client_id))? = la;
            }
        }
    }
    state.round += 1;

    let mean_loss = losses.iter().zip(&g).map(|(l, w)| l * w).sum();
    let mean_log_alpha = updates
        .iter()
        .filter_map(|u| u.log_alpha_star.as_ref())
        .map(|d| d.log_alpha().data().iter().sum::<f64>() / d.len() as f64)
        .reduce(|a, b| a + b)
        .map(|s| s / updates.len() as f64);
    Ok(RoundMetrics {
        round,
        clients,
        mean_loss,
        mean_log_alpha,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}

/// Runs `cfg.rounds` rounds, evaluating after every `eval.eval_every`-th
/// round. `on_round` sees every round's metrics and, on evaluation rounds,
/// the report.
pub fn run_training(
    state: &mut ServerState,
    cfg: &AlgoConfig,
    registry: &ClientRegistry<'_>,
    eval: &EvalConfig,
    mut on_round: impl FnMut(&RoundMetrics, Option<&EvalReport>) -> Result<()>,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    let mut history = TrainingHistory::default();
    for _ in 0..cfg.rounds {
        let metrics = server_round(state, cfg, registry)?;
        let report = if eval.eval_every > 0 && state.round % eval.eval_every as u64 == 0 {
            Some(evaluate(state, registry, cfg, eval)?)
        } else {
            None
        };
        on_round(&metrics, report.as_ref())?;
        history.evals.extend(report);
        history.rounds.push(metrics);
    }
    Ok(history)
}
