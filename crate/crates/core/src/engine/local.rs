//! Client-side adaptation procedures.

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{sgd_step, MlpSpec, ModelParams, Tensor};
use crate::metavd::{elbo_loss_and_grads, plain_loss_and_grads, Batch, DropoutVector, ElboConfig};
use crate::rng::{derive_seed, rng_for, stream};

use super::{AlgoConfig, Method};

/// Everything a client needs besides the parameters it is sent.
#[derive(Clone, Copy, Debug)]
pub struct LocalContext<'a> {
    pub spec: &'a MlpSpec,
    pub cfg: &'a AlgoConfig,
    pub data: &'a Dataset,
    /// The client's training indices into `data`.
    pub indices: &'a [usize],
    pub client: usize,
    pub round: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalResult {
    pub theta: ModelParams,
    pub log_alpha: Option<DropoutVector>,
    /// Loss of the last gradient evaluation.
    pub loss: f64,
}

// Path suffixes for the validation and Hessian-probe draws of a MAML step.
const VAL_DRAW: u64 = u64::MAX;
const PROBE_DRAW: u64 = u64::MAX - 1;

fn sample_batch(indices: &[usize], batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    if batch_size >= indices.len() {
        return indices.to_vec();
    }
    index::sample(rng, indices.len(), batch_size)
        .into_iter()
        .map(|i| indices[i])
        .collect()
}

struct StepGrads {
    loss: f64,
    theta: ModelParams,
    log_alpha: Option<Tensor>,
}

impl<'a> LocalContext<'a> {
    fn check(&self) -> Result<()> {
        if self.indices.is_empty() {
            return Err(Error::InvalidArgument(format!("client {} has no training data", self.client)));
        }
        Ok(())
    }

    fn path(&self, tag: u64, rest: &[u64]) -> Vec<u64> {
        let mut p = vec![tag, self.round, self.client as u64];
        p.extend_from_slice(rest);
        p
    }

    fn batch(&self, pool: &[usize], tag: u64, rest: &[u64]) -> Result<Batch> {
        let mut rng = rng_for(self.seed, &self.path(tag, rest));
        let idx = sample_batch(pool, self.cfg.batch_size, &mut rng);
        self.data.batch(&idx)
    }

    fn noise_seed(&self, tag: u64, rest: &[u64]) -> u64 {
        derive_seed(self.seed, &self.path(tag, rest))
    }

    fn grads(&self, theta: &ModelParams, dv: Option<&DropoutVector>, batch: &Batch, noise_seed: u64) -> Result<StepGrads> {
        match dv {
            Some(dv) => {
                let mut cfg = ElboConfig::seeded(self.cfg.beta, noise_seed, self.indices.len());
                cfg.kl_scaling = self.cfg.kl_scaling;
                let g = elbo_loss_and_grads(self.spec, theta, dv, batch, &cfg)?;
                Ok(StepGrads {
                    loss: g.loss,
                    theta: g.theta,
                    log_alpha: Some(g.log_alpha),
                })
            }
            None => {
                let (loss, theta) = plain_loss_and_grads(self.spec, theta, batch)?;
                Ok(StepGrads {
                    loss,
                    theta,
                    log_alpha: None,
                })
            }
        }
    }
}

/// Scale factor bringing the joint gradient norm down to `max_norm`.
fn clip_scale(theta: &ModelParams, log_alpha: Option<&Tensor>, max_norm: Option<f64>) -> f64 {
    let Some(max_norm) = max_norm else { return 1.0 };
    let sq: f64 = theta
        .tensors()
        .chain(log_alpha)
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

fn apply(
    theta: &ModelParams,
    dv: Option<&DropoutVector>,
    g: &StepGrads,
    lr: f64,
    clip: Option<f64>,
) -> Result<(ModelParams, Option<DropoutVector>)> {
    let lr = lr * clip_scale(&g.theta, g.log_alpha.as_ref(), clip);
    let theta = sgd_step(theta, &g.theta, lr)?;
    if !theta.is_finite() {
        return Err(Error::NonFinite("local parameters".into()));
    }
    let dv = match (dv, &g.log_alpha) {
        (Some(dv), Some(ga)) => Some(dv.step(ga, lr)?),
        (dv, _) => dv.cloned(),
    };
    Ok((theta, dv))
}

fn descent(
    ctx: &LocalContext<'_>,
    mut theta: ModelParams,
    mut dv: Option<DropoutVector>,
    steps: usize,
    lr: f64,
    batch_tag: u64,
) -> Result<LocalResult> {
    ctx.check()?;
    let mut loss = f64::NAN;
    for step in 0..steps as u64 {
        let batch = ctx.batch(ctx.indices, batch_tag, &[step])?;
        let noise = ctx.noise_seed(stream::LOCAL_NOISE, &[batch_tag, step]);
        let g = ctx.grads(&theta, dv.as_ref(), &batch, noise)?;
        loss = g.loss;
        (theta, dv) = apply(&theta, dv.as_ref(), &g, lr, ctx.cfg.grad_clip)?;
    }
    Ok(LocalResult {
        theta,
        log_alpha: dv,
        loss,
    })
}

/// `E` joint descent steps on `(theta, log alpha)` over minibatches.
pub fn local_adapt_reptile(ctx: &LocalContext<'_>, theta: ModelParams, dv: Option<DropoutVector>) -> Result<LocalResult> {
    descent(ctx, theta, dv, ctx.cfg.local_steps, ctx.cfg.gamma, stream::LOCAL_BATCH)
}

fn split_halves(ctx: &LocalContext<'_>, step: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if ctx.indices.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "client {} has {} samples, too few for a train/validation split",
            ctx.client,
            ctx.indices.len()
        )));
    }
    let mut idx = ctx.indices.to_vec();
    idx.shuffle(&mut rng_for(ctx.seed, &ctx.path(stream::MAML_SPLIT, &[step])));
    let val = idx.split_off(idx.len() / 2);
    Ok((idx, val))
}

/// Runs the inner loop on the train half and returns the adapted `theta'`.
fn inner_loop(
    ctx: &LocalContext<'_>,
    theta: &ModelParams,
    dv: Option<&DropoutVector>,
    train: &[usize],
    step: u64,
) -> Result<ModelParams> {
    let mut adapted = theta.clone();
    for j in 0..ctx.cfg.inner_steps as u64 {
        let batch = ctx.batch(train, stream::LOCAL_BATCH, &[step, j])?;
        let g = ctx.grads(&adapted, dv, &batch, ctx.noise_seed(stream::LOCAL_NOISE, &[step, j]))?;
        let lr = ctx.cfg.inner_lr * clip_scale(&g.theta, None, ctx.cfg.grad_clip);
        adapted = sgd_step(&adapted, &g.theta, lr)?;
    }
    Ok(adapted)
}

/// First-order MAML: per local step, adapt a copy on the train half, then
/// move `(theta, log alpha)` along the validation gradient taken at the
/// adapted point.
pub fn local_adapt_maml(ctx: &LocalContext<'_>, theta: ModelParams, dv: Option<DropoutVector>) -> Result<LocalResult> {
    maml_like(ctx, theta, dv, false)
}

/// MAML with the Hessian-free (finite-difference) second-order correction
/// on `theta`; `log alpha` stays first order.
pub fn local_adapt_perfedavg(ctx: &LocalContext<'_>, theta: ModelParams, dv: Option<DropoutVector>) -> Result<LocalResult> {
    maml_like(ctx, theta, dv, true)
}

fn maml_like(
    ctx: &LocalContext<'_>,
    mut theta: ModelParams,
    mut dv: Option<DropoutVector>,
    hessian_free: bool,
) -> Result<LocalResult> {
    ctx.check()?;
    let mut loss = f64::NAN;
    for step in 0..ctx.cfg.local_steps as u64 {
        let (train, val) = split_halves(ctx, step)?;
        let adapted = inner_loop(ctx, &theta, dv.as_ref(), &train, step)?;
        let val_batch = ctx.batch(&val, stream::LOCAL_BATCH, &[step, VAL_DRAW])?;
        let mut g = ctx.grads(&adapted, dv.as_ref(), &val_batch, ctx.noise_seed(stream::LOCAL_NOISE, &[step, VAL_DRAW]))?;
        loss = g.loss;
        if hessian_free {
            let probe = ctx.batch(&train, stream::LOCAL_BATCH, &[step, PROBE_DRAW])?;
            let probe_noise = ctx.noise_seed(stream::LOCAL_NOISE, &[step, PROBE_DRAW]);
            g.theta = hessian_free_outer(&g.theta, &adapted, ctx.cfg.inner_lr, ctx.cfg.hf_delta, |p| {
                Ok(ctx.grads(p, dv.as_ref(), &probe, probe_noise)?.theta)
            })?;
        }
        (theta, dv) = apply(&theta, dv.as_ref(), &g, ctx.cfg.gamma, ctx.cfg.grad_clip)?;
    }
    Ok(LocalResult {
        theta,
        log_alpha: dv,
        loss,
    })
}

/// `g_val - l * H_tr g_val`, with the Hessian-vector product replaced by a
/// central difference of train gradients along `g_val`.
pub fn hessian_free_outer(
    g_val: &ModelParams,
    theta_prime: &ModelParams,
    inner_lr: f64,
    delta: f64,
    train_grad: impl Fn(&ModelParams) -> Result<ModelParams>,
) -> Result<ModelParams> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!("probe step must be > 0, got {delta}")));
    }
    let plus = train_grad(&theta_prime.add_scaled(g_val, delta)?)?;
    let minus = train_grad(&theta_prime.add_scaled(g_val, -delta)?)?;
    let diff = plus.add_scaled(&minus, -1.0)?;
    g_val.add_scaled(&diff, -inner_lr / (2.0 * delta))
}

pub fn local_adapt(ctx: &LocalContext<'_>, theta: ModelParams, dv: Option<DropoutVector>) -> Result<LocalResult> {
    match ctx.cfg.method {
        Method::FedAvg | Method::Reptile => local_adapt_reptile(ctx, theta, dv),
        Method::Maml => local_adapt_maml(ctx, theta, dv),
        Method::PerFedAvg => local_adapt_perfedavg(ctx, theta, dv),
    }
}

/// Few-step adaptation on a client's support data before evaluation.
pub fn personalize_for_eval(
    ctx: &LocalContext<'_>,
    theta: ModelParams,
    dv: Option<DropoutVector>,
    steps: usize,
    lr: f64,
) -> Result<LocalResult> {
    if steps == 0 {
        return Ok(LocalResult {
            theta,
            log_alpha: dv,
            loss: f64::NAN,
        });
    }
    descent(ctx, theta, dv, steps, lr, stream::PERSONALIZE)
}
