//! Variational dropout posterior for the noisy layer.
//!
//! Weights are sampled as `w = theta + sqrt(alpha) * theta * eps`. The
//! dropout variables are stored as `log alpha` and clamped to
//! [`LOG_ALPHA_MIN`, `LOG_ALPHA_MAX`]. Under the hierarchical prior the KL
//! term is `sum_k 0.5 * ln(1 + 1/alpha_k)`, independent of `theta`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, GradBundle, MlpSpec, ModelParams, Noise, NoiseSeed, Tensor, VdInput};

pub const LOG_ALPHA_MIN: f64 = -8.0;
pub const LOG_ALPHA_MAX: f64 = 8.0;

/// Per-weight `log alpha` for the noisy layer, always within the clamp range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutVector(Tensor);

impl DropoutVector {
    /// Clamps every entry into range. Non-finite input is an error.
    pub fn new(log_alpha: Tensor) -> Result<Self> {
        if !log_alpha.is_finite() {
            return Err(Error::NonFinite("log alpha".into()));
        }
        Ok(Self(log_alpha.map(clamp_log_alpha)))
    }

    pub fn constant(shape: &[usize], log_alpha: f64) -> Self {
        Self(Tensor::filled(shape, clamp_log_alpha(log_alpha)))
    }

    pub fn log_alpha(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `log_alpha - lr * grad`, clamped.
    pub fn step(&self, grad: &Tensor, lr: f64) -> Result<Self> {
        let next = self.0.zip_map(grad, |la, g| la - lr * g)?;
        Self::new(next)
    }
}

pub fn clamp_log_alpha(v: f64) -> f64 {
    v.clamp(LOG_ALPHA_MIN, LOG_ALPHA_MAX)
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sum_k 0.5 * ln(1 + exp(-log_alpha_k))`.
pub fn kl_term(dv: &DropoutVector) -> f64 {
    dv.0.data().iter().map(|&la| 0.5 * softplus(-la)).sum()
}

/// Derivative of [`kl_term`] with respect to each `log_alpha_k`:
/// `-0.5 * sigmoid(-log_alpha_k)`.
pub fn kl_gradient(dv: &DropoutVector) -> Tensor {
    dv.0.map(|la| -0.5 * sigmoid(-la))
}

/// Dropout rate `p = alpha / (1 + alpha)`.
pub fn dropout_rate(dv: &DropoutVector) -> Tensor {
    dv.0.map(sigmoid)
}

/// `true` keeps a weight: its dropout rate is at most `p_threshold`.
pub fn compression_mask(dv: &DropoutVector, p_threshold: f64) -> Result<Vec<bool>> {
    if !(p_threshold > 0.0 && p_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "dropout threshold must lie in (0, 1), got {p_threshold}"
        )));
    }
    Ok(dropout_rate(dv)
        .data()
        .iter()
        .map(|&p| p <= p_threshold)
        .collect())
}

/// How the KL term is scaled against the mean negative log-likelihood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlScaling {
    /// `beta * KL / |D|`.
    #[default]
    PerSample,
    /// `beta * KL`.
    Unscaled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ElboConfig {
    pub beta: f64,
    pub noise: Noise,
    /// Size of the client's full dataset, used by [`KlScaling::PerSample`].
    pub data_size: usize,
    pub kl_scaling: KlScaling,
}

impl ElboConfig {
    pub fn seeded(beta: f64, seed: u64, data_size: usize) -> Self {
        Self {
            beta,
            noise: Noise::Seeded(NoiseSeed(seed)),
            data_size,
            kl_scaling: KlScaling::PerSample,
        }
    }

    pub fn kl_weight(&self) -> f64 {
        match self.kl_scaling {
            KlScaling::PerSample => self.beta / self.data_size as f64,
            KlScaling::Unscaled => self.beta,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.data_size == 0 {
            return Err(Error::InvalidArgument("data size must be positive".into()));
        }
        Ok(())
    }
}

/// A labelled minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ElboGrads {
    pub loss: f64,
    pub theta: ModelParams,
    pub log_alpha: Tensor,
}

/// Negative ELBO on a batch: mean NLL through the noisy layer plus the
/// weighted KL term, with gradients for `theta` and `log alpha`.
pub fn elbo_loss_and_grads(
    spec: &MlpSpec,
    params: &ModelParams,
    dv: &DropoutVector,
    batch: &Batch,
    cfg: &ElboConfig,
) -> Result<ElboGrads> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    cfg.validate()?;
    let vd = VdInput {
        log_alpha: dv.log_alpha(),
        noise: cfg.noise.clone(),
    };
    let (logits, cache) = kernel::forward(spec, params, &batch.features, Some(vd))?;
    let (nll, cot) = kernel::softmax_cross_entropy(&logits, &batch.labels)?;
    let GradBundle {
        params: theta,
        log_alpha,
        ..
    } = kernel::backward(spec, params, &cache, &cot)?;
    let noise_path = log_alpha.expect("noisy layer was active");

    let w = cfg.kl_weight();
    let kl_grad = kl_gradient(dv);
    let log_alpha = noise_path.zip_map(&kl_grad, |g, k| g + w * k)?;
    Ok(ElboGrads {
        loss: nll + w * kl_term(dv),
        theta,
        log_alpha,
    })
}

/// Mean NLL and `theta` gradient of the deterministic network.
pub fn plain_loss_and_grads(spec: &MlpSpec, params: &ModelParams, batch: &Batch) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (logits, cache) = kernel::forward(spec, params, &batch.features, None)?;
    let (nll, cot) = kernel::softmax_cross_entropy(&logits, &batch.labels)?;
    let grads = kernel::backward(spec, params, &cache, &cot)?;
    Ok((nll, grads.params))
}
