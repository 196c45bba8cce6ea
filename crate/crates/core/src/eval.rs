//! Accuracy, calibration and sparsity metrics, and the evaluation pass
//! over participating and held-out clients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{personalize_for_eval, AlgoConfig, ClientRegistry, LocalContext, Method, ServerState};
use crate::error::{Error, Result};
use crate::kernel::{self, ModelParams, Noise, NoiseSeed, VdInput};
use crate::metavd::{compression_mask, DropoutVector};
use crate::rng::{derive_seed, stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// Max softmax probability.
    pub confidence: f64,
    pub predicted: usize,
    pub actual: usize,
    pub client_id: usize,
}

impl PredictionRecord {
    pub fn correct(&self) -> bool {
        self.predicted == self.actual
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    /// Zero for empty bins.
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// `100 * sum correct / sum total`.
pub fn weighted_accuracy(per_client: &[(usize, usize)]) -> Result<f64> {
    let (correct, total) = per_client
        .iter()
        .fold((0usize, 0usize), |(c, t), &(ci, ti)| (c + ci, t + ti));
    if total == 0 {
        return Err(Error::InvalidArgument("accuracy over zero samples".into()));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Equal-width confidence bins over `[0, 1]`.
pub fn reliability_bins(records: &[PredictionRecord], num_bins: usize) -> Result<Vec<ReliabilityBin>> {
    if num_bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let mut conf = vec![0.0; num_bins];
    let mut hits = vec![0usize; num_bins];
    let mut count = vec![0usize; num_bins];
    for r in records {
        let b = ((r.confidence * num_bins as f64).floor() as usize).min(num_bins - 1);
        conf[b] += r.confidence;
        hits[b] += r.correct() as usize;
        count[b] += 1;
    }
    Ok((0..num_bins)
        .map(|b| {
            let n = count[b];
            ReliabilityBin {
                lower: b as f64 / num_bins as f64,
                upper: (b + 1) as f64 / num_bins as f64,
                mean_confidence: if n > 0 { conf[b] / n as f64 } else { 0.0 },
                accuracy: if n > 0 { hits[b] as f64 / n as f64 } else { 0.0 },
                count: n,
            }
        })
        .collect())
}

fn nonempty(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("calibration over zero records".into()));
    }
    Ok(())
}

/// Expected calibration error, in percent.
pub fn ece(records: &[PredictionRecord], num_bins: usize) -> Result<f64> {
    nonempty(records)?;
    let n = records.len() as f64;
    Ok(100.0
        * reliability_bins(records, num_bins)?
            .iter()
            .map(|b| b.count as f64 / n * (b.accuracy - b.mean_confidence).abs())
            .sum::<f64>())
}

/// Maximum calibration error over non-empty bins, in percent.
pub fn mce(records: &[PredictionRecord], num_bins: usize) -> Result<f64> {
    nonempty(records)?;
    Ok(100.0
        * reliability_bins(records, num_bins)?
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.accuracy - b.mean_confidence).abs())
            .fold(0.0, f64::max))
}

/// Percentage of dropped (`false`) entries.
pub fn sparsity(mask: &[bool]) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    100.0 * mask.iter().filter(|&&keep| !keep).count() as f64 / mask.len() as f64
}

/// Zeroes the dropout-layer weights dropped by `mask`.
pub fn apply_mask(theta: &mut ModelParams, layer: usize, mask: &[bool]) -> Result<()> {
    let w = theta.layers[layer].weight.data_mut();
    if w.len() != mask.len() {
        return Err(Error::shape("compression mask", &[w.len()], &[mask.len()]));
    }
    for (v, &keep) in w.iter_mut().zip(mask) {
        if !keep {
            *v = 0.0;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bins: usize,
    /// Noise samples averaged at test time; 0 evaluates the mean weights.
    pub mc_samples: usize,
    /// Evaluate after every this many rounds; 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Adaptation steps on the support split before testing. Unset means
    /// 0 for FedAvg and 1 for the meta-learning methods.
    pub personalize_steps: Option<usize>,
    /// Rate of the personalization steps; unset uses the client rate.
    pub personalize_lr: Option<f64>,
    /// Dropout-rate threshold used for the reported sparsity.
    pub sparsity_threshold: f64,
    /// When set, evaluate the compressed model at this threshold.
    pub compress_threshold: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            mc_samples: 0,
            eval_every: 10,
            personalize_steps: None,
            personalize_lr: None,
            sparsity_threshold: 0.8,
            compress_threshold: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::Config("eval.bins must be >= 1".into()));
        }
        for t in std::iter::once(self.sparsity_threshold).chain(self.compress_threshold) {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("dropout thresholds must lie in (0, 1), got {t}")));
            }
        }
        if let Some(lr) = self.personalize_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("eval.personalize_lr must be >= 0, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn steps_for(&self, method: Method) -> usize {
        self.personalize_steps.unwrap_or(match method {
            Method::FedAvg => 0,
            _ => 1,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub round: u64,
    pub test_acc: f64,
    pub ood_acc: Option<f64>,
    /// `ood_acc - test_acc`.
    pub gap: Option<f64>,
    pub ece: f64,
    pub mce: f64,
    pub ood_ece: Option<f64>,
    pub ood_mce: Option<f64>,
    pub reliability: Vec<ReliabilityBin>,
    pub ood_reliability: Option<Vec<ReliabilityBin>>,
    pub sparsity: f64,
    pub mc_samples: usize,
    pub compress_threshold: Option<f64>,
    pub test_records: usize,
    pub ood_records: usize,
}

/// Dropout vector used for compression: the one an unseen client would get.
pub fn compression_dropout(state: &ServerState, registry: &ClientRegistry<'_>) -> Result<Option<DropoutVector>> {
    state.dropout_for_unseen(&registry.plan.training_pool())
}

fn predict(
    state: &ServerState,
    theta: &ModelParams,
    dv: Option<&DropoutVector>,
    registry: &ClientRegistry<'_>,
    client: usize,
    indices: &[usize],
    mc_samples: usize,
) -> Result<Vec<PredictionRecord>> {
    let batch = registry.data.batch(indices)?;
    let probs: Vec<Vec<f64>> = match (dv, mc_samples) {
        (Some(dv), s) if s > 0 => {
            let mut acc = vec![vec![0.0; state.spec.num_classes()]; indices.len()];
            for sample in 0..s as u64 {
                let seed = derive_seed(state.rng_seed, &[stream::EVAL_NOISE, state.round, client as u64, sample]);
                let vd = VdInput {
                    log_alpha: dv.log_alpha(),
                    noise: Noise::Seeded(NoiseSeed(seed)),
                };
                let (logits, _) = kernel::forward(&state.spec, theta, &batch.features, Some(vd))?;
                for (a, i) in acc.iter_mut().zip(0..) {
                    for (x, p) in a.iter_mut().zip(kernel::softmax(logits.row(i))) {
                        *x += p / s as f64;
                    }
                }
            }
            acc
        }
        _ => {
            let (logits, _) = kernel::forward(&state.spec, theta, &batch.features, None)?;
            (0..indices.len()).map(|i| kernel::softmax(logits.row(i))).collect()
        }
    };
    Ok(probs
        .iter()
        .zip(&batch.labels)
        .map(|(p, &actual)| {
            let (predicted, &confidence) = p
                .iter()
                .enumerate()
                .fold((0, &p[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
            PredictionRecord {
                confidence,
                predicted,
                actual,
                client_id: client,
            }
        })
        .collect())
}

/// Personalizes every client on its support split and scores its test
/// split. Participating clients make up "test", held-out clients "ood".
pub fn evaluate(
    state: &ServerState,
    registry: &ClientRegistry<'_>,
    algo: &AlgoConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let shared_dv = compression_dropout(state, registry)?;
    let mask = match (cfg.compress_threshold, &shared_dv, state.spec.metavd_layer) {
        (Some(t), Some(dv), Some(layer)) => Some((layer, compression_mask(dv, t)?)),
        (Some(_), _, _) => {
            return Err(Error::Config("compression needs dropout variables".into()));
        }
        _ => None,
    };
    let steps = cfg.steps_for(algo.method);
    let lr = cfg.personalize_lr.unwrap_or(algo.gamma);

    let clients: Vec<usize> = (0..registry.plan.num_clients).collect();
    let per_client: Vec<Vec<PredictionRecord>> = clients
        .par_iter()
        .map(|&client| {
            let test = registry.test_indices(client)?;
            if test.is_empty() {
                return Ok(Vec::new());
            }
            let dv = if registry.plan.is_ood(client) {
                shared_dv.clone()
            } else {
                state.dropout_for(client)?
            };
            let support = registry.train_indices(client)?;
            let (mut theta, dv) = if support.is_empty() {
                (state.theta.clone(), dv)
            } else {
                let ctx = LocalContext {
                    spec: &state.spec,
                    cfg: algo,
                    data: registry.data,
                    indices: support,
                    client,
                    round: state.round,
                    seed: state.rng_seed,
                };
                let r = personalize_for_eval(&ctx, state.theta.clone(), dv, steps, lr)?;
                (r.theta, r.log_alpha)
            };
            if let Some((layer, m)) = &mask {
                apply_mask(&mut theta, *layer, m)?;
            }
            predict(state, &theta, dv.as_ref(), registry, client, test, cfg.mc_samples)
        })
        .collect::<Result<_>>()?;

    let (mut test, mut ood) = (Vec::new(), Vec::new());
    for (client, records) in per_client.into_iter().enumerate() {
        if registry.plan.is_ood(client) {
            ood.extend(records);
        } else {
            test.extend(records);
        }
    }
    let accuracy = |r: &[PredictionRecord]| weighted_accuracy(&[(r.iter().filter(|p| p.correct()).count(), r.len())]);
    let test_acc = accuracy(&test)?;
    let ood_acc = if ood.is_empty() { None } else { Some(accuracy(&ood)?) };
    let sparsity = match (&shared_dv, state.spec.metavd_layer) {
        (Some(dv), Some(_)) => sparsity(&compression_mask(dv, cfg.sparsity_threshold)?),
        _ => 0.0,
    };
    Ok(EvalReport {
        round: state.round,
        test_acc,
        ood_acc,
        gap: ood_acc.map(|o| o - test_acc),
        ece: ece(&test, cfg.bins)?,
        mce: mce(&test, cfg.bins)?,
        ood_ece: if ood.is_empty() { None } else { Some(ece(&ood, cfg.bins)?) },
        ood_mce: if ood.is_empty() { None } else { Some(mce(&ood, cfg.bins)?) },
        reliability: reliability_bins(&test, cfg.bins)?,
        ood_reliability: if ood.is_empty() {
            None
        } else {
            Some(reliability_bins(&ood, cfg.bins)?)
        },
        sparsity,
        mc_samples: cfg.mc_samples,
        compress_threshold: cfg.compress_threshold,
        test_records: test.len(),
        ood_records: ood.len(),
    })
}

/// CSV reliability table: `lower,upper,mean_confidence,accuracy,count`.
pub fn reliability_csv(bins: &[ReliabilityBin]) -> String {
    let mut out = String::from("lower,upper,mean_confidence,accuracy,count\n");
    for b in bins {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            b.lower, b.upper, b.mean_confidence, b.accuracy, b.count
        ));
    }
    out
}
