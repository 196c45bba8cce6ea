//! End-to-end runs: data, partition, training, evaluation and compression,
//! with their on-disk artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{client_train_test_split, dirichlet_partition, gen_synthetic, holdout_ood, load_idx, Dataset, PartitionPlan};
use crate::engine::{run_training, ClientRegistry, ServerState, TrainingHistory, VdState};
use crate::error::{Error, Result};
use crate::eval::{apply_mask, evaluate, reliability_csv, EvalConfig, EvalReport};
use crate::metavd::compression_mask;
use crate::rng::{rng_for, stream};

pub const PLAN_FILE: &str = "plan.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.mvd";
pub const REPORT_FILE: &str = "report.json";
pub const RELIABILITY_FILE: &str = "reliability.csv";
pub const OOD_RELIABILITY_FILE: &str = "reliability_ood.csv";

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match (&cfg.data.synthetic, &cfg.data.idx) {
        (Some(s), _) => gen_synthetic(s, &mut rng_for(cfg.seed, &[stream::DATA])),
        (None, Some(p)) => load_idx(&p.images, &p.labels),
        (None, None) => Err(Error::Config("no data source configured".into())),
    }
}

/// Dirichlet allocation, OOD holdout, then the per-client split.
pub fn make_plan(cfg: &RunConfig, data: &Dataset) -> Result<PartitionPlan> {
    let p = &cfg.partition;
    let plan = dirichlet_partition(data, p.num_clients, p.alpha_dot, &mut rng_for(cfg.seed, &[stream::PARTITION]))?;
    let plan = holdout_ood(&plan, p.num_ood, &mut rng_for(cfg.seed, &[stream::OOD]))?;
    client_train_test_split(&plan, data, p.train_fraction, &mut rng_for(cfg.seed, &[stream::SPLIT]))
}

pub fn init_state(cfg: &RunConfig, data: &Dataset, plan: &PartitionPlan) -> Result<ServerState> {
    let spec = cfg.mlp_spec(data.dim(), data.num_classes)?;
    ServerState::init(spec, cfg.algo.metavd, plan.num_clients, cfg.seed)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

pub fn read_plan(path: &Path) -> Result<PartitionPlan> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        kind: "plan",
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// `client,ood,train,test,class_0,...` per client.
pub fn histogram_csv(plan: &PartitionPlan, data: &Dataset) -> String {
    let mut out = String::from("client,ood,train,test");
    for c in 0..data.num_classes {
        out.push_str(&format!(",class_{c}"));
    }
    out.push('\n');
    for (client, h) in plan.histogram(data).iter().enumerate() {
        out.push_str(&format!(
            "{client},{},{},{}",
            plan.is_ood(client),
            plan.train[client].len(),
            plan.test[client].len()
        ));
        for n in h {
            out.push_str(&format!(",{n}"));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub num_clients: usize,
    pub num_samples: usize,
    pub ood_clients: Vec<usize>,
    pub mean_classes_per_client: f64,
    pub plan_path: PathBuf,
    pub histogram_path: PathBuf,
}

pub fn run_partition(cfg: &RunConfig, out_dir: &Path) -> Result<PartitionSummary> {
    create_dir(out_dir)?;
    let data = load_data(cfg)?;
    let plan = make_plan(cfg, &data)?;
    let plan_path = out_dir.join(PLAN_FILE);
    let histogram_path = out_dir.join(HISTOGRAM_FILE);
    write_json(&plan_path, &plan)?;
    write_file(&histogram_path, histogram_csv(&plan, &data))?;
    let classes = plan.classes_per_client(&data);
    Ok(PartitionSummary {
        num_clients: plan.num_clients,
        num_samples: data.len(),
        ood_clients: plan.ood_clients.iter().copied().collect(),
        mean_classes_per_client: classes.iter().sum::<usize>() as f64 / classes.len() as f64,
        plan_path,
        histogram_path,
    })
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u64,
    pub test_acc: f64,
    pub ood_acc: Option<f64>,
    pub gap: Option<f64>,
    pub ece: f64,
    pub mce: f64,
    pub ood_ece: Option<f64>,
    pub ood_mce: Option<f64>,
    pub sparsity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

impl MetricsRecord {
    pub fn from_report(r: &EvalReport, wall_ms: Option<u64>) -> Self {
        Self {
            round: r.round,
            test_acc: r.test_acc,
            ood_acc: r.ood_acc,
            gap: r.gap,
            ece: r.ece,
            mce: r.mce,
            ood_ece: r.ood_ece,
            ood_mce: r.ood_mce,
            sparsity: r.sparsity,
            wall_ms,
        }
    }
}

fn jsonl_line(w: &mut impl Write, value: &impl Serialize, path: &Path) -> Result<()> {
    let line = serde_json::to_string(value)?;
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: ServerState,
    pub history: TrainingHistory,
    pub final_report: EvalReport,
    pub plan: PartitionPlan,
}

/// Trains from scratch, writing the plan, the metrics and per-round logs
/// (truncated first), the final checkpoint, report and reliability tables.
pub fn run_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutput> {
    create_dir(out_dir)?;
    let data = load_data(cfg)?;
    let plan = make_plan(cfg, &data)?;
    write_json(&out_dir.join(PLAN_FILE), &plan)?;
    let mut state = init_state(cfg, &data, &plan)?;
    let registry = ClientRegistry::new(&data, &plan);

    let metrics_path = out_dir.join(METRICS_FILE);
    let rounds_path = out_dir.join(ROUNDS_FILE);
    let mut metrics = create(&metrics_path)?;
    let mut rounds = create(&rounds_path)?;
    let history = run_training(&mut state, &cfg.algo, &registry, &cfg.eval, |m, report| {
        jsonl_line(&mut rounds, m, &rounds_path)?;
        if let Some(report) = report {
            let wall = cfg.log.wall_ms_in_metrics.then_some(m.wall_ms);
            jsonl_line(&mut metrics, &MetricsRecord::from_report(report, wall), &metrics_path)?;
            metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
        }
        Ok(())
    })?;
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    rounds.flush().map_err(|e| Error::io(&rounds_path, e))?;

    checkpoint::save(&out_dir.join(CHECKPOINT_FILE), &state)?;
    let final_report = evaluate(&state, &registry, &cfg.algo, &cfg.eval)?;
    write_report(out_dir, &final_report)?;
    Ok(TrainOutput {
        state,
        history,
        final_report,
        plan,
    })
}

fn write_report(out_dir: &Path, report: &EvalReport) -> Result<()> {
    write_json(&out_dir.join(REPORT_FILE), report)?;
    write_file(&out_dir.join(RELIABILITY_FILE), reliability_csv(&report.reliability))?;
    if let Some(ood) = &report.ood_reliability {
        write_file(&out_dir.join(OOD_RELIABILITY_FILE), reliability_csv(ood))?;
    }
    Ok(())
}

fn check_plan_matches(state: &ServerState, plan: &PartitionPlan, data: &Dataset) -> Result<()> {
    plan.validate(data)?;
    let registered = match &state.vd {
        VdState::MetaVd(h) => Some(h.num_clients()),
        VdState::Ensemble(t) => Some(t.len()),
        _ => None,
    };
    if registered.is_some_and(|n| n != plan.num_clients) {
        return Err(Error::InvalidArgument(format!(
            "checkpoint knows {} clients but the plan has {}",
            registered.unwrap_or(0),
            plan.num_clients
        )));
    }
    if state.spec.input_dim() != data.dim() || state.spec.num_classes() != data.num_classes {
        return Err(Error::InvalidArgument("checkpoint model does not fit the configured data".into()));
    }
    Ok(())
}

/// Re-evaluates a checkpoint. `eval` usually comes from the run's config,
/// possibly with flags such as the number of noise samples changed.
pub fn run_evaluate(cfg: &RunConfig, eval: &EvalConfig, checkpoint_path: &Path, plan_path: &Path) -> Result<EvalReport> {
    let state = checkpoint::load(checkpoint_path)?;
    let data = load_data(cfg)?;
    let plan = read_plan(plan_path)?;
    check_plan_matches(&state, &plan, &data)?;
    evaluate(&state, &ClientRegistry::new(&data, &plan), &cfg.algo, eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressReport {
    pub threshold: f64,
    pub layer: usize,
    pub total: usize,
    /// Weights whose dropout rate exceeds the threshold.
    pub dropped: usize,
    /// Zero weights in the layer after compression.
    pub zeros: usize,
    /// `100 * zeros / total`.
    pub sparsity: f64,
}

/// Zeroes the dropout layer's weights whose rate, predicted for an unseen
/// client, exceeds `threshold`.
pub fn compress_state(state: &mut ServerState, plan: &PartitionPlan, threshold: f64) -> Result<CompressReport> {
    let layer = state
        .spec
        .metavd_layer
        .ok_or_else(|| Error::InvalidArgument("checkpoint has no dropout layer to compress".into()))?;
    let dv = state
        .dropout_for_unseen(&plan.training_pool())?
        .ok_or_else(|| Error::InvalidArgument("checkpoint carries no dropout variables".into()))?;
    let mask = compression_mask(&dv, threshold)?;
    apply_mask(&mut state.theta, layer, &mask)?;
    let w = state.theta.layers[layer].weight.data();
    let zeros = w.iter().filter(|&&v| v == 0.0).count();
    Ok(CompressReport {
        threshold,
        layer,
        total: w.len(),
        dropped: mask.iter().filter(|&&k| !k).count(),
        zeros,
        sparsity: 100.0 * zeros as f64 / w.len() as f64,
    })
}

pub fn run_compress(checkpoint_path: &Path, plan_path: &Path, threshold: f64, out: &Path) -> Result<CompressReport> {
    let mut state = checkpoint::load(checkpoint_path)?;
    let plan = read_plan(plan_path)?;
    let report = compress_state(&mut state, &plan, threshold)?;
    checkpoint::save(out, &state)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &[&str]) -> RunConfig {
        let base = r#"
seed = 7
[model]
hidden = [8]
[algo]
rounds = 2
clients_per_round = 3
local_steps = 2
batch_size = 16
[partition]
num_clients = 6
num_ood = 1
alpha_dot = 0.5
[eval]
eval_every = 1
[data.synthetic]
num_classes = 3
dim = 4
clusters_per_class = 1
noise = 0.3
n = 240
"#;
        RunConfig::from_toml_str(base, &extra.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn train_writes_artifacts_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(&[]);
        let out = run_train(&c, dir.path()).unwrap();
        let log = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(log.lines().count(), 2);
        for line in log.lines() {
            let r: MetricsRecord = serde_json::from_str(line).unwrap();
            assert_eq!(r.gap, r.ood_acc.map(|o| o - r.test_acc));
            assert!(r.wall_ms.is_none());
        }
        let again = run_evaluate(&c, &c.eval, &dir.path().join(CHECKPOINT_FILE), &dir.path().join(PLAN_FILE)).unwrap();
        assert_eq!(again, out.final_report);
    }

    #[test]
    fn compression_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(&[]);
        run_train(&c, dir.path()).unwrap();
        let ckpt = dir.path().join(CHECKPOINT_FILE);
        let plan = dir.path().join(PLAN_FILE);
        let once = dir.path().join("once.mvd");
        let twice = dir.path().join("twice.mvd");
        let a = run_compress(&ckpt, &plan, 0.999, &once).unwrap();
        assert_eq!(a.dropped, 0);
        let b = run_compress(&once, &plan, 0.01, &twice).unwrap();
        let c2 = run_compress(&twice, &plan, 0.01, &dir.path().join("thrice.mvd")).unwrap();
        assert_eq!(b, c2);
        assert_eq!(b.zeros, b.total);
        assert_eq!(std::fs::read(&twice).unwrap(), std::fs::read(dir.path().join("thrice.mvd")).unwrap());
    }

    #[test]
    fn mismatched_plan_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(&[]);
        run_train(&c, dir.path()).unwrap();
        let other = cfg(&["partition.num_clients=5"]);
        let data = load_data(&other).unwrap();
        let plan_path = dir.path().join("other.json");
        write_json(&plan_path, &make_plan(&other, &data).unwrap()).unwrap();
        assert!(run_evaluate(&c, &c.eval, &dir.path().join(CHECKPOINT_FILE), &plan_path).is_err());
    }
}
