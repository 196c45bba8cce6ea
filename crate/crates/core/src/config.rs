//! Run configuration: a TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::engine::{AlgoConfig, VdMode};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::kernel::{Activation, MlpSpec};

/// Consulted when the config leaves `output_dir` unset.
pub const OUTPUT_DIR_ENV: &str = "METAVD_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "metavd-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// Exactly one source must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<SyntheticSpec>,
    pub idx: Option<IdxPaths>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionConfig {
    pub num_clients: usize,
    pub alpha_dot: f64,
    pub num_ood: usize,
    pub train_fraction: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            num_clients: 20,
            alpha_dot: 0.1,
            num_ood: 4,
            train_fraction: 0.8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogConfig {
    /// Include `wall_ms` in metrics records. Off by default so that logs of
    /// identical runs compare byte for byte; timings always go to
    /// `rounds.jsonl`.
    pub wall_ms_in_metrics: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub algo: AlgoConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub log: LogConfig,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string so that `algo.method=maml` works unquoted.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override, creating tables on the way.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses and validates; overrides are applied in order, last wins.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(config_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.algo.validate()?;
        self.eval.validate()?;
        if self.model.hidden.contains(&0) {
            return bad("model.hidden sizes must be positive".into());
        }
        if self.algo.metavd != VdMode::Off && self.model.hidden.is_empty() {
            return bad("dropout modes need at least one hidden layer".into());
        }
        if let Activation::LeakyRelu { slope } = self.model.activation {
            if !slope.is_finite() {
                return bad("leaky_relu slope must be finite".into());
            }
        }
        let p = &self.partition;
        if p.num_clients == 0 {
            return bad("partition.num_clients must be >= 1".into());
        }
        if !(p.alpha_dot > 0.0 && p.alpha_dot.is_finite()) {
            return bad(format!("partition.alpha_dot must be > 0, got {}", p.alpha_dot));
        }
        if p.num_ood >= p.num_clients {
            return bad(format!(
                "partition.num_ood ({}) leaves no training clients out of {}",
                p.num_ood, p.num_clients
            ));
        }
        if !(p.train_fraction > 0.0 && p.train_fraction < 1.0) {
            return bad(format!("partition.train_fraction must lie in (0, 1), got {}", p.train_fraction));
        }
        if self.algo.clients_per_round > p.num_clients - p.num_ood {
            return bad(format!(
                "algo.clients_per_round ({}) exceeds the {} training clients",
                self.algo.clients_per_round,
                p.num_clients - p.num_ood
            ));
        }
        match (&self.data.synthetic, &self.data.idx) {
            (Some(s), None) => {
                if s.num_classes < 2 || s.dim == 0 || s.clusters_per_class == 0 || s.n == 0 {
                    return bad("data.synthetic needs num_classes >= 2 and positive dim, clusters, n".into());
                }
                if !(s.noise >= 0.0 && s.noise.is_finite() && s.center_scale > 0.0 && s.center_scale.is_finite()) {
                    return bad("data.synthetic noise must be >= 0 and center_scale > 0".into());
                }
            }
            (None, Some(_)) => {}
            _ => return bad("set exactly one of data.synthetic and data.idx".into()),
        }
        Ok(())
    }

    /// `[input, hidden..., classes]`, with dropout on the last hidden layer
    /// unless dropout is off.
    pub fn mlp_spec(&self, input_dim: usize, num_classes: usize) -> Result<MlpSpec> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.model.hidden);
        sizes.push(num_classes);
        let vd_layer = match self.algo.metavd {
            VdMode::Off => None,
            _ => Some(self.model.hidden.len() - 1),
        };
        MlpSpec::new(sizes, self.model.activation, vd_layer)
    }

    /// Config value, then `$METAVD_OUTPUT_DIR`, then `./metavd-out`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Method;

    const BASE: &str = r#"
seed = 3

[data.synthetic]
num_classes = 5
dim = 8
clusters_per_class = 2
noise = 0.5
n = 400
"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_toml_str(BASE, &[]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.algo, AlgoConfig::default());
        assert_eq!(cfg.partition.train_fraction, 0.8);
        let spec = cfg.mlp_spec(8, 5).unwrap();
        assert_eq!(spec.layer_sizes, vec![8, 64, 64, 5]);
        assert_eq!(spec.metavd_layer, Some(1));
    }

    #[test]
    fn overrides_are_last_wins_and_typed() {
        let o = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let cfg = RunConfig::from_toml_str(
            BASE,
            &o(&["algo.method=maml", "algo.gamma=0.5", "algo.gamma=0.1", "model.hidden=[16]", "algo.metavd=off"]),
        )
        .unwrap();
        assert_eq!(cfg.algo.method, Method::Maml);
        assert_eq!(cfg.algo.gamma, 0.1);
        assert_eq!(cfg.model.hidden, vec![16]);
        assert_eq!(cfg.mlp_spec(8, 5).unwrap().metavd_layer, None);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        for o in [
            "algo.gama=0.1",
            "partition.alpha_dot=0",
            "partition.alpha_dot=-1",
            "partition.num_ood=20",
            "algo.local_steps=0",
            "algo.grad_clip=0",
            "algo.hyper_lr=-1",
            "algo.embedding_lr=-1",
            "eval.bins=0",
            "bogus=1",
            "noequals",
        ] {
            let r = RunConfig::from_toml_str(BASE, &[o.to_string()]);
            assert!(matches!(r, Err(Error::Config(_))), "{o}: {r:?}");
        }
        assert!(RunConfig::from_toml_str("seed = 1", &[]).is_err());
    }

    #[test]
    fn hyper_lr_falls_back_to_eta() {
        let cfg = RunConfig::from_toml_str(BASE, &["algo.eta=0.7".into()]).unwrap();
        assert_eq!(cfg.algo.hyper_lr(), 0.7);
        let cfg = RunConfig::from_toml_str(BASE, &["algo.eta=0.7".into(), "algo.hyper_lr=0.2".into()]).unwrap();
        assert_eq!(cfg.algo.hyper_lr(), 0.2);
        assert_eq!(cfg.algo.embedding_lr(), 0.2);
        let cfg = RunConfig::from_toml_str(BASE, &["algo.embedding_lr=0.01".into()]).unwrap();
        assert_eq!((cfg.algo.hyper_lr(), cfg.algo.embedding_lr()), (1.0, 0.01));
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg = RunConfig::from_toml_str(BASE, &["algo.method=perfedavg".into()]).unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap(), &[]).unwrap();
        assert_eq!(cfg, again);
    }
}
