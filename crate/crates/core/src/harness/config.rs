//! Experiment configuration.
//!
//! Configs are TOML documents deserialized into [`ExperimentConfig`]; every
//! field has a default, so an empty file is valid. Any key can be replaced
//! with a dotted-path override such as `sampler.burn_in=50` or
//! `data.kind="clusters"`. Override values are parsed as TOML literals and
//! fall back to plain strings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::backbone::{Activation, OptimizerConfig, OptimizerMethod};
use crate::baselines::{BbbConfig, GdaConfig};
use crate::error::{Error, Result};
use crate::model::{GaussianPrior, FULL_NETWORK_MAX_DIM};
use crate::sampler::SamplerConfig;
use crate::toydata::SinusoidConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Llhmc,
    FullHmc,
    Map,
    Bbb,
    Subensemble,
    Gda,
}

impl MethodTag {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodTag::Llhmc => "llhmc",
            MethodTag::FullHmc => "full_hmc",
            MethodTag::Map => "map",
            MethodTag::Bbb => "bbb",
            MethodTag::Subensemble => "subensemble",
            MethodTag::Gda => "gda",
        }
    }
}

/// Where the train and test sets come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    TwoMoons {
        #[serde(default = "default_moons_n")]
        n_train: usize,
        #[serde(default = "default_moons_n")]
        n_test: usize,
        #[serde(default = "default_moons_noise")]
        noise: f64,
    },
    /// Gaussian clusters at `separation * e_k`, randomly split into train/test.
    Clusters {
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_cluster_dim")]
        dim: usize,
        #[serde(default = "default_cluster_k")]
        num_classes: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
    /// Labelled CSV tables, loaded with their manifests when present.
    Files { train: PathBuf, test: PathBuf },
    /// One labelled CSV whose manifest carries the train/test split.
    Split { path: PathBuf },
    /// 1-D regression toy; only valid for uncertainty bands.
    Sinusoid(SinusoidConfig),
}

fn default_moons_n() -> usize {
    200
}
fn default_moons_noise() -> f64 {
    0.1
}
fn default_per_class() -> usize {
    200
}
fn default_cluster_dim() -> usize {
    8
}
fn default_cluster_k() -> usize {
    4
}
fn default_separation() -> f64 {
    3.0
}
fn default_test_fraction() -> f64 {
    0.3
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::TwoMoons {
            n_train: default_moons_n(),
            n_test: default_moons_n(),
            noise: default_moons_noise(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    /// Seed of the generated data; the run seed when absent.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// When false the method works on the raw inputs as features.
    pub enabled: bool,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub optimizer: OptimizerConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            hidden: vec![20, 20],
            activation: Activation::Relu,
            optimizer: OptimizerConfig {
                method: OptimizerMethod::Adam,
                learning_rate: 0.01,
                epochs: 300,
                batch_size: 32,
                weight_decay: 0.0,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodMode {
    Min,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodConfig {
    pub mode: OodMode,
    /// In `min` mode, remove every class with fewer training rows instead of
    /// only the rarest one.
    #[serde(default)]
    pub threshold: Option<usize>,
}

fn full_batch(epochs: usize) -> OptimizerConfig {
    OptimizerConfig {
        method: OptimizerMethod::Sgd,
        learning_rate: 1.0,
        epochs,
        batch_size: 0,
        weight_decay: 0.0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub optimizer: OptimizerConfig,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            optimizer: full_batch(5000),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BbbSection {
    pub optimizer: OptimizerConfig,
    #[serde(flatten)]
    pub bbb: BbbConfig,
}

impl Default for BbbSection {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig {
                epochs: 100,
                ..OptimizerConfig::default()
            },
            bbb: BbbConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubEnsembleSection {
    pub members: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for SubEnsembleSection {
    fn default() -> Self {
        Self {
            members: 5,
            optimizer: OptimizerConfig {
                epochs: 20,
                ..OptimizerConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FullHmcSection {
    pub max_dim: usize,
}

impl Default for FullHmcSection {
    fn default() -> Self {
        Self {
            max_dim: FULL_NETWORK_MAX_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: MethodTag,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub prior_std: f64,
    /// Observation noise of regression heads.
    pub noise_std: f64,
    /// `sampler.seed` is ignored by experiments: chain streams derive from
    /// the run seed.
    pub sampler: SamplerConfig,
    pub map: MapConfig,
    pub bbb: BbbSection,
    pub subensemble: SubEnsembleSection,
    pub gda: GdaConfig,
    pub full_hmc: FullHmcSection,
    /// Predictive members drawn from the fitted method; all available
    /// members (10 variational draws) when absent.
    pub n_members: Option<usize>,
    pub ood: Option<OodConfig>,
    /// Backbone seeds for multi-start runs; empty means a single start
    /// seeded by the run seed.
    pub starts: Vec<u64>,
    /// Run seeds used by the CLI when `--seed` is not given.
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: MethodTag::Llhmc,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            prior_std: 1.0,
            noise_std: 0.1,
            sampler: SamplerConfig::default(),
            map: MapConfig::default(),
            bbb: BbbSection::default(),
            subensemble: SubEnsembleSection::default(),
            gda: GdaConfig::default(),
            full_hmc: FullHmcSection::default(),
            n_members: None,
            ood: None,
            starts: Vec::new(),
            seeds: vec![0],
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        GaussianPrior::new(self.prior_std)?;
        if !(self.noise_std > 0.0) {
            return Err(Error::Config(format!("noise_std must be > 0, got {}", self.noise_std)));
        }
        if matches!(self.method, MethodTag::Llhmc | MethodTag::FullHmc) {
            self.sampler.validate()?;
        }
        if self.method == MethodTag::FullHmc && !self.backbone.enabled {
            return Err(Error::Config(
                "full_hmc samples the backbone, which must be enabled".into(),
            ));
        }
        if self.n_members == Some(0) {
            return Err(Error::Config("n_members must be >= 1".into()));
        }
        Ok(())
    }

    pub fn prior(&self) -> Result<GaussianPrior> {
        GaussianPrior::new(self.prior_std)
    }

    /// Backbone seeds of a run: the run seed alone, or the configured starts.
    pub fn start_seeds(&self, seed: u64) -> Vec<u64> {
        if self.starts.is_empty() {
            vec![seed]
        } else {
            self.starts.clone()
        }
    }

    /// The configuration with run-independent fields cleared: what a grid
    /// cell is, irrespective of seeds and output location.
    pub fn cell(&self) -> ExperimentConfig {
        ExperimentConfig {
            seeds: Vec::new(),
            output_dir: None,
            ..self.clone()
        }
    }

    /// Hex SHA-256 identifying `(cell, seed)`.
    pub fn run_hash(&self, seed: u64) -> String {
        let json = serde_json::to_string(&self.cell()).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.update(seed.to_le_bytes());
        hex::encode(h.finalize())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let cfg: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_table(&self) -> Result<Table> {
        match Value::try_from(self).map_err(|e| Error::Config(e.to_string()))? {
            Value::Table(t) => Ok(t),
            _ => Err(Error::Config("config did not serialize to a table".into())),
        }
    }

    pub fn parse(text: &str, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        Self::from_table(table)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, Value)]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    /// Applies overrides to a fully materialized copy of `self`.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<Self> {
        let mut table = self.to_table()?;
        for (k, v) in overrides {
            set_path(&mut table, k, v.clone())?;
        }
        Self::from_table(table)
    }
}

/// Parses `key=value`; the value is a TOML literal or, failing that, a string.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {arg:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override {arg:?} has an empty key")));
    }
    Ok((key.to_string(), parse_value(raw.trim())))
}

pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets `a.b.c` in `table`, creating intermediate tables.
pub fn set_path(table: &mut Table, dotted: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    let (last, prefix) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in prefix {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(Error::Config(format!("{dotted}: {p} is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::StepSizeInit;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(ExperimentConfig::parse("", &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let o = vec![
            parse_override("sampler.burn_in=7").unwrap(),
            parse_override("sampler.init_step_size=auto").unwrap(),
            parse_override("method=gda").unwrap(),
            parse_override("data.kind=clusters").unwrap(),
            parse_override("data.dim=5").unwrap(),
            parse_override("ood.mode=min").unwrap(),
        ];
        let c = ExperimentConfig::parse("prior_std = 2.5\n", &o).unwrap();
        assert_eq!(c.sampler.burn_in, 7);
        assert_eq!(c.sampler.init_step_size, StepSizeInit::Auto);
        assert_eq!(c.method, MethodTag::Gda);
        assert_eq!(c.prior_std, 2.5);
        assert!(matches!(c.data.source, DataSource::Clusters { dim: 5, .. }));
        assert_eq!(c.ood.unwrap().mode, OodMode::Min);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::parse("prior_sd = 1.0\n", &[]).is_err());
        assert!(ExperimentConfig::parse("[sampler]\nburnin = 3\n", &[]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig {
            ood: Some(OodConfig {
                mode: OodMode::Max,
                threshold: Some(3),
            }),
            n_members: Some(4),
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::parse(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
        let again = c.with_overrides(&[]).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn hash_ignores_seeds_list_and_output() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seeds = vec![1, 2, 3];
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.run_hash(4), b.run_hash(4));
        assert_ne!(a.run_hash(4), a.run_hash(5));
        b.prior_std = 2.0;
        assert_ne!(a.run_hash(4), b.run_hash(4));
    }
}
