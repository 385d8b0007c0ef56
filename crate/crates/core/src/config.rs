//! TOML experiment configuration shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::{CostOptions, EnergyConstants};
use crate::data::{generate_synthetic, load_csv, split, Dataset, Scaling, SplitSpec};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::federation::{AggregationMode, Algorithm, RoundConfig};
use crate::nn::{Architecture, LayerSpec};
use crate::partition::{
    partition_label, partition_mixed, partition_quantity, GammaSpec, PartitionMode, PartitionPlan,
};
use crate::pruning::check_rho;
use crate::rho::{PerClient, ScoreConfig, ScoreConfigSpec, SearchMode};

/// Proximal coefficient used when FedProx is selected without an explicit `mu`.
pub const DEFAULT_FEDPROX_MU: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub cost: CostConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<ScoreConfigSpec>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvConfig>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "yes")]
    pub stratified: bool,
}

fn default_train_fraction() -> f64 {
    0.8
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub features: usize,
    pub samples_per_class: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_separation() -> f64 {
    3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvConfig {
    pub path: PathBuf,
    #[serde(default = "default_label")]
    pub label_column: String,
    #[serde(default)]
    pub scaling: Scaling,
}

fn default_label() -> String {
    "label".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    pub clients: usize,
    /// Gamma shape for label skew (and quantity skew unless overridden).
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantity_alpha: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            mode: PartitionMode::Mixed,
            clients: 10,
            alpha: 10.0,
            beta: 1.0,
            quantity_alpha: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    /// Two unpadded convolutions, a hidden dense layer and the classifier.
    #[default]
    Reference,
    /// Padded convolutions with max-pooling, as used for the cost presets.
    Pooled,
    /// Layers listed verbatim under `layers`.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub kind: ArchKind,
    #[serde(default = "default_channels")]
    pub conv_channels: [usize; 2],
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerSpec>,
}

fn default_channels() -> [usize; 2] {
    [32, 64]
}
fn default_hidden() -> usize {
    128
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ArchKind::Reference,
            conv_channels: default_channels(),
            hidden: default_hidden(),
            layers: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn build(&self, input_len: usize, classes: usize) -> Result<Architecture> {
        let arch = match self.kind {
            ArchKind::Reference => {
                let [c1, c2] = self.conv_channels;
                Architecture::two_conv(input_len, classes, c1, c2, self.hidden)
            }
            ArchKind::Pooled => Architecture::pooled(input_len, classes),
            ArchKind::Custom => Architecture {
                input_len,
                layers: self.layers.clone(),
            },
        };
        arch.validate()?;
        if arch.num_classes()? != classes {
            return Err(Error::config(format!(
                "model outputs {} classes but the data has {classes}",
                arch.num_classes()?
            )));
        }
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    /// Defaults to 0.001 under FedProx and 0 under FedAvg.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    pub rounds: usize,
    pub local_epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_epochs: Option<usize>,
    pub rho: PerClient,
    #[serde(default)]
    pub aggregation: AggregationMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            algorithm: Algorithm::FedProx,
            mu: None,
            rounds: 40,
            local_epochs: 20,
            finetune_epochs: None,
            rho: PerClient::Uniform(0.0),
            aggregation: AggregationMode::Normalized,
            learning_rate: 0.001,
            batch_size: 128,
            execution: Execution::default(),
        }
    }
}

impl FederationConfig {
    pub fn effective_mu(&self) -> f64 {
        self.mu.unwrap_or(match self.algorithm {
            Algorithm::FedProx => DEFAULT_FEDPROX_MU,
            Algorithm::FedAvg => 0.0,
        })
    }

    pub fn round_config(&self, seed: u64) -> RoundConfig {
        RoundConfig {
            algorithm: self.algorithm,
            mu: self.effective_mu(),
            local_epochs: self.local_epochs,
            finetune_epochs: self.finetune_epochs,
            rounds: self.rounds,
            rho: self.rho.clone(),
            aggregation: self.aggregation,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
            execution: self.execution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub rho: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rho: vec![0.0, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default)]
    pub constants: EnergyConstants,
    #[serde(default)]
    pub count_biases: bool,
    #[serde(default)]
    pub multiply_add_as_one: bool,
}

impl CostConfig {
    pub fn options(&self) -> CostOptions {
        CostOptions {
            count_biases: self.count_biases,
            multiply_add_as_one: self.multiply_add_as_one,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub mode: SearchMode,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            mode: SearchMode::UniformGrid,
        }
    }
}

/// Independent sub-seeds derived from the master seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedStream {
    Data = 0,
    Split = 1,
    LabelSkew = 2,
    QuantitySkew = 3,
    Training = 4,
}

pub fn derive_seed(master: u64, stream: SeedStream) -> u64 {
    // splitmix64 finalizer over (master, stream)
    let mut z = master.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stream as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    /// Reads a TOML file. Syntax and type errors carry the line and column.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string().trim_end().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Every violated invariant, one message per field. Empty iff valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match (&self.data.synthetic, &self.data.csv) {
            (Some(_), Some(_)) => {
                v.push("data: give exactly one of [data.synthetic] or [data.csv]".into())
            }
            (None, None) => {
                v.push("data: one of [data.synthetic] or [data.csv] is required".into())
            }
            (Some(s), None) => {
                if s.classes < 2 {
                    v.push("data.synthetic.classes must be >= 2".into());
                }
                if s.features < 2 {
                    v.push("data.synthetic.features must be >= 2".into());
                }
                if s.samples_per_class == 0 {
                    v.push("data.synthetic.samples_per_class must be >= 1".into());
                }
                if !(s.separation >= 0.0 && s.separation.is_finite()) {
                    v.push("data.synthetic.separation must be >= 0".into());
                }
            }
            (None, Some(c)) => {
                if c.label_column.is_empty() {
                    v.push("data.csv.label_column must not be empty".into());
                }
            }
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            v.push("data.train_fraction must lie in (0, 1)".into());
        }
        let p = &self.partition;
        if p.clients == 0 {
            v.push("partition.clients must be >= 1".into());
        }
        if !(p.alpha > 0.0 && p.alpha.is_finite()) {
            v.push("partition.alpha must be > 0".into());
        }
        if !(p.beta > 0.0 && p.beta.is_finite()) {
            v.push("partition.beta must be > 0".into());
        }
        if p.quantity_alpha
            .is_some_and(|a| !(a > 0.0 && a.is_finite()))
        {
            v.push("partition.quantity_alpha must be > 0".into());
        }
        let m = &self.model;
        if m.kind == ArchKind::Custom && m.layers.is_empty() {
            v.push("model.layers is required when model.kind = custom".into());
        }
        if m.kind == ArchKind::Reference && (m.conv_channels.contains(&0) || m.hidden == 0) {
            v.push("model widths must be >= 1".into());
        }
        let f = &self.federation;
        let round = f.round_config(self.seed);
        v.extend(
            round
                .violations()
                .into_iter()
                .map(|msg| format!("federation.{msg}")),
        );
        if let PerClient::Each(rs) = &f.rho {
            if rs.len() != p.clients {
                v.push(format!(
                    "federation.rho lists {} ratios for {} clients",
                    rs.len(),
                    p.clients
                ));
            }
        }
        if self.sweep.rho.is_empty() {
            v.push("sweep.rho must list at least one ratio".into());
        }
        if self.sweep.rho.iter().any(|r| check_rho(*r).is_err()) {
            v.push("sweep.rho entries must lie in [0, 1)".into());
        }
        if let Err(e) = self.cost.constants.validate() {
            v.push(format!("cost.constants: {}", bare(e)));
        }
        if let Some(spec) = &self.score {
            if let Err(e) = ScoreConfig::try_from(spec.clone()) {
                v.push(format!("score: {}", bare(e)));
            }
        }
        if let SearchMode::HillClimb(h) = &self.optimizer.mode {
            if h.iterations == 0 || !(h.sigma > 0.0) {
                v.push("optimizer.mode.hill-climb needs iterations >= 1 and sigma > 0".into());
            }
        }
        v
    }

    /// Same checks as [`violations`](Self::violations), as a single error.
    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        self.federation
            .round_config(derive_seed(self.seed, SeedStream::Training))
    }

    pub fn score_config(&self) -> Result<Option<ScoreConfig>> {
        self.score.clone().map(ScoreConfig::try_from).transpose()
    }

    /// The full dataset before splitting.
    pub fn load_dataset(&self, base: &Path) -> Result<Dataset> {
        if let Some(s) = &self.data.synthetic {
            return generate_synthetic(
                s.classes,
                s.features,
                &vec![s.samples_per_class; s.classes],
                s.separation,
                derive_seed(self.seed, SeedStream::Data),
            );
        }
        let c = self
            .data
            .csv
            .as_ref()
            .ok_or_else(|| Error::config("no data source configured"))?;
        let path = if c.path.is_absolute() {
            c.path.clone()
        } else {
            base.join(&c.path)
        };
        load_csv(&path, &c.label_column, c.scaling, None)
    }

    /// `(features, classes)` without generating or reading samples when possible.
    pub fn data_dims(&self, base: &Path) -> Result<(usize, usize)> {
        match &self.data.synthetic {
            Some(s) => Ok((s.features, s.classes)),
            None => {
                let ds = self.load_dataset(base)?;
                Ok((ds.num_features(), ds.num_classes()))
            }
        }
    }

    pub fn split_data(&self, ds: &Dataset) -> Result<(Dataset, Dataset)> {
        split(
            ds,
            &SplitSpec {
                train_fraction: self.data.train_fraction,
                seed: derive_seed(self.seed, SeedStream::Split),
                stratified: self.data.stratified,
            },
        )
    }

    pub fn architecture(&self, base: &Path) -> Result<Architecture> {
        let (features, classes) = self.data_dims(base)?;
        self.model.build(features, classes)
    }

    pub fn partition(&self, train: &Dataset) -> Result<PartitionPlan> {
        let p = &self.partition;
        let label = GammaSpec {
            alpha: p.alpha,
            beta: p.beta,
            seed: derive_seed(self.seed, SeedStream::LabelSkew),
        };
        let quantity = GammaSpec {
            alpha: p.quantity_alpha.unwrap_or(p.alpha),
            beta: p.beta,
            seed: derive_seed(self.seed, SeedStream::QuantitySkew),
        };
        match p.mode {
            PartitionMode::Quantity => partition_quantity(train, p.clients, &quantity),
            PartitionMode::Label => partition_label(train, p.clients, &label),
            PartitionMode::Mixed => partition_mixed(train, p.clients, &quantity, &label),
        }
    }
}

fn bare(e: Error) -> String {
    match e {
        Error::Config(m) | Error::Input(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 7
        [data.synthetic]
        classes = 3
        features = 8
        samples_per_class = 20
    "#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert!(cfg.violations().is_empty(), "{:?}", cfg.violations());
        assert_eq!(cfg.federation.rounds, 40);
        assert_eq!(cfg.federation.local_epochs, 20);
        assert_eq!(cfg.federation.effective_mu(), 0.001);
        assert_eq!(cfg.data.train_fraction, 0.8);
    }

    #[test]
    fn partial_tables_keep_defaults() {
        let text = format!("{MINIMAL}\n[federation]\nrounds = 3\n[partition]\nclients = 4\n");
        let cfg = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.federation.rounds, 3);
        assert_eq!(cfg.federation.batch_size, 128);
        assert_eq!(cfg.partition.clients, 4);
        assert_eq!(cfg.partition.alpha, 10.0);
    }

    #[test]
    fn roundtrip_is_lossless() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.score = Some(ScoreConfigSpec {
            clients: Some(2),
            acc_unp: PerClient::Each(vec![0.9, 0.8]),
            energy_unp: PerClient::Uniform(1e6),
            alpha1: 1.0,
            alpha2: 10.0,
            beta: PerClient::Uniform(2e-5),
            lambda: PerClient::Uniform(10.0),
            delta: None,
        });
        cfg.federation.mu = Some(0.01);
        cfg.model.kind = ArchKind::Custom;
        cfg.model.layers = vec![LayerSpec::Flatten, LayerSpec::dense(8, 3)];
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn violations_are_listed_per_field() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.federation.mu = Some(-0.5);
        cfg.partition.clients = 0;
        let v = cfg.violations();
        assert!(
            v.contains(&"federation.mu must be >= 0".to_string()),
            "{v:?}"
        );
        assert!(v.iter().any(|m| m.starts_with("partition.clients")));

        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.federation.algorithm = Algorithm::FedAvg;
        assert!(cfg.violations().is_empty());
        cfg.federation.mu = Some(0.001);
        assert!(cfg.violations().iter().any(|m| m.contains("fedavg")));
    }

    #[test]
    fn parse_errors_have_location() {
        let err =
            ExperimentConfig::from_toml(&MINIMAL.replace("seed = 7", "seed = \"x\"")).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = ExperimentConfig::from_toml("bogus = 1\n[data]").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, SeedStream::Data);
        let b = derive_seed(1, SeedStream::Split);
        let c = derive_seed(2, SeedStream::Data);
        assert!(a != b && a != c && b != c);
    }
}
