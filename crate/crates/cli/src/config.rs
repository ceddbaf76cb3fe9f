//! Run configuration: JSON file, command-line overrides, validation.

use std::fs;
use std::path::{Path, PathBuf};

use pathcaps::capsules::RoutingMode;
use pathcaps::model::{Architecture, NetworkSpec};
use pathcaps::paths::{DropCircuitConfig, PathVariant};
use pathcaps::train::{AdamConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DATA_DIR_ENV: &str = "PATHCAPS_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Pathcaps,
    Capsnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the four MNIST IDX files.
    pub dir: Option<PathBuf>,
    /// Share of the training file held out for validation.
    pub val_fraction: f64,
    pub split_seed: u64,
    /// Keep only this many of the training (after the split) samples.
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
    /// First `n` images of the test file.
    pub test_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            val_fraction: 0.1,
            split_seed: 0,
            train_limit: None,
            val_limit: None,
            test_limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: ArchKind,
    pub paths: usize,
    pub variant: PathVariant,
    pub routing: RoutingMode,
    pub iterations: usize,
    pub drop_circuit: DropCircuitConfig,
    pub reconstruction: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub trials: usize,
    pub augment: bool,
    pub test_every_epoch: bool,
    pub record_time: bool,
    pub adam: AdamConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            arch: ArchKind::Pathcaps,
            paths: 10,
            variant: PathVariant::Table2Matched,
            routing: RoutingMode::FanIn,
            iterations: 3,
            drop_circuit: DropCircuitConfig::default(),
            reconstruction: false,
            epochs: train.epochs,
            batch_size: train.batch_size,
            seed: 0,
            trials: 1,
            augment: train.augment,
            test_every_epoch: train.test_every_epoch,
            record_time: train.record_time,
            adam: train.adam,
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Command-line flags that override the config file. `None` keeps the
/// file's value.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct SpecOverrides {
    /// JSON run configuration; flags given on the command line win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchKind>,
    #[arg(long)]
    pub paths: Option<usize>,
    /// Path layout: table2 (published sizes) or table1 (literal layer list).
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<PathVariant>,
    #[arg(long, value_parser = parse_routing)]
    pub routing: Option<RoutingMode>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Enable DropCircuit.
    #[arg(long)]
    pub drop_circuit: bool,
    #[arg(long)]
    pub drop_prob: Option<f64>,
    /// Attach the reconstruction decoder.
    #[arg(long)]
    pub recon: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Default, clap::Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Independent runs with seeds s, s+1, ...
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub val_limit: Option<usize>,
    #[arg(long)]
    pub test_limit: Option<usize>,
}

fn parse_variant(s: &str) -> Result<PathVariant, String> {
    s.parse().map_err(|e: pathcaps::Error| e.to_string())
}

pub(crate) fn parse_routing(s: &str) -> Result<RoutingMode, String> {
    match s {
        "fan-in" => Ok(RoutingMode::FanIn),
        "fan-out" => Ok(RoutingMode::FanOut),
        other => Err(format!("expected fan-in or fan-out, got {other}")),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Config file (or defaults) with `spec` and `train` flags applied.
    pub fn resolve(spec: &SpecOverrides, train: Option<&TrainOverrides>) -> Result<Self, CliError> {
        let mut cfg = match &spec.config {
            Some(path) => Self::from_file(path)?,
            None => Self::default(),
        };
        macro_rules! take {
            ($src:expr => $dst:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        take!(spec.arch => cfg.arch);
        take!(spec.paths => cfg.paths);
        take!(spec.variant => cfg.variant);
        take!(spec.routing => cfg.routing);
        take!(spec.iterations => cfg.iterations);
        take!(spec.drop_prob => cfg.drop_circuit.drop_prob);
        take!(spec.seed => cfg.seed);
        if spec.drop_circuit {
            cfg.drop_circuit.enabled = true;
        }
        if spec.recon {
            cfg.reconstruction = true;
        }
        if let Some(t) = train {
            take!(t.epochs => cfg.epochs);
            take!(t.batch_size => cfg.batch_size);
            take!(t.trials => cfg.trials);
            take!(t.out_dir => cfg.out_dir);
            if t.data_dir.is_some() {
                cfg.data.dir = t.data_dir.clone();
            }
            if t.train_limit.is_some() {
                cfg.data.train_limit = t.train_limit;
            }
            if t.val_limit.is_some() {
                cfg.data.val_limit = t.val_limit;
            }
            if t.test_limit.is_some() {
                cfg.data.test_limit = t.test_limit;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn network_spec(&self, seed: u64) -> NetworkSpec {
        let architecture = match self.arch {
            ArchKind::Pathcaps => Architecture::PathCapsNet {
                paths: self.paths,
                variant: self.variant,
            },
            ArchKind::Capsnet => Architecture::CapsNetBaseline,
        };
        NetworkSpec {
            architecture,
            routing: self.routing,
            iterations: self.iterations,
            drop_circuit: self.drop_circuit,
            reconstruction: self.reconstruction,
            seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            augment: self.augment,
            adam: self.adam,
            test_every_epoch: self.test_every_epoch,
            record_time: self.record_time,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.trials < 1 {
            return Err(CliError::Usage("invalid configuration: trials: must be at least 1".into()));
        }
        let f = self.data.val_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Usage(format!(
                "invalid configuration: data.val_fraction: {f} is outside (0, 1)"
            )));
        }
        self.network_spec(self.seed).validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    /// Data directory from the config, then the environment.
    pub fn data_dir(&self) -> Result<PathBuf, CliError> {
        self.data
            .dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "no data directory: pass --data-dir, set data.dir in the config, or set {DATA_DIR_ENV}"
                ))
            })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("RunConfig serializes");
        s.push('\n');
        s
    }
}
