//! Experiment configuration: flat `key = value` files plus programmatic
//! overrides, with every resolved value echoed for provenance.

use crate::compress::{Codec, ResidualPolicy, ThresholdScope};
use crate::fedcore::{Strategy, StrategyKind, TrainConfig};
use crate::halfcodec::RoundingMode;
use crate::model::ModelKind;
use std::path::PathBuf;
use thiserror::Error;

/// Environment variable overriding the dataset directory.
pub const DATA_DIR_ENV: &str = "FEDSPARQ_DATA_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionKind {
    Iid,
    Dirichlet,
}

/// Everything a run needs; defaults reproduce the headline setting
/// (3 clients, 25 rounds, MLP, adaptive strategy).
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub partition: PartitionKind,
    pub alpha: f64,
    pub clients: usize,
    pub rounds: u32,
    pub strategy: StrategyKind,
    pub fraction: f64,
    pub model: ModelKind,
    pub hidden_dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: u32,
    /// Proximal coefficient; unset defaults to 0 for IID and 0.01 for
    /// Dirichlet partitions.
    pub mu_prox: Option<f64>,
    pub seed: u64,
    pub rounding: RoundingMode,
    pub residual: ResidualPolicy,
    pub threshold_scope: ThresholdScope,
    pub beta_ema: f64,
    /// Server momentum; unset defaults to the strategy's own constant
    /// (0.01 for the adaptive pipeline, 0 for baselines).
    pub mu_srv: Option<f64>,
    pub participation: f64,
    /// Diagnostic lossless codec switch (`codec = exact`).
    pub codec_passthrough: bool,
    /// Diagnostic threshold override (`tau_override = 0`).
    pub tau_override: Option<f64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Mnist,
            data_dir: PathBuf::from("data"),
            partition: PartitionKind::Iid,
            alpha: 0.5,
            clients: 3,
            rounds: 25,
            strategy: StrategyKind::FedSparq,
            fraction: 0.1,
            model: ModelKind::Mlp,
            hidden_dim: 128,
            lr: 0.05,
            batch_size: 64,
            local_epochs: 1,
            mu_prox: None,
            seed: 1,
            rounding: RoundingMode::NearestEven,
            residual: ResidualPolicy::FullEf,
            threshold_scope: ThresholdScope::PerLayer,
            beta_ema: 0.9,
            mu_srv: None,
            participation: 1.0,
            codec_passthrough: false,
            tau_override: None,
            out_dir: None,
        }
    }
}

fn bad(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| bad(key, value, "not a number"))
}

impl ExperimentConfig {
    /// Parse a flat `key = value` file on top of the defaults. `#` starts a
    /// comment; blank lines are ignored.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: i + 1,
                text: raw.to_string(),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "dataset" => {
                self.dataset = match value {
                    "mnist" => DatasetKind::Mnist,
                    "synthetic" => DatasetKind::Synthetic,
                    _ => return Err(bad(key, value, "expected mnist|synthetic")),
                }
            }
            "data_dir" => self.data_dir = PathBuf::from(value),
            "partition" => {
                self.partition = match value {
                    "iid" => PartitionKind::Iid,
                    "dirichlet" => PartitionKind::Dirichlet,
                    _ => return Err(bad(key, value, "expected iid|dirichlet")),
                }
            }
            "alpha" => self.alpha = parse_num(key, value)?,
            "clients" => self.clients = parse_num(key, value)?,
            "rounds" => self.rounds = parse_num(key, value)?,
            "strategy" => {
                self.strategy = match value {
                    "fedsparq" => StrategyKind::FedSparq,
                    "fedavg" => StrategyKind::FedAvg,
                    "quantonly" => StrategyKind::QuantOnly,
                    "statictopk" => StrategyKind::StaticTopK,
                    "randomk" => StrategyKind::RandomK,
                    "fedpaq" | "fedpaq-like" => StrategyKind::FedPaqLike,
                    _ => {
                        return Err(bad(
                            key,
                            value,
                            "expected fedsparq|fedavg|quantonly|statictopk|randomk|fedpaq",
                        ))
                    }
                }
            }
            "fraction" => self.fraction = parse_num(key, value)?,
            "model" => {
                self.model = match value {
                    "mlp" => ModelKind::Mlp,
                    "linear" => ModelKind::Linear,
                    _ => return Err(bad(key, value, "expected mlp|linear")),
                }
            }
            "hidden_dim" => self.hidden_dim = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "local_epochs" => self.local_epochs = parse_num(key, value)?,
            "mu_prox" => self.mu_prox = Some(parse_num(key, value)?),
            "seed" => self.seed = parse_num(key, value)?,
            "rounding" => {
                self.rounding = match value {
                    "nearest" => RoundingMode::NearestEven,
                    "stochastic" => RoundingMode::Stochastic,
                    _ => return Err(bad(key, value, "expected nearest|stochastic")),
                }
            }
            "residual" => {
                self.residual = match value {
                    "fullef" => ResidualPolicy::FullEf,
                    "quanterror" => ResidualPolicy::QuantErrorOnly,
                    _ => return Err(bad(key, value, "expected fullef|quanterror")),
                }
            }
            "threshold_scope" => {
                self.threshold_scope = match value {
                    "per_layer" => ThresholdScope::PerLayer,
                    "global" => ThresholdScope::Global,
                    _ => return Err(bad(key, value, "expected per_layer|global")),
                }
            }
            "beta_ema" => self.beta_ema = parse_num(key, value)?,
            "mu_srv" => self.mu_srv = Some(parse_num(key, value)?),
            "participation" => self.participation = parse_num(key, value)?,
            "codec" => {
                self.codec_passthrough = match value {
                    "half" => false,
                    "exact" => true,
                    _ => return Err(bad(key, value, "expected half|exact")),
                }
            }
            "tau_override" => {
                self.tau_override = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(parse_num(key, value)?)
                }
            }
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.rounds < 1 {
            return Err(bad("rounds", &self.rounds.to_string(), "must be >= 1"));
        }
        if self.clients < 1 {
            return Err(bad("clients", &self.clients.to_string(), "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta_ema) {
            return Err(bad(
                "beta_ema",
                &self.beta_ema.to_string(),
                "must be in [0, 1)",
            ));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(bad(
                "fraction",
                &self.fraction.to_string(),
                "must be in (0, 1]",
            ));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(bad(
                "participation",
                &self.participation.to_string(),
                "must be in (0, 1]",
            ));
        }
        Ok(())
    }

    /// Dataset directory with the environment override applied.
    pub fn resolved_data_dir(&self) -> PathBuf {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.data_dir.clone(),
        }
    }

    /// Proximal coefficient: explicit value, else 0 for IID and 0.01 for
    /// Dirichlet partitions.
    pub fn resolved_mu_prox(&self) -> f64 {
        self.mu_prox.unwrap_or(match self.partition {
            PartitionKind::Iid => 0.0,
            PartitionKind::Dirichlet => 0.01,
        })
    }

    /// Server momentum: explicit value, else the strategy's own constant.
    pub fn resolved_mu_srv(&self) -> f64 {
        self.mu_srv
            .unwrap_or(match self.strategy {
                StrategyKind::FedSparq => 0.01,
                _ => 0.0,
            })
    }

    pub fn to_strategy(&self) -> Strategy {
        let mut s = match self.strategy {
            StrategyKind::FedSparq => Strategy::fedsparq(),
            StrategyKind::FedAvg => Strategy::fedavg(),
            StrategyKind::QuantOnly => Strategy::quantonly(),
            StrategyKind::StaticTopK => Strategy::static_topk(),
            StrategyKind::RandomK => Strategy::random_k(),
            StrategyKind::FedPaqLike => Strategy::fedpaq_like(),
        };
        s.fraction = self.fraction;
        s.codec = if self.codec_passthrough {
            Codec::Passthrough
        } else {
            Codec::Binary16(self.rounding)
        };
        s.residual_policy = self.residual;
        s.threshold_scope = self.threshold_scope;
        s.beta_ema = self.beta_ema;
        s.mu_srv = self.resolved_mu_srv();
        s.tau_override = self.tau_override;
        s
    }

    pub fn to_train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.local_epochs,
            mu_prox: self.resolved_mu_prox(),
        }
    }

    /// Every resolved setting as `key = value` lines, for provenance.
    pub fn echo(&self) -> String {
        let dataset = match self.dataset {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Synthetic => "synthetic",
        };
        let partition = match self.partition {
            PartitionKind::Iid => "iid",
            PartitionKind::Dirichlet => "dirichlet",
        };
        let model = match self.model {
            ModelKind::Mlp => "mlp",
            ModelKind::Linear => "linear",
        };
        let rounding = match self.rounding {
            RoundingMode::NearestEven => "nearest",
            RoundingMode::Stochastic => "stochastic",
        };
        let residual = match self.residual {
            ResidualPolicy::FullEf => "fullef",
            ResidualPolicy::QuantErrorOnly => "quanterror",
        };
        let scope = match self.threshold_scope {
            ThresholdScope::PerLayer => "per_layer",
            ThresholdScope::Global => "global",
        };
        let codec = if self.codec_passthrough { "exact" } else { "half" };
        let tau = self
            .tau_override
            .map_or("none".to_string(), |t| t.to_string());
        format!(
            "dataset = {dataset}\n\
             data_dir = {}\n\
             partition = {partition}\n\
             alpha = {}\n\
             clients = {}\n\
             rounds = {}\n\
             strategy = {}\n\
             fraction = {}\n\
             model = {model}\n\
             hidden_dim = {}\n\
             lr = {}\n\
             batch_size = {}\n\
             local_epochs = {}\n\
             mu_prox = {}\n\
             seed = {}\n\
             rounding = {rounding}\n\
             residual = {residual}\n\
             threshold_scope = {scope}\n\
             beta_ema = {}\n\
             mu_srv = {}\n\
             participation = {}\n\
             codec = {codec}\n\
             tau_override = {tau}\n",
            self.resolved_data_dir().display(),
            self.alpha,
            self.clients,
            self.rounds,
            self.to_strategy().label(),
            self.fraction,
            self.hidden_dim,
            self.lr,
            self.batch_size,
            self.local_epochs,
            self.resolved_mu_prox(),
            self.seed,
            self.beta_ema,
            self.resolved_mu_srv(),
            self.participation,
        )
    }
}
