//! Experiment configuration: one flat TOML table.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected. Integers are read signed so that out-of-range values produce
//! an error naming the key rather than a type mismatch.

use std::path::{Path, PathBuf};

use feddm_core::distillation::ClientConfig;
use feddm_core::federation::{FedRunConfig, LocalConfig, Protocol, ServerConfig};
use feddm_core::models::Architecture;
use feddm_core::privacy::DpBudget;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// feddm, fedavg, fedprox or real.
    pub protocol: String,
    pub rounds: i64,
    pub clients: i64,
    pub alpha: f64,
    pub seed: i64,
    pub client_fraction: f64,

    pub ipc: i64,
    pub iterations: i64,
    pub client_lr: f64,
    pub real_batch: i64,
    pub rho: f64,
    pub sigma: f64,
    pub clip: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,

    pub server_lr: f64,
    pub server_epochs: i64,
    pub server_batch: i64,

    pub local_epochs: i64,
    pub local_lr: f64,
    pub local_batch: i64,
    pub mu: f64,

    /// mlp, convnet or logistic.
    pub model: String,
    pub hidden: Vec<i64>,
    pub channels: Vec<i64>,

    /// blobs, binary1d, idx, cifar10 or cifar100.
    pub dataset: String,
    pub blob_per_class: i64,
    pub blob_classes: i64,
    pub blob_dim: i64,
    pub blob_spread: f64,
    pub test_per_class: i64,
    pub samples: i64,
    pub test_samples: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_classes: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_per_class: Option<i64>,

    pub out_dir: PathBuf,
    pub workers: i64,
    pub wall_clock: bool,
    pub dump_images: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: "feddm".into(),
            rounds: 20,
            clients: 10,
            alpha: 0.5,
            seed: 0,
            client_fraction: 1.0,
            ipc: 10,
            iterations: 1000,
            client_lr: 1.0,
            real_batch: 256,
            rho: 5.0,
            sigma: 0.0,
            clip: 5.0,
            epsilon: None,
            delta: None,
            server_lr: 0.01,
            server_epochs: 500,
            server_batch: 256,
            local_epochs: 10,
            local_lr: 0.01,
            local_batch: 256,
            mu: 0.01,
            model: "mlp".into(),
            hidden: vec![128],
            channels: vec![16, 32, 32],
            dataset: "blobs".into(),
            blob_per_class: 200,
            blob_classes: 4,
            blob_dim: 2,
            blob_spread: 0.5,
            test_per_class: 100,
            samples: 100,
            test_samples: 1000,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_files: Vec::new(),
            test_files: Vec::new(),
            max_classes: None,
            max_per_class: None,
            out_dir: PathBuf::from("out"),
            workers: 1,
            wall_clock: false,
            dump_images: false,
        }
    }
}

/// Where the training and test data come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Blobs {
        per_class: usize,
        classes: usize,
        dim: usize,
        spread: f64,
        test_per_class: usize,
    },
    Binary1d {
        samples: usize,
        test_samples: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Cifar {
        fine: bool,
        train_files: Vec<PathBuf>,
        test_files: Vec<PathBuf>,
    },
}

fn positive(key: &'static str, v: i64) -> Result<usize, ConfigError> {
    if v < 1 {
        return Err(invalid(key, format!("must be at least 1, got {v}")));
    }
    Ok(v as usize)
}

fn non_negative(key: &'static str, v: i64) -> Result<usize, ConfigError> {
    if v < 0 {
        return Err(invalid(key, format!("must be non-negative, got {v}")));
    }
    Ok(v as usize)
}

fn positive_f(key: &'static str, v: f64) -> Result<f64, ConfigError> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(invalid(key, format!("must be a positive number, got {v}")));
    }
    Ok(v)
}

fn non_negative_f(key: &'static str, v: f64) -> Result<f64, ConfigError> {
    if !(v >= 0.0) || !v.is_finite() {
        return Err(invalid(key, format!("must be a non-negative number, got {v}")));
    }
    Ok(v)
}

impl ExperimentConfig {
    pub fn parse_str(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every range; the error names the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.fed_config()?;
        self.data_source()?;
        if !matches!(self.model.as_str(), "mlp" | "convnet" | "logistic") {
            return Err(invalid("model", format!("expected mlp, convnet or logistic, got {:?}", self.model)));
        }
        for &h in &self.hidden {
            positive("hidden", h)?;
        }
        if self.channels.len() != 3 {
            return Err(invalid("channels", "expected three channel counts"));
        }
        for &c in &self.channels {
            positive("channels", c)?;
        }
        Ok(())
    }

    pub fn protocol(&self) -> Result<Protocol, ConfigError> {
        self.protocol
            .parse()
            .map_err(|_| invalid("protocol", format!("expected feddm, fedavg, fedprox or real, got {:?}", self.protocol)))
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        if self.seed < 0 {
            return Err(invalid("seed", format!("must be non-negative, got {}", self.seed)));
        }
        Ok(self.seed as u64)
    }

    pub fn workers(&self) -> Result<usize, ConfigError> {
        non_negative("workers", self.workers)
    }

    pub fn data_source(&self) -> Result<DataSource, ConfigError> {
        let need = |key: &'static str, p: &Option<PathBuf>| {
            p.clone().ok_or_else(|| invalid(key, format!("required for dataset {:?}", self.dataset)))
        };
        if let Some(v) = self.max_classes {
            positive("max_classes", v)?;
        }
        if let Some(v) = self.max_per_class {
            positive("max_per_class", v)?;
        }
        match self.dataset.as_str() {
            "blobs" => {
                let classes = positive("blob_classes", self.blob_classes)?;
                if classes < 2 {
                    return Err(invalid("blob_classes", "need at least 2 classes"));
                }
                Ok(DataSource::Blobs {
                    per_class: positive("blob_per_class", self.blob_per_class)?,
                    classes,
                    dim: positive("blob_dim", self.blob_dim)?,
                    spread: non_negative_f("blob_spread", self.blob_spread)?,
                    test_per_class: positive("test_per_class", self.test_per_class)?,
                })
            }
            "binary1d" => Ok(DataSource::Binary1d {
                samples: positive("samples", self.samples)?,
                test_samples: positive("test_samples", self.test_samples)?,
            }),
            "idx" => Ok(DataSource::Idx {
                train_images: need("train_images", &self.train_images)?,
                train_labels: need("train_labels", &self.train_labels)?,
                test_images: need("test_images", &self.test_images)?,
                test_labels: need("test_labels", &self.test_labels)?,
            }),
            "cifar10" | "cifar100" => {
                if self.train_files.is_empty() {
                    return Err(invalid("train_files", "need at least one file"));
                }
                if self.test_files.is_empty() {
                    return Err(invalid("test_files", "need at least one file"));
                }
                Ok(DataSource::Cifar {
                    fine: self.dataset == "cifar100",
                    train_files: self.train_files.clone(),
                    test_files: self.test_files.clone(),
                })
            }
            other => Err(invalid(
                "dataset",
                format!("expected blobs, binary1d, idx, cifar10 or cifar100, got {other:?}"),
            )),
        }
    }

    /// Model for inputs of `example_shape` with `num_classes` classes.
    pub fn architecture(&self, example_shape: &[usize], num_classes: usize) -> Result<Architecture, ConfigError> {
        let arch = match self.model.as_str() {
            "logistic" => Architecture::Logistic1d,
            "mlp" => {
                let mut widths = vec![example_shape.iter().product()];
                for &h in &self.hidden {
                    widths.push(positive("hidden", h)?);
                }
                widths.push(num_classes);
                Architecture::Mlp { widths }
            }
            "convnet" => {
                let input: [usize; 3] = example_shape
                    .try_into()
                    .map_err(|_| invalid("model", format!("convnet needs image inputs, got shape {example_shape:?}")))?;
                let channels: [usize; 3] = self
                    .channels
                    .iter()
                    .map(|&c| positive("channels", c))
                    .collect::<Result<Vec<_>, _>>()?
                    .try_into()
                    .map_err(|_| invalid("channels", "expected three channel counts"))?;
                Architecture::ConvNetLite { input, channels, num_classes }
            }
            other => return Err(invalid("model", format!("expected mlp, convnet or logistic, got {other:?}"))),
        };
        arch.validate().map_err(|e| invalid("model", e.to_string()))?;
        Ok(arch)
    }

    /// Protocol settings; the architecture is filled in once data is loaded.
    pub fn fed_config(&self) -> Result<FedRunConfig, ConfigError> {
        let mut cfg = FedRunConfig::new(self.protocol()?, Architecture::Logistic1d);
        cfg.rounds = positive("rounds", self.rounds)?;
        cfg.clients = positive("clients", self.clients)?;
        cfg.alpha = positive_f("alpha", self.alpha)?;
        cfg.seed = self.seed()?;
        cfg.client_fraction = positive_f("client_fraction", self.client_fraction)?;
        if cfg.client_fraction > 1.0 {
            return Err(invalid("client_fraction", format!("must not exceed 1, got {}", self.client_fraction)));
        }
        cfg.client = ClientConfig {
            iterations: non_negative("iterations", self.iterations)?,
            lr: positive_f("client_lr", self.client_lr)?,
            real_batch: positive("real_batch", self.real_batch)?,
            ipc: positive("ipc", self.ipc)?,
            rho: non_negative_f("rho", self.rho)?,
            sigma: non_negative_f("sigma", self.sigma)?,
            clip: positive_f("clip", self.clip)?,
        };
        cfg.server = ServerConfig {
            lr: positive_f("server_lr", self.server_lr)?,
            epochs: non_negative("server_epochs", self.server_epochs)?,
            batch: positive("server_batch", self.server_batch)?,
            rho: cfg.client.rho,
        };
        cfg.local = LocalConfig {
            epochs: non_negative("local_epochs", self.local_epochs)?,
            lr: positive_f("local_lr", self.local_lr)?,
            batch: positive("local_batch", self.local_batch)?,
            mu: non_negative_f("mu", self.mu)?,
        };
        cfg.dp = match (self.epsilon, self.delta) {
            (None, None) => None,
            (Some(e), Some(d)) => Some(DpBudget::new(e, d).map_err(|err| invalid("epsilon", err.to_string()))?),
            (Some(_), None) => return Err(invalid("delta", "required when epsilon is set")),
            (None, Some(_)) => return Err(invalid("epsilon", "required when delta is set")),
        };
        cfg.workers = self.workers()?;
        cfg.wall_clock = self.wall_clock;
        Ok(cfg)
    }
}

/// Reads and validates a config file. An empty file yields the defaults.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    ExperimentConfig::parse_str(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::parse_str(text, Path::new("test.toml"))
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let fed = cfg.fed_config().unwrap();
        assert_eq!(fed.rounds, 20);
        assert_eq!(fed.client.ipc, 10);
        assert_eq!(fed.client.iterations, 1000);
        assert_eq!(fed.client.lr, 1.0);
        assert_eq!(fed.client.real_batch, 256);
        assert_eq!(fed.client.clip, 5.0);
        assert_eq!(fed.server.lr, 0.01);
        assert_eq!(fed.server.batch, 256);
        assert_eq!(fed.server.epochs, 500);
        assert_eq!(fed.server.rho, 5.0);
    }

    #[test]
    fn range_errors_name_the_key() {
        for (text, key) in [
            ("rounds = -1", "rounds"),
            ("clients = 0", "clients"),
            ("alpha = 0.0", "alpha"),
            ("ipc = 0", "ipc"),
            ("clip = -5.0", "clip"),
            ("server_batch = 0", "server_batch"),
            ("mu = -0.1", "mu"),
            ("seed = -3", "seed"),
            ("protocol = \"scaffold\"", "protocol"),
            ("dataset = \"idx\"", "train_images"),
            ("epsilon = 1.0", "delta"),
            ("model = \"convnet\"", "model"),
            ("model = \"resnet\"", "model"),
            ("hidden = [0]", "hidden"),
        ] {
            let cfg = parse(text);
            let msg = match cfg {
                Err(e) => e.to_string(),
                Ok(c) => c.architecture(&[2], 4).unwrap_err().to_string(),
            };
            assert!(msg.contains(&format!("`{key}`")), "{text}: {msg}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse("roundz = 3").unwrap_err().to_string();
        assert!(err.contains("roundz"), "{err}");
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig {
            protocol: "fedprox".into(),
            rounds: 7,
            epsilon: Some(2.0),
            delta: Some(1e-5),
            max_classes: Some(3),
            hidden: vec![64, 32],
            ..ExperimentConfig::default()
        };
        cfg.train_files = vec![PathBuf::from("a.bin")];
        let again = parse(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        let defaults = parse(&ExperimentConfig::default().to_toml()).unwrap();
        assert_eq!(defaults, ExperimentConfig::default());
    }

    #[test]
    fn architectures_follow_data_shape() {
        let cfg = ExperimentConfig::default();
        assert_eq!(
            cfg.architecture(&[1, 28, 28], 10).unwrap(),
            Architecture::Mlp { widths: vec![784, 128, 10] }
        );
        let conv = ExperimentConfig { model: "convnet".into(), ..ExperimentConfig::default() };
        assert!(matches!(conv.architecture(&[3, 32, 32], 10).unwrap(), Architecture::ConvNetLite { .. }));
        assert!(conv.architecture(&[2], 4).is_err());
    }
}
