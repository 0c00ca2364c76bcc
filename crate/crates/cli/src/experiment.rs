//! Running one configured experiment and writing its artifacts.
//!
//! An output directory holds `history.csv`, `config.toml` (the effective
//! configuration), `manifest.json` (configuration, seed, versions and the
//! history digest) and, when requested, `images/` with the last round's
//! synthetic sets.

use std::path::{Path, PathBuf};

use feddm_core::data::{gen_1d_binary, gen_blobs, load_cifar100_bin, load_cifar_bin, load_idx, Dataset};
use feddm_core::federation::{run, FedData, RunHistory};
use feddm_core::numerics::Tensor;
use feddm_core::seeds::{derive_seed, Stream};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, DataSource, ExperimentConfig};

/// Failure classes, each with its own exit status.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("run failed: {0}")]
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 3,
            Failure::Data(_) => 4,
            Failure::Runtime(_) => 5,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub protocol: String,
    pub config: ExperimentConfig,
    pub history_sha256: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Failure::Config(format!("cannot parse manifest {}: {e}", path.display())))?;
        manifest.config.validate()?;
        Ok(manifest)
    }
}

/// Training and test sets for a configuration.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset), Failure> {
    let seed = cfg.seed()?;
    let data_err = |e: feddm_core::Error| Failure::Data(e.to_string());
    let (train, test) = match cfg.data_source()? {
        DataSource::Blobs {
            per_class,
            classes,
            dim,
            spread,
            test_per_class,
        } => (
            gen_blobs(per_class, classes, dim, spread, derive_seed(seed, Stream::Data, 0, 0)).map_err(data_err)?,
            gen_blobs(test_per_class, classes, dim, spread, derive_seed(seed, Stream::TestData, 0, 0))
                .map_err(data_err)?,
        ),
        DataSource::Binary1d { samples, test_samples } => (
            gen_1d_binary(samples, derive_seed(seed, Stream::Data, 0, 0)).map_err(data_err)?,
            gen_1d_binary(test_samples, derive_seed(seed, Stream::TestData, 0, 0)).map_err(data_err)?,
        ),
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            load_idx(&train_images, &train_labels).map_err(data_err)?,
            load_idx(&test_images, &test_labels).map_err(data_err)?,
        ),
        DataSource::Cifar {
            fine,
            train_files,
            test_files,
        } => (
            load_cifar_files(&train_files, fine)?,
            load_cifar_files(&test_files, fine)?,
        ),
    };
    let classes = train.num_classes().max(test.num_classes());
    let (train, test) = (
        train.with_num_classes(classes).map_err(data_err)?,
        test.with_num_classes(classes).map_err(data_err)?,
    );
    if cfg.max_classes.is_none() && cfg.max_per_class.is_none() {
        return Ok((train, test));
    }
    let max_classes = cfg.max_classes.map_or(classes, |c| (c as usize).min(classes));
    let per_class = cfg.max_per_class.map_or(usize::MAX, |c| c as usize);
    Ok((
        train
            .restrict(max_classes, per_class)
            .and_then(|d| d.with_num_classes(max_classes))
            .map_err(data_err)?,
        test.restrict(max_classes, usize::MAX)
            .and_then(|d| d.with_num_classes(max_classes))
            .map_err(data_err)?,
    ))
}

fn load_cifar_files(files: &[PathBuf], fine: bool) -> Result<Dataset, Failure> {
    let parts = files
        .iter()
        .map(|f| if fine { load_cifar100_bin(f) } else { load_cifar_bin(f) })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Failure::Data(e.to_string()))?;
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().expect("one part"));
    }
    let inputs = Tensor::concat_rows(&parts.iter().map(Dataset::inputs).collect::<Vec<_>>())
        .map_err(|e| Failure::Data(e.to_string()))?;
    let labels: Vec<usize> = parts.iter().flat_map(|d| d.labels().iter().copied()).collect();
    Dataset::new(parts[0].name(), inputs, labels, parts[0].num_classes()).map_err(|e| Failure::Data(e.to_string()))
}

/// Loads the data, splits it and runs the configured protocol.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunHistory, Failure> {
    execute_with_dumps(cfg, None)
}

fn execute_with_dumps(cfg: &ExperimentConfig, dump_dir: Option<PathBuf>) -> Result<RunHistory, Failure> {
    cfg.validate()?;
    let (train, test) = load_data(cfg)?;
    let mut fed = cfg.fed_config()?;
    fed.arch = cfg.architecture(train.example_shape(), train.num_classes())?;
    fed.dump_dir = dump_dir;
    let data = FedData::for_config(train, test, &fed).map_err(|e| Failure::Data(e.to_string()))?;
    run(&fed, &data).map_err(|e| Failure::Runtime(e.to_string()))
}

pub fn history_digest(csv: &str) -> String {
    hex::encode(Sha256::digest(csv.as_bytes()))
}

/// Runs `cfg` and writes its artifacts into `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunHistory, Failure> {
    let out = &cfg.out_dir;
    let io = |what: &str, e: std::io::Error| Failure::Runtime(format!("cannot write {what} in {}: {e}", out.display()));
    std::fs::create_dir_all(out).map_err(|e| io("output directory", e))?;
    let dumps = cfg.dump_images.then(|| out.join("images"));
    let history = execute_with_dumps(cfg, dumps)?;
    let csv = history.to_csv();
    std::fs::write(out.join(HISTORY_FILE), &csv).map_err(|e| io(HISTORY_FILE, e))?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_toml()).map_err(|e| io(CONFIG_FILE, e))?;
    let manifest = Manifest {
        tool: "feddm".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed()?,
        protocol: cfg.protocol.clone(),
        config: cfg.clone(),
        history_sha256: history_digest(&csv),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out.join(MANIFEST_FILE), json + "\n").map_err(|e| io(MANIFEST_FILE, e))?;
    Ok(history)
}
